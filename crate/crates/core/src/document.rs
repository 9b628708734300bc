//! Versioned JSON model documents and training checkpoints.
//!
//! Floats are written in shortest round-trip form and parsed with correct
//! rounding, so every parameter survives a save/load bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyper::{FixedStageParams, HyperMap};
use crate::model::{count_params, ConditioningSite, ModelSpec, ModelState, StageParams};
use crate::reps::Representation;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Fixed,
    Hyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageDocument {
    pub s: usize,
    pub kind: StageKind,
    #[serde(rename = "C_s")]
    pub c_s: usize,
    #[serde(default)]
    pub names: Vec<String>,
    /// HC bias, or the stage's constants when `kind` is fixed.
    pub bias: Vec<f64>,
    #[serde(default)]
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub format_version: u32,
    #[serde(rename = "f_SR")]
    pub f_sr: f64,
    pub representation: Representation,
    #[serde(rename = "S")]
    pub stage_count: usize,
    #[serde(rename = "K")]
    pub biquads: usize,
    pub delay_raw: f64,
    pub delay_gain: f64,
    pub stages: Vec<StageDocument>,
}

impl ModelDocument {
    pub fn from_model(spec: &ModelSpec, state: &ModelState) -> Result<Self> {
        state.validate(spec)?;
        if let Some(i) = state.params().iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(
                format!("parameter {i}"),
                "non-finite values cannot be stored",
            ));
        }
        let stages = state
            .stages
            .iter()
            .enumerate()
            .map(|(s, st)| match st {
                StageParams::Fixed(f) => StageDocument {
                    s,
                    kind: StageKind::Fixed,
                    c_s: 0,
                    names: vec![],
                    bias: f.params.clone(),
                    weights: vec![],
                },
                StageParams::Hyper(h) => StageDocument {
                    s,
                    kind: StageKind::Hyper,
                    c_s: h.inputs(),
                    names: spec.sites[spec.site_index(s).expect("validated")].names.clone(),
                    bias: h.bias().to_vec(),
                    weights: h.weight_rows(),
                },
            })
            .collect();
        Ok(ModelDocument {
            format_version: FORMAT_VERSION,
            f_sr: spec.sample_rate,
            representation: spec.representation,
            stage_count: spec.stages,
            biquads: spec.biquads,
            delay_raw: state.delay_raw,
            delay_gain: state.delay_gain,
            stages,
        })
    }

    /// Validates the document and rebuilds the model it describes.
    pub fn into_model(self) -> Result<(ModelSpec, ModelState)> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::validation(
                "format_version",
                format!(
                    "unsupported version {} (expected {FORMAT_VERSION})",
                    self.format_version
                ),
            ));
        }
        if self.stages.len() != self.stage_count {
            return Err(Error::validation(
                "stages",
                format!("S = {} but {} stages listed", self.stage_count, self.stages.len()),
            ));
        }
        let mut sites = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            if st.s != i {
                return Err(Error::validation(
                    format!("stages[{i}].s"),
                    format!("expected stage index {i}, found {}", st.s),
                ));
            }
            match st.kind {
                StageKind::Fixed if st.c_s != 0 || !st.names.is_empty() || !st.weights.is_empty() => {
                    return Err(Error::validation(
                        format!("stages[{i}]"),
                        "fixed stages take no controls or weights",
                    ));
                }
                StageKind::Hyper if st.c_s == 0 || st.names.len() != st.c_s => {
                    return Err(Error::validation(
                        format!("stages[{i}].names"),
                        format!("C_s = {} but {} names listed", st.c_s, st.names.len()),
                    ));
                }
                StageKind::Hyper => sites.push(ConditioningSite {
                    stage: i,
                    names: st.names.clone(),
                }),
                StageKind::Fixed => {}
            }
        }
        let spec = ModelSpec::new(self.stage_count, self.biquads, self.representation, self.f_sr, sites)?;

        let width = spec.stage_width();
        let mut found = 2;
        let mut stages = Vec::with_capacity(spec.stages);
        for (i, st) in self.stages.into_iter().enumerate() {
            found += st.bias.len() + st.weights.iter().map(Vec::len).sum::<usize>();
            if st.bias.len() != width {
                return Err(Error::validation(
                    format!("stages[{i}].bias"),
                    format!("expected {width} values, found {}", st.bias.len()),
                ));
            }
            stages.push(match st.kind {
                StageKind::Fixed => StageParams::Fixed(
                    FixedStageParams::new(spec.representation, st.bias)
                        .map_err(|e| Error::validation(format!("stages[{i}].bias"), e.to_string()))?,
                ),
                StageKind::Hyper => {
                    if st.weights.len() != width || st.weights.iter().any(|r| r.len() != st.c_s) {
                        return Err(Error::validation(
                            format!("stages[{i}].weights"),
                            format!("expected a {width} x {} matrix", st.c_s),
                        ));
                    }
                    StageParams::Hyper(
                        HyperMap::new(spec.representation, st.weights, st.bias)
                            .map_err(|e| Error::validation(format!("stages[{i}]"), e.to_string()))?,
                    )
                }
            });
        }
        let expected = count_params(&spec);
        if found != expected {
            return Err(Error::validation(
                "stages",
                format!("document holds {found} parameters, topology requires {expected}"),
            ));
        }
        let state = ModelState {
            delay_raw: self.delay_raw,
            delay_gain: self.delay_gain,
            stages,
        };
        state.validate(&spec)?;
        Ok((spec, state))
    }
}

pub fn serialize(spec: &ModelSpec, state: &ModelState) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ModelDocument::from_model(spec, state)?)?)
}

pub fn deserialize(text: &str) -> Result<(ModelSpec, ModelState)> {
    let doc: ModelDocument = serde_json::from_str(text).map_err(|e| Error::validation("document", e.to_string()))?;
    doc.into_model()
}

pub fn save_model(path: &Path, spec: &ModelSpec, state: &ModelState) -> Result<()> {
    std::fs::write(path, serialize(spec, state)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(ModelSpec, ModelState)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    deserialize(&text)
}

/// Topology-only description, used to start training from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecDocument {
    #[serde(rename = "f_SR", default = "default_rate")]
    pub f_sr: f64,
    pub representation: Representation,
    #[serde(rename = "S")]
    pub stage_count: usize,
    #[serde(rename = "K")]
    pub biquads: usize,
    #[serde(default)]
    pub sites: Vec<SiteDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteDocument {
    pub s: usize,
    pub names: Vec<String>,
}

fn default_rate() -> f64 {
    44100.0
}

impl SpecDocument {
    pub fn from_spec(spec: &ModelSpec) -> Self {
        SpecDocument {
            f_sr: spec.sample_rate,
            representation: spec.representation,
            stage_count: spec.stages,
            biquads: spec.biquads,
            sites: spec
                .sites
                .iter()
                .map(|s| SiteDocument {
                    s: s.stage,
                    names: s.names.clone(),
                })
                .collect(),
        }
    }

    pub fn into_spec(self) -> Result<ModelSpec> {
        ModelSpec::new(
            self.stage_count,
            self.biquads,
            self.representation,
            self.f_sr,
            self.sites
                .into_iter()
                .map(|s| ConditioningSite {
                    stage: s.s,
                    names: s.names,
                })
                .collect(),
        )
    }
}

pub fn load_spec(path: &Path) -> Result<ModelSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: SpecDocument = serde_json::from_str(&text).map_err(|e| Error::validation("spec", e.to_string()))?;
    doc.into_spec()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "format_version": 1,
        "f_SR": 44100.0,
        "representation": "coefficient",
        "S": 1,
        "K": 1,
        "delay_raw": -8.0,
        "delay_gain": 1.0,
        "stages": [
            {"s": 0, "kind": "fixed", "C_s": 0, "bias": [0.0, 0.5, 0.25, 0.1, -0.2]}
        ]
    }"#;

    #[test]
    fn minimal_document_loads() {
        let (spec, state) = deserialize(MINIMAL).unwrap();
        assert_eq!(spec.stages, 1);
        assert_eq!(count_params(&spec), 7);
        assert_eq!(state.params(), vec![-8.0, 1.0, 0.0, 0.5, 0.25, 0.1, -0.2]);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = ModelSpec::mt2(Representation::ParametricEq);
        let mut state = ModelState::init(&spec, 11);
        let p: Vec<f64> = state
            .params()
            .iter()
            .enumerate()
            .map(|(i, v)| v + (i as f64 * 0.7).sin() / 3.0)
            .collect();
        state.set_params(&p).unwrap();
        let (spec2, state2) = deserialize(&serialize(&spec, &state).unwrap()).unwrap();
        assert_eq!(spec2, spec);
        let p2 = state2.params();
        assert!(p.iter().zip(&p2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn missing_parameter_rejected() {
        let spec = ModelSpec::mt2(Representation::ParametricEq);
        let state = ModelState::init(&spec, 0);
        let mut doc = ModelDocument::from_model(&spec, &state).unwrap();
        doc.stages[4].bias.pop();
        let err = doc.into_model().unwrap_err().to_string();
        assert!(err.contains("stages[4].bias"), "{err}");
    }

    #[test]
    fn bad_versions_and_shapes_rejected() {
        assert!(deserialize(&MINIMAL.replace("\"format_version\": 1", "\"format_version\": 2")).is_err());
        assert!(deserialize(&MINIMAL.replace("\"S\": 1", "\"S\": 2")).is_err());
        assert!(deserialize(&MINIMAL.replace("\"kind\": \"fixed\"", "\"kind\": \"hyper\"")).is_err());
        assert!(deserialize("{not json").is_err());
        assert!(deserialize(&MINIMAL.replace("\"K\": 1", "\"K\": 1, \"extra\": 3")).is_err());
    }

    #[test]
    fn spec_document_round_trip() {
        let spec = ModelSpec::mt2(Representation::PoleZero);
        let text = serde_json::to_string(&SpecDocument::from_spec(&spec)).unwrap();
        let back: SpecDocument = serde_json::from_str(&text).unwrap();
        assert_eq!(back.into_spec().unwrap(), spec);
    }
}

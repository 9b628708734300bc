//! Cascaded-biquad parameterizations and their activations.
//!
//! Each representation maps an unconstrained raw vector per biquad onto
//! coefficients that are stable for every input. The activations are generic
//! over [`Real`] so that the same code yields values and exact derivatives.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::{db_to_linear, rbj_coefficients, BiquadCoeffs, EqKind};
use crate::error::{Error, Result};
use crate::scalar::{Dual, Real};

/// Radial headroom kept between realized poles and the unit circle.
pub const POLE_MARGIN: f64 = 1e-3;

/// Closest an EQ section's frequency may come to DC or Nyquist, as a fraction
/// of the sample rate.
pub const EQ_EDGE_FRACTION: f64 = 1e-4;

/// Lower bound on the realized EQ Q.
pub const Q_FLOOR: f64 = 1e-3;

const RHO: f64 = 1.0 - POLE_MARGIN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Coefficient,
    PoleZero,
    ParametricEq,
}

impl Representation {
    pub const ALL: [Representation; 3] = [
        Representation::Coefficient,
        Representation::PoleZero,
        Representation::ParametricEq,
    ];

    /// Raw parameters per biquad.
    pub fn params_per_biquad(self) -> usize {
        match self {
            Representation::Coefficient | Representation::PoleZero => 4,
            Representation::ParametricEq => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Representation::Coefficient => "coefficient",
            Representation::PoleZero => "pole_zero",
            Representation::ParametricEq => "parametric_eq",
        }
    }

    /// Names of the per-biquad raw parameters, in storage order.
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Representation::Coefficient => &["b1", "b2", "a1", "a2"],
            Representation::PoleZero => &["zero_re", "zero_im", "pole_re", "pole_im"],
            Representation::ParametricEq => &["freq", "gain", "q"],
        }
    }

    pub fn min_biquads(self) -> usize {
        match self {
            Representation::ParametricEq => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "coefficient" | "coeff" => Ok(Representation::Coefficient),
            "pole_zero" | "polezero" => Ok(Representation::PoleZero),
            "parametric_eq" | "eq" | "peq" => Ok(Representation::ParametricEq),
            _ => Err(Error::validation(
                "representation",
                format!("unknown representation `{s}`"),
            )),
        }
    }
}

/// Unconstrained parameters of one filtering stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStageParams {
    pub representation: Representation,
    /// Stage gain, read directly as dB.
    pub gain_db: f64,
    /// One raw vector of length P per biquad.
    pub biquads: Vec<Vec<f64>>,
}

impl RawStageParams {
    /// Builds from the flat layout `[gain, v_0 .., v_1 .., ...]`.
    pub fn from_flat(representation: Representation, flat: &[f64]) -> Result<Self> {
        let p = representation.params_per_biquad();
        if flat.is_empty() || !(flat.len() - 1).is_multiple_of(p) {
            return Err(Error::validation(
                "raw stage",
                format!("length {} is not 1 + K*{p}", flat.len()),
            ));
        }
        let k = (flat.len() - 1) / p;
        if k < representation.min_biquads() {
            return Err(Error::validation(
                "raw stage",
                format!(
                    "{representation} needs at least {} biquads, got {k}",
                    representation.min_biquads()
                ),
            ));
        }
        Ok(RawStageParams {
            representation,
            gain_db: flat[0],
            biquads: flat[1..].chunks(p).map(|c| c.to_vec()).collect(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.biquads.len() * self.representation.params_per_biquad());
        v.push(self.gain_db);
        for b in &self.biquads {
            v.extend_from_slice(b);
        }
        v
    }

    pub fn biquad_count(&self) -> usize {
        self.biquads.len()
    }

    fn check(&self, expected: Representation) -> Result<()> {
        if self.representation != expected {
            return Err(Error::validation(
                "representation",
                format!("expected {expected}, got {}", self.representation),
            ));
        }
        let p = expected.params_per_biquad();
        if let Some(i) = self.biquads.iter().position(|b| b.len() != p) {
            return Err(Error::validation(
                format!("biquads[{i}]"),
                format!("expected {p} raw values, got {}", self.biquads[i].len()),
            ));
        }
        if self.biquads.len() < expected.min_biquads() {
            return Err(Error::validation(
                "biquads",
                format!("{expected} needs at least {} biquads", expected.min_biquads()),
            ));
        }
        Ok(())
    }
}

/// Stable sections plus the stage's linear gain.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedStage {
    pub sections: Vec<BiquadCoeffs>,
    pub linear_gain: f64,
}

/// User-facing settings of one realized EQ section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EqSection {
    pub kind: EqKind,
    pub freq_hz: f64,
    pub gain_db: f64,
    pub q: f64,
}

pub fn p2c_coefficient(raw: &RawStageParams) -> Result<RealizedStage> {
    raw.check(Representation::Coefficient)?;
    Ok(realize_checked(raw, 0.0))
}

pub fn p2c_polezero(raw: &RawStageParams) -> Result<RealizedStage> {
    raw.check(Representation::PoleZero)?;
    Ok(realize_checked(raw, 0.0))
}

pub fn p2c_parametric_eq(raw: &RawStageParams, f_sr: f64) -> Result<RealizedStage> {
    raw.check(Representation::ParametricEq)?;
    if !(f_sr > 0.0) {
        return Err(Error::Domain(format!("sample rate must be positive, got {f_sr}")));
    }
    Ok(realize_checked(raw, f_sr))
}

/// Dispatches on the raw vector's representation.
pub fn realize(raw: &RawStageParams, f_sr: f64) -> Result<RealizedStage> {
    match raw.representation {
        Representation::Coefficient => p2c_coefficient(raw),
        Representation::PoleZero => p2c_polezero(raw),
        Representation::ParametricEq => p2c_parametric_eq(raw, f_sr),
    }
}

fn realize_checked(raw: &RawStageParams, f_sr: f64) -> RealizedStage {
    let flat: Vec<f64> = raw.biquads.iter().flatten().copied().collect();
    let sections = realize_sections(raw.representation, &flat, f_sr)
        .into_iter()
        .map(BiquadCoeffs::from_array)
        .collect();
    RealizedStage {
        sections,
        linear_gain: db_to_linear(raw.gain_db),
    }
}

/// Realized cookbook settings of a parametric-EQ stage.
pub fn eq_sections(raw: &RawStageParams, f_sr: f64) -> Result<Vec<EqSection>> {
    raw.check(Representation::ParametricEq)?;
    let flat: Vec<f64> = raw.biquads.iter().flatten().copied().collect();
    Ok(eq_settings::<f64>(&flat, f_sr)
        .into_iter()
        .map(|(kind, f, g, q)| EqSection {
            kind,
            freq_hz: f,
            gain_db: g,
            q,
        })
        .collect())
}

/// Maps the flat per-biquad raw vector (K*P values) to K coefficient arrays.
pub(crate) fn realize_sections<T: Real>(rep: Representation, flat: &[T], f_sr: f64) -> Vec<[T; 5]> {
    let c = T::cst;
    match rep {
        Representation::Coefficient => flat
            .chunks(4)
            .map(|v| {
                let a1 = c(2.0) * v[2].tanh();
                let a1_abs = a1.abs();
                let a2 = ((c(2.0) - a1_abs) * v[3].tanh() + a1_abs) / c(2.0);
                [c(1.0), v[0], v[1], a1 * c(RHO), a2 * c(RHO * RHO)]
            })
            .collect(),
        Representation::PoleZero => flat
            .chunks(4)
            .map(|v| {
                let (qr, qi, pr, pi) = (v[0], v[1], v[2], v[3]);
                let radius = (pr * pr + pi * pi).value().sqrt();
                let scale = if radius < 1e-12 {
                    c(RHO)
                } else {
                    let m = (pr * pr + pi * pi).sqrt();
                    m.tanh() / m * c(RHO)
                };
                let (pr, pi) = (pr * scale, pi * scale);
                [c(1.0), c(-2.0) * qr, qr * qr + qi * qi, c(-2.0) * pr, pr * pr + pi * pi]
            })
            .collect(),
        Representation::ParametricEq => eq_settings(flat, f_sr)
            .into_iter()
            .map(|(kind, f, g, q)| rbj_coefficients(kind, f, g, q, f_sr))
            .collect(),
    }
}

/// Triangle-wave fold `|round(x) - x|`, ties rounded to even.
pub fn fold_frequency<T: Real>(x: T) -> T {
    let r = x.value().round_ties_even();
    (x - T::cst(r)).abs()
}

fn eq_settings<T: Real>(flat: &[T], f_sr: f64) -> Vec<(EqKind, T, T, T)> {
    let k = flat.len() / 3;
    let edge = EQ_EDGE_FRACTION * f_sr;
    let scale = T::cst(f_sr / k as f64);
    let mut cumulative = T::cst(0.0);
    (0..k)
        .map(|i| {
            let v = &flat[3 * i..3 * i + 3];
            cumulative = cumulative + fold_frequency(v[0]);
            let f = (scale * cumulative).max_cst(edge).min_cst(f_sr / 2.0 - edge);
            let (kind, q_max) = if i == 0 {
                (EqKind::LowShelf, 1.0)
            } else if i == k - 1 {
                (EqKind::HighShelf, 1.0)
            } else {
                (EqKind::Peaking, 3.0)
            };
            let q = (T::cst(q_max) * v[2].sigmoid()).max_cst(Q_FLOOR);
            (kind, f, v[1], q)
        })
        .collect()
}

/// Coefficients of a stage together with their derivatives with respect to
/// every raw biquad parameter: `jacobian[i][s][j] = d coeff_j(section s) / d raw_i`.
pub(crate) struct SectionJacobian {
    pub sections: Vec<BiquadCoeffs>,
    pub jacobian: Vec<Vec<[f64; 5]>>,
}

pub(crate) fn section_jacobian(rep: Representation, flat: &[f64], f_sr: f64) -> SectionJacobian {
    let sections = realize_sections(rep, flat, f_sr)
        .into_iter()
        .map(BiquadCoeffs::from_array)
        .collect();
    let p = rep.params_per_biquad();
    let jacobian = (0..flat.len())
        .map(|i| {
            // per-section representations only touch their own biquad
            let (lo, hi) = match rep {
                Representation::ParametricEq => (0, flat.len()),
                _ => ((i / p) * p, (i / p + 1) * p),
            };
            let seeded: Vec<Dual> = flat[lo..hi]
                .iter()
                .enumerate()
                .map(|(j, &v)| Dual::new(v, if lo + j == i { 1.0 } else { 0.0 }))
                .collect();
            let partial = realize_sections(rep, &seeded, f_sr);
            let mut out = vec![[0.0; 5]; flat.len() / p];
            for (s, coeffs) in partial.iter().enumerate() {
                let idx = lo / p + s;
                for j in 0..5 {
                    out[idx][j] = coeffs[j].d;
                }
            }
            out
        })
        .collect();
    SectionJacobian { sections, jacobian }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn raw(rep: Representation, per: &[&[f64]]) -> RawStageParams {
        RawStageParams {
            representation: rep,
            gain_db: 0.0,
            biquads: per.iter().map(|v| v.to_vec()).collect(),
        }
    }

    #[test]
    fn params_per_biquad() {
        assert_eq!(Representation::Coefficient.params_per_biquad(), 4);
        assert_eq!(Representation::PoleZero.params_per_biquad(), 4);
        assert_eq!(Representation::ParametricEq.params_per_biquad(), 3);
    }

    #[test]
    fn coefficient_centre_of_triangle() {
        let s = p2c_coefficient(&raw(Representation::Coefficient, &[&[0.3, -0.2, 0.0, 0.0]])).unwrap();
        let c = s.sections[0];
        assert_eq!((c.b0, c.b1, c.b2, c.a1, c.a2), (1.0, 0.3, -0.2, 0.0, 0.0));
    }

    #[test]
    fn coefficient_activation_values() {
        let s = p2c_coefficient(&raw(Representation::Coefficient, &[&[0.0, 0.0, 1.0, 0.5]])).unwrap();
        let c = s.sections[0];
        let a1 = 2.0 * 1f64.tanh();
        let a2 = ((2.0 - a1) * 0.5f64.tanh() + a1) / 2.0;
        assert_abs_diff_eq!(a1, 1.5232, epsilon = 1e-4);
        assert_abs_diff_eq!(a2, 0.8718, epsilon = 1e-4);
        assert_abs_diff_eq!(c.a1, a1 * RHO, epsilon = 1e-15);
        assert_abs_diff_eq!(c.a2, a2 * RHO * RHO, epsilon = 1e-15);
        assert!(c.is_stable());
    }

    #[test]
    fn coefficient_saturation_stays_inside() {
        let s = p2c_coefficient(&raw(
            Representation::Coefficient,
            &[&[0.0, 0.0, 1e6, 1e6], &[0.0, 0.0, 0.0, -1e6]],
        ))
        .unwrap();
        assert_abs_diff_eq!(s.sections[0].a1, 2.0, epsilon = 3e-3);
        assert_abs_diff_eq!(s.sections[0].a2, 1.0, epsilon = 3e-3);
        assert!(s.sections.iter().all(|c| c.is_stable()));
        assert_abs_diff_eq!(s.sections[1].a2, -RHO * RHO, epsilon = 1e-12);
    }

    #[test]
    fn polezero_examples() {
        let s = p2c_polezero(&raw(Representation::PoleZero, &[&[1.0, 1.0, 2.0, 0.0]])).unwrap();
        let c = s.sections[0];
        assert_eq!((c.b0, c.b1, c.b2), (1.0, -2.0, 2.0));
        // realized pole = tanh(2) on the real axis, pulled in by the margin
        assert_abs_diff_eq!(-c.a1 / 2.0, 2f64.tanh() * RHO, epsilon = 1e-15);
        assert_abs_diff_eq!(-c.a1 / 2.0, 0.9640, epsilon = 2e-3);
        assert!(c.pole_radius() < 1.0);

        let s = p2c_polezero(&raw(Representation::PoleZero, &[&[0.0, 0.0, 0.0, 0.0]])).unwrap();
        assert_eq!(s.sections[0].to_array(), [1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn eq_cumulative_frequencies() {
        let r = raw(Representation::ParametricEq, &[&[0.25, 0.0, 0.0][..]; 4]);
        let eq = eq_sections(&r, 44100.0).unwrap();
        let f: Vec<f64> = eq.iter().map(|s| s.freq_hz).collect();
        for (a, b) in f.iter().zip([2756.25, 5512.5, 8268.75, 11025.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
        }
        let kinds: Vec<EqKind> = eq.iter().map(|s| s.kind).collect();
        assert_eq!(
            kinds,
            vec![EqKind::LowShelf, EqKind::Peaking, EqKind::Peaking, EqKind::HighShelf]
        );
        let q: Vec<f64> = eq.iter().map(|s| s.q).collect();
        assert_eq!(q, vec![0.5, 1.5, 1.5, 0.5]);
    }

    #[test]
    fn eq_zero_gain_is_unity() {
        let r = raw(
            Representation::ParametricEq,
            &[&[0.1, 0.0, 0.3], &[0.2, 0.0, -1.0], &[0.35, 0.0, 2.0]],
        );
        let s = p2c_parametric_eq(&RawStageParams { gain_db: 6.0, ..r }, 44100.0).unwrap();
        assert_abs_diff_eq!(s.linear_gain, db_to_linear(6.0));
        for c in &s.sections {
            for w in [0.0, 0.3, 1.0, 2.5, 3.1] {
                assert_abs_diff_eq!(c.response_at(w).norm(), 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn eq_frequency_clamped_off_the_band_edges() {
        let low = raw(Representation::ParametricEq, &[&[0.0, 3.0, 0.0], &[0.0, -3.0, 0.0]]);
        let eq = eq_sections(&low, 44100.0).unwrap();
        assert_abs_diff_eq!(eq[0].freq_hz, 44100.0 * EQ_EDGE_FRACTION);
        assert_abs_diff_eq!(eq[1].freq_hz, 44100.0 * EQ_EDGE_FRACTION);
        let high = raw(Representation::ParametricEq, &[&[0.5, 3.0, 0.0], &[0.5, 3.0, 0.0]]);
        let eq = eq_sections(&high, 44100.0).unwrap();
        assert_abs_diff_eq!(eq[0].freq_hz, 11025.0);
        assert_abs_diff_eq!(eq[1].freq_hz, 22050.0 - 44100.0 * EQ_EDGE_FRACTION);
        for r in [low, high] {
            let s = p2c_parametric_eq(&r, 44100.0).unwrap();
            assert!(s.sections.iter().all(|c| c.is_stable()));
        }
    }

    #[test]
    fn fold_is_triangle_wave() {
        assert_eq!(fold_frequency(0.25), 0.25);
        assert_eq!(fold_frequency(0.75), 0.25);
        assert_eq!(fold_frequency(-1.1f64), 0.10000000000000009);
        assert_eq!(fold_frequency(2.5), 0.5);
        assert_eq!(fold_frequency(3.0), 0.0);
    }

    #[test]
    fn representation_mismatch_rejected() {
        let r = raw(Representation::PoleZero, &[&[0.0; 4]]);
        assert!(p2c_coefficient(&r).is_err());
        let short = raw(Representation::ParametricEq, &[&[0.0; 3]]);
        assert!(p2c_parametric_eq(&short, 44100.0).is_err());
        let bad_len = raw(Representation::Coefficient, &[&[0.0; 3]]);
        assert!(p2c_coefficient(&bad_len).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let flat = [1.5, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let r = RawStageParams::from_flat(Representation::ParametricEq, &flat).unwrap();
        assert_eq!(r.biquads.len(), 2);
        assert_eq!(r.to_flat(), flat);
        assert!(RawStageParams::from_flat(Representation::Coefficient, &flat[..6]).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cases: [(Representation, Vec<f64>); 3] = [
            (
                Representation::Coefficient,
                vec![0.3, -0.4, 0.7, -0.2, 1.1, 0.5, -0.9, 0.4],
            ),
            (
                Representation::PoleZero,
                vec![0.3, -0.4, 0.7, -0.2, 1.1, 0.5, -0.9, 0.4],
            ),
            (
                Representation::ParametricEq,
                vec![0.13, 2.0, 0.3, 0.21, -3.0, -0.5, 0.07, 1.0, 0.2, 0.3, 4.0, 0.1],
            ),
        ];
        for (rep, flat) in cases {
            let jac = section_jacobian(rep, &flat, 44100.0);
            for i in 0..flat.len() {
                let h = 1e-6;
                let mut up = flat.clone();
                up[i] += h;
                let mut dn = flat.clone();
                dn[i] -= h;
                let su = realize_sections(rep, &up, 44100.0);
                let sd = realize_sections(rep, &dn, 44100.0);
                for s in 0..su.len() {
                    for j in 0..5 {
                        let fd = (su[s][j] - sd[s][j]) / (2.0 * h);
                        assert_abs_diff_eq!(jac.jacobian[i][s][j], fd, epsilon = 1e-6);
                    }
                }
            }
        }
    }
}

//! Hyperconditioning: affine maps from user controls to raw stage parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::reps::{RawStageParams, Representation};

/// User control values for one stage, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningVector {
    values: Vec<f64>,
}

impl ConditioningVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!(
                "conditioning value {} at position {i} outside [0, 1]",
                values[i]
            )));
        }
        Ok(ConditioningVector { values })
    }

    pub fn zeros(len: usize) -> Self {
        ConditioningVector { values: vec![0.0; len] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `raw = weights * c + bias`. Row 0 drives the stage gain; the remaining rows
/// drive the per-biquad raw parameters, section-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperMap {
    pub representation: Representation,
    /// `rows x inputs`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    inputs: usize,
}

impl HyperMap {
    pub fn new(representation: Representation, weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        RawStageParams::from_flat(representation, &bias).map_err(|e| Error::validation("bias", e.to_string()))?;
        if weights.len() != bias.len() {
            return Err(Error::validation(
                "weights",
                format!("expected {} rows, found {}", bias.len(), weights.len()),
            ));
        }
        let inputs = weights.first().map_or(0, Vec::len);
        if inputs == 0 {
            return Err(Error::validation(
                "weights",
                "a hyperconditioned stage needs at least one input",
            ));
        }
        if let Some(r) = weights.iter().position(|row| row.len() != inputs) {
            return Err(Error::validation(
                format!("weights[{r}]"),
                format!("expected {inputs} columns, found {}", weights[r].len()),
            ));
        }
        let weights: Vec<f64> = weights.into_iter().flatten().collect();
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::validation("weights", "non-finite entry"));
        }
        Ok(HyperMap {
            representation,
            weights,
            bias,
            inputs,
        })
    }

    /// Weights drawn from `Normal(0, weight_std)` around the given bias.
    pub fn random<R: Rng>(
        representation: Representation,
        bias: Vec<f64>,
        inputs: usize,
        weight_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, weight_std).map_err(|e| Error::Domain(format!("weight std: {e}")))?;
        let weights = (0..bias.len())
            .map(|_| (0..inputs).map(|_| normal.sample(rng)).collect())
            .collect();
        HyperMap::new(representation, weights, bias)
    }

    pub fn rows(&self) -> usize {
        self.bias.len()
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight(&self, row: usize, input: usize) -> f64 {
        self.weights[row * self.inputs + input]
    }

    pub fn weight_rows(&self) -> Vec<Vec<f64>> {
        self.weights.chunks(self.inputs).map(<[f64]>::to_vec).collect()
    }

    /// Trainable scalars: bias first, then weights row-major.
    pub fn param_count(&self) -> usize {
        self.bias.len() + self.weights.len()
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = &f64> {
        self.bias.iter().chain(&self.weights)
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.bias.iter_mut().chain(self.weights.iter_mut())
    }

    /// Affine image of `c` as a flat raw vector.
    pub(crate) fn apply_flat(&self, c: &[f64]) -> Vec<f64> {
        self.weights
            .chunks(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(c).fold(*b, |acc, (w, x)| acc + w * x))
            .collect()
    }
}

/// Trainable constants of an unconditioned stage, flat `[gain, v_0.., v_1..]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedStageParams {
    pub representation: Representation,
    pub params: Vec<f64>,
}

impl FixedStageParams {
    pub fn new(representation: Representation, params: Vec<f64>) -> Result<Self> {
        RawStageParams::from_flat(representation, &params).map_err(|e| Error::validation("params", e.to_string()))?;
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("params", "non-finite entry"));
        }
        Ok(FixedStageParams { representation, params })
    }

    pub fn raw(&self) -> RawStageParams {
        RawStageParams::from_flat(self.representation, &self.params).expect("validated at construction")
    }
}

pub fn map_conditioning(map: &HyperMap, c: &ConditioningVector) -> Result<RawStageParams> {
    if c.len() != map.inputs {
        return Err(Error::LengthMismatch {
            expected: map.inputs,
            found: c.len(),
        });
    }
    RawStageParams::from_flat(map.representation, &map.apply_flat(c.values()))
}

/// Raw parameters with every control at zero, i.e. the bias.
pub fn quiescent_params(map: &HyperMap) -> RawStageParams {
    RawStageParams::from_flat(map.representation, &map.bias).expect("validated at construction")
}

pub fn edit_bias(map: &HyperMap, row: usize, delta: f64) -> Result<HyperMap> {
    if row >= map.rows() {
        return Err(Error::Domain(format!(
            "bias row {row} out of range (0..{})",
            map.rows()
        )));
    }
    let mut out = map.clone();
    out.bias[row] += delta;
    Ok(out)
}

/// Near-identity raw vector for a stage: 0 dB gain and flat filters.
///
/// Parametric EQ sections get zero gain, midpoint Q, and frequencies that
/// tile the band evenly.
pub fn identity_stage_params(representation: Representation, biquads: usize) -> Vec<f64> {
    let p = representation.params_per_biquad();
    let mut v = vec![0.0; 1 + biquads * p];
    if representation == Representation::ParametricEq {
        let fold = biquads as f64 / (2.0 * (biquads as f64 + 1.0));
        for k in 0..biquads {
            v[1 + k * p] = fold;
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> HyperMap {
        HyperMap::new(Representation::ParametricEq, weights, bias).unwrap()
    }

    fn example_bias() -> Vec<f64> {
        vec![3.0, 0.1, -2.0, 0.5, 0.3, 4.0, -0.5]
    }

    #[test]
    fn zero_controls_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = HyperMap::random(Representation::ParametricEq, example_bias(), 2, 0.5, &mut rng).unwrap();
        let raw = map_conditioning(&m, &ConditioningVector::zeros(2)).unwrap();
        assert_eq!(raw.to_flat(), example_bias());
        assert_eq!(quiescent_params(&m), raw);
    }

    #[test]
    fn zero_weights_ignore_controls() {
        let m = map(vec![vec![0.0]; 7], example_bias());
        for c in [0.0, 0.3, 1.0] {
            let raw = map_conditioning(&m, &ConditioningVector::new(vec![c]).unwrap()).unwrap();
            assert_eq!(raw.to_flat(), example_bias());
        }
    }

    #[test]
    fn single_column_is_linear() {
        let w = [1.0, -2.0, 0.5, 0.25, 4.0, 0.0, 3.0];
        let m = map(w.iter().map(|v| vec![*v]).collect(), example_bias());
        let raw = map_conditioning(&m, &ConditioningVector::new(vec![0.5]).unwrap()).unwrap();
        let expected: Vec<f64> = w.iter().zip(example_bias()).map(|(w, b)| 0.5 * w + b).collect();
        assert_eq!(raw.to_flat(), expected);
    }

    #[test]
    fn controls_validated_not_clamped() {
        let m = map(vec![vec![1.0]; 7], example_bias());
        assert!(ConditioningVector::new(vec![1.5]).is_err());
        assert!(ConditioningVector::new(vec![-0.01]).is_err());
        assert!(map_conditioning(&m, &ConditioningVector::zeros(2)).is_err());
    }

    #[test]
    fn edit_bias_shifts_one_row() {
        let m = map(vec![vec![1.0, -1.0]; 7], example_bias());
        assert_eq!(edit_bias(&m, 0, 0.0).unwrap(), m);
        let e = edit_bias(&m, 0, 2.5).unwrap();
        for c in [[0.0, 0.0], [0.2, 0.9], [1.0, 1.0]] {
            let c = ConditioningVector::new(c.to_vec()).unwrap();
            let a = map_conditioning(&m, &c).unwrap();
            let b = map_conditioning(&e, &c).unwrap();
            assert!((b.gain_db - a.gain_db - 2.5).abs() < 1e-12);
            assert_eq!(a.biquads, b.biquads);
        }
        let f = edit_bias(&m, 4, -0.125).unwrap();
        let c = ConditioningVector::new(vec![0.4, 0.7]).unwrap();
        let (a, b) = (map_conditioning(&m, &c).unwrap(), map_conditioning(&f, &c).unwrap());
        assert!((b.biquads[1][0] - a.biquads[1][0] + 0.125).abs() < 1e-12);
        assert!(edit_bias(&m, 7, 1.0).is_err());
    }

    #[test]
    fn malformed_maps_rejected() {
        assert!(HyperMap::new(Representation::ParametricEq, vec![vec![1.0]; 6], example_bias()).is_err());
        assert!(HyperMap::new(Representation::ParametricEq, vec![vec![]; 7], example_bias()).is_err());
        assert!(HyperMap::new(Representation::Coefficient, vec![vec![1.0]; 7], example_bias()).is_err());
        let mut ragged = vec![vec![1.0, 2.0]; 7];
        ragged[3].pop();
        assert!(HyperMap::new(Representation::ParametricEq, ragged, example_bias()).is_err());
    }

    #[test]
    fn identity_eq_frequencies_tile_the_band() {
        let v = identity_stage_params(Representation::ParametricEq, 4);
        assert_eq!(v.len(), 13);
        let raw = RawStageParams::from_flat(Representation::ParametricEq, &v).unwrap();
        let eq = crate::reps::eq_sections(&raw, 44100.0).unwrap();
        for (k, s) in eq.iter().enumerate() {
            let expected = 22050.0 * (k as f64 + 1.0) / 5.0;
            assert!((s.freq_hz - expected).abs() < 1e-9);
            assert_eq!(s.gain_db, 0.0);
        }
    }
}

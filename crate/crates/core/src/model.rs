//! The effect model: a fractional delay layer followed by S filtering stages,
//! each a biquad cascade, a gain and a tanh (skipped on the last stage).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{cascade_response, db_to_linear, fractional_delay, linear_to_db, AudioClip, FrequencyGrid, MAX_DELAY};
use crate::error::{Error, Result};
use crate::hyper::{edit_bias, identity_stage_params, ConditioningVector, FixedStageParams, HyperMap};
use crate::reps::{realize, RawStageParams, RealizedStage, Representation};
use crate::scalar::sigmoid;
use crate::spectral::SpectralFilter;

/// Standard deviation of freshly initialized hyperconditioning weights.
pub const INIT_WEIGHT_STD: f64 = 0.01;

/// Raw delay at initialization; realizes roughly 0.02 samples.
pub const INIT_DELAY_RAW: f64 = -8.0;

/// A stage that takes user controls, and the control names it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSite {
    pub stage: usize,
    pub names: Vec<String>,
}

impl ConditioningSite {
    pub fn new(stage: usize, names: &[&str]) -> Self {
        ConditioningSite {
            stage,
            names: names.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }
}

/// Static topology of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub stages: usize,
    pub biquads: usize,
    pub representation: Representation,
    pub sample_rate: f64,
    /// Sorted by stage index.
    pub sites: Vec<ConditioningSite>,
}

impl ModelSpec {
    pub fn new(
        stages: usize,
        biquads: usize,
        representation: Representation,
        sample_rate: f64,
        mut sites: Vec<ConditioningSite>,
    ) -> Result<Self> {
        if stages == 0 {
            return Err(Error::validation("S", "at least one stage required"));
        }
        if biquads < representation.min_biquads() {
            return Err(Error::validation(
                "K",
                format!(
                    "{representation} needs at least {} biquads per stage, got {biquads}",
                    representation.min_biquads()
                ),
            ));
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::validation(
                "f_SR",
                format!("must be positive, got {sample_rate}"),
            ));
        }
        sites.sort_by_key(|s| s.stage);
        let mut seen = std::collections::HashSet::new();
        for (i, site) in sites.iter().enumerate() {
            if site.stage >= stages {
                return Err(Error::validation(
                    format!("sites[{i}].s"),
                    format!("stage {} out of range (S = {stages})", site.stage),
                ));
            }
            if i > 0 && sites[i - 1].stage == site.stage {
                return Err(Error::validation(
                    format!("sites[{i}].s"),
                    format!("stage {} conditioned twice", site.stage),
                ));
            }
            if site.names.is_empty() {
                return Err(Error::validation(
                    format!("sites[{i}].names"),
                    "a conditioning site needs at least one control",
                ));
            }
            for name in &site.names {
                if name.is_empty() || name.contains(['=', ',', '\t', '\n']) {
                    return Err(Error::validation(
                        format!("sites[{i}].names"),
                        format!("invalid control name `{name}`"),
                    ));
                }
                if !seen.insert(name.clone()) {
                    return Err(Error::validation(
                        format!("sites[{i}].names"),
                        format!("duplicate control name `{name}`"),
                    ));
                }
            }
        }
        Ok(ModelSpec {
            stages,
            biquads,
            representation,
            sample_rate,
            sites,
        })
    }

    /// Ten-stage topology of the MT-2 distortion pedal with its six controls.
    pub fn mt2(representation: Representation) -> Self {
        ModelSpec::new(
            10,
            4,
            representation,
            44100.0,
            vec![
                ConditioningSite::new(2, &["DIST"]),
                ConditioningSite::new(6, &["LOW", "HIGH"]),
                ConditioningSite::new(7, &["MID", "MID FREQ"]),
                ConditioningSite::new(8, &["LEVEL"]),
            ],
        )
        .expect("static topology is valid")
    }

    /// Raw values per stage: gain plus K*P filter parameters.
    pub fn stage_width(&self) -> usize {
        1 + self.biquads * self.representation.params_per_biquad()
    }

    pub fn site_index(&self, stage: usize) -> Option<usize> {
        self.sites.iter().position(|s| s.stage == stage)
    }

    pub fn conditioning_width(&self, stage: usize) -> usize {
        self.site_index(stage).map_or(0, |i| self.sites[i].width())
    }

    pub fn control_names(&self) -> Vec<&str> {
        self.sites
            .iter()
            .flat_map(|s| s.names.iter().map(String::as_str))
            .collect()
    }

    /// All-zero controls.
    pub fn quiescent_conditioning(&self) -> Conditioning {
        self.sites
            .iter()
            .map(|s| ConditioningVector::zeros(s.width()))
            .collect()
    }

    /// Builds per-site vectors from named settings. Unnamed controls are 0;
    /// unknown names are rejected with the list of valid ones.
    pub fn conditioning_from_settings(&self, settings: &BTreeMap<String, f64>) -> Result<Conditioning> {
        let names = self.control_names();
        if let Some(unknown) = settings.keys().find(|k| !names.contains(&k.as_str())) {
            return Err(Error::validation(
                "settings",
                format!(
                    "unknown control `{unknown}`; valid controls: {}",
                    if names.is_empty() {
                        "(none)".to_string()
                    } else {
                        names.join(", ")
                    }
                ),
            ));
        }
        self.sites
            .iter()
            .map(|site| {
                let values = site
                    .names
                    .iter()
                    .map(|n| settings.get(n).copied().unwrap_or(0.0))
                    .collect();
                ConditioningVector::new(values).map_err(|e| Error::validation("settings", e.to_string()))
            })
            .collect()
    }

    pub fn settings_from_conditioning(&self, c: &Conditioning) -> BTreeMap<String, f64> {
        self.sites
            .iter()
            .zip(c)
            .flat_map(|(site, v)| site.names.iter().cloned().zip(v.values().iter().copied()))
            .collect()
    }

    pub(crate) fn check_conditioning(&self, c: &Conditioning) -> Result<()> {
        if c.len() != self.sites.len() {
            return Err(Error::validation(
                "conditioning",
                format!("expected {} vectors, found {}", self.sites.len(), c.len()),
            ));
        }
        for (site, v) in self.sites.iter().zip(c) {
            if v.len() != site.width() {
                return Err(Error::validation(
                    format!("conditioning[stage {}]", site.stage),
                    format!("expected {} values, found {}", site.width(), v.len()),
                ));
            }
        }
        Ok(())
    }
}

/// One vector per conditioning site, in the spec's site order.
pub type Conditioning = Vec<ConditioningVector>;

/// `2 + sum_s (1 + K*P)(1 + C_s)`.
pub fn count_params(spec: &ModelSpec) -> usize {
    2 + (0..spec.stages)
        .map(|s| spec.stage_width() * (1 + spec.conditioning_width(s)))
        .sum::<usize>()
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageParams {
    Fixed(FixedStageParams),
    Hyper(HyperMap),
}

impl StageParams {
    pub fn param_count(&self) -> usize {
        match self {
            StageParams::Fixed(f) => f.params.len(),
            StageParams::Hyper(h) => h.param_count(),
        }
    }

    fn params(&self) -> Box<dyn Iterator<Item = &f64> + '_> {
        match self {
            StageParams::Fixed(f) => Box::new(f.params.iter()),
            StageParams::Hyper(h) => Box::new(h.params()),
        }
    }

    fn params_mut(&mut self) -> Box<dyn Iterator<Item = &mut f64> + '_> {
        match self {
            StageParams::Fixed(f) => Box::new(f.params.iter_mut()),
            StageParams::Hyper(h) => Box::new(h.params_mut()),
        }
    }

    /// Raw stage parameters for the given controls (`None` for fixed stages).
    pub fn raw(&self, c: Option<&ConditioningVector>) -> Result<RawStageParams> {
        match (self, c) {
            (StageParams::Fixed(f), _) => Ok(f.raw()),
            (StageParams::Hyper(h), Some(c)) => crate::hyper::map_conditioning(h, c),
            (StageParams::Hyper(h), None) => Ok(crate::hyper::quiescent_params(h)),
        }
    }
}

/// Trainable state. Parameters are ordered delay raw, delay gain, then each
/// stage in turn (fixed: its values; hyper: bias, then weights row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub delay_raw: f64,
    pub delay_gain: f64,
    pub stages: Vec<StageParams>,
}

impl ModelState {
    /// Near-identity start: flat filters, 0 dB gains, small random weights.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = (0..spec.stages)
            .map(|s| {
                let bias = identity_stage_params(spec.representation, spec.biquads);
                match spec.conditioning_width(s) {
                    0 => StageParams::Fixed(FixedStageParams::new(spec.representation, bias).expect("identity params")),
                    c => StageParams::Hyper(
                        HyperMap::random(spec.representation, bias, c, INIT_WEIGHT_STD, &mut rng)
                            .expect("identity params"),
                    ),
                }
            })
            .collect();
        ModelState {
            delay_raw: INIT_DELAY_RAW,
            delay_gain: 1.0,
            stages,
        }
    }

    /// A state with every parameter drawn at random, for testing and
    /// gradient checks. Values stay in ranges where the activations are not
    /// saturated.
    pub fn random(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = ModelState::init(spec, seed);
        let p = spec.representation.params_per_biquad();
        let mut values = vec![rng.gen_range(-2.0..2.0), rng.gen_range(0.5..1.5)];
        for stage in &state.stages {
            let row = |rng: &mut ChaCha8Rng, r: usize, scale: f64| -> f64 {
                if r == 0 {
                    return rng.gen_range(-3.0..3.0) * scale;
                }
                let j = (r - 1) % p;
                match (spec.representation, j) {
                    (Representation::ParametricEq, 0) => rng.gen_range(0.05..0.45) * scale,
                    (Representation::ParametricEq, 1) => rng.gen_range(-9.0..9.0) * scale,
                    _ => rng.gen_range(-0.5..0.5) * scale,
                }
            };
            let rows = spec.stage_width();
            match stage {
                StageParams::Fixed(_) => values.extend((0..rows).map(|r| row(&mut rng, r, 1.0))),
                StageParams::Hyper(h) => {
                    values.extend((0..rows).map(|r| row(&mut rng, r, 1.0)));
                    for r in 0..rows {
                        values.extend((0..h.inputs()).map(|_| row(&mut rng, r, 0.3)));
                    }
                }
            }
        }
        state.set_params(&values).expect("sized from the spec");
        // normalize the cascade up to each stage to unit mean power gain so
        // that long cascades neither vanish nor saturate into a
        // near-discontinuous loss surface
        let grid = FrequencyGrid::new(512).expect("even size");
        let mut cumulative = vec![num_complex::Complex64::new(1.0, 0.0); grid.bin_count()];
        for stage in &mut state.stages {
            let raw = stage.raw(None).expect("shape checked");
            let realized = realize(&raw, spec.sample_rate).expect("finite raw values");
            if let Ok(h) = cascade_response(&realized.sections, &grid) {
                for (c, v) in cumulative.iter_mut().zip(&h.values) {
                    *c *= v;
                }
            }
            let power = cumulative.iter().map(|v| v.norm_sqr()).sum::<f64>() / cumulative.len() as f64;
            let shift = linear_to_db(power.max(1e-12).sqrt());
            for c in &mut cumulative {
                *c /= power.max(1e-12).sqrt();
            }
            match stage {
                StageParams::Fixed(f) => f.params[0] -= shift,
                StageParams::Hyper(h) => *h = edit_bias(h, 0, -shift).expect("row 0 exists"),
            }
        }
        state
    }

    /// Transparent model: zero weights, flat filters, negligible delay.
    pub fn identity(spec: &ModelSpec) -> Self {
        let mut state = ModelState::init(spec, 0);
        for stage in &mut state.stages {
            if let StageParams::Hyper(h) = stage {
                let rows = vec![vec![0.0; h.inputs()]; h.rows()];
                *h = HyperMap::new(spec.representation, rows, h.bias().to_vec()).expect("same shape");
            }
        }
        state.delay_raw = -40.0;
        state
    }

    /// Realized delay in samples, `MAX_DELAY * sigmoid(delay_raw)`.
    pub fn delay_samples(&self) -> f64 {
        MAX_DELAY * sigmoid(self.delay_raw)
    }

    pub fn param_count(&self) -> usize {
        2 + self.stages.iter().map(StageParams::param_count).sum::<usize>()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.push(self.delay_raw);
        v.push(self.delay_gain);
        for s in &self.stages {
            v.extend(s.params());
        }
        v
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::LengthMismatch {
                expected: self.param_count(),
                found: values.len(),
            });
        }
        self.delay_raw = values[0];
        self.delay_gain = values[1];
        let mut it = values[2..].iter();
        for s in &mut self.stages {
            for p in s.params_mut() {
                *p = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Checks this state has the shape the spec calls for.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.stages.len() != spec.stages {
            return Err(Error::validation(
                "stages",
                format!("expected {} stages, found {}", spec.stages, self.stages.len()),
            ));
        }
        for (s, stage) in self.stages.iter().enumerate() {
            let width = spec.stage_width();
            let c = spec.conditioning_width(s);
            match (stage, c) {
                (StageParams::Fixed(f), 0) if f.params.len() == width && f.representation == spec.representation => {}
                (StageParams::Hyper(h), c)
                    if c > 0 && h.rows() == width && h.inputs() == c && h.representation == spec.representation => {}
                _ => {
                    return Err(Error::validation(
                        format!("stages[{s}]"),
                        format!(
                            "expected {} stage with {} parameters",
                            if c == 0 { "fixed" } else { "hyperconditioned" },
                            width * (1 + c)
                        ),
                    ))
                }
            }
        }
        if !self.delay_raw.is_finite() || !self.delay_gain.is_finite() {
            return Err(Error::validation("delay", "non-finite value"));
        }
        debug_assert_eq!(self.param_count(), count_params(spec));
        Ok(())
    }

    /// Raw parameters of stage `s` under controls `c`.
    pub fn stage_raw(&self, spec: &ModelSpec, s: usize, c: &Conditioning) -> Result<RawStageParams> {
        let site = spec.site_index(s).map(|i| &c[i]);
        self.stages[s].raw(site)
    }
}

/// Human-readable names for each trainable scalar, in parameter order.
pub fn param_names(spec: &ModelSpec) -> Vec<String> {
    let row_names: Vec<String> = std::iter::once("gain".to_string())
        .chain((0..spec.biquads).flat_map(|k| {
            spec.representation
                .param_names()
                .iter()
                .map(move |p| format!("biquad{k}.{p}"))
        }))
        .collect();
    let mut names = vec!["delay_raw".to_string(), "delay_gain".to_string()];
    for s in 0..spec.stages {
        match spec.site_index(s) {
            None => names.extend(row_names.iter().map(|r| format!("stage{s}.{r}"))),
            Some(i) => {
                let site = &spec.sites[i];
                names.extend(row_names.iter().map(|r| format!("stage{s}.bias.{r}")));
                for r in &row_names {
                    names.extend(site.names.iter().map(|n| format!("stage{s}.weight.{r}.{n}")));
                }
            }
        }
    }
    names
}

pub fn realize_stage(spec: &ModelSpec, state: &ModelState, s: usize, c: &Conditioning) -> Result<RealizedStage> {
    realize(&state.stage_raw(spec, s, c)?, spec.sample_rate)
}

pub(crate) fn delay_layer(delay: f64, gain: f64, x: &[f64]) -> Vec<f64> {
    let mut y = fractional_delay(delay, x);
    for v in &mut y {
        *v *= gain;
    }
    y
}

/// A model with every stage realized for one set of controls.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedModel {
    pub delay_samples: f64,
    pub delay_gain: f64,
    pub stages: Vec<RealizedStage>,
}

impl RealizedModel {
    /// Recursive time-domain filtering.
    pub fn forward_time(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.run(x, |stage, y| {
            for section in &stage.sections {
                crate::dsp::filter_in_place(section, y, [0.0; 2])?;
            }
            Ok(())
        })
    }

    /// Frequency-sampled filtering on an `fft_size`-point grid with block
    /// overlap-add; gains and tanh are applied in the time domain.
    pub fn forward_freq(&self, x: &[f64], fft_size: usize) -> Result<Vec<f64>> {
        check_fft_size(fft_size)?;
        let grid = FrequencyGrid::new(fft_size)?;
        let engine = SpectralFilter::new(fft_size);
        self.run(x, |stage, y| {
            let h = cascade_response(&stage.sections, &grid)?;
            let filtered = engine.apply(y, &h.values);
            y.copy_from_slice(&filtered);
            Ok(())
        })
    }

    fn run(&self, x: &[f64], mut filter: impl FnMut(&RealizedStage, &mut [f64]) -> Result<()>) -> Result<Vec<f64>> {
        if !(0.0..=MAX_DELAY).contains(&self.delay_samples) {
            return Err(Error::Domain(format!(
                "delay {} samples outside [0, {MAX_DELAY}]",
                self.delay_samples
            )));
        }
        let mut y = delay_layer(self.delay_samples, self.delay_gain, x);
        let count = self.stages.len();
        for (s, stage) in self.stages.iter().enumerate() {
            filter(stage, &mut y)?;
            let last = s + 1 == count;
            for v in &mut y {
                *v *= stage.linear_gain;
                if !last {
                    *v = v.tanh();
                }
            }
        }
        Ok(y)
    }
}

pub fn realize_model(spec: &ModelSpec, state: &ModelState, c: &Conditioning) -> Result<RealizedModel> {
    state.validate(spec)?;
    spec.check_conditioning(c)?;
    Ok(RealizedModel {
        delay_samples: state.delay_samples(),
        delay_gain: state.delay_gain,
        stages: (0..spec.stages)
            .map(|s| realize_stage(spec, state, s, c))
            .collect::<Result<_>>()?,
    })
}

/// Exact inference path: recursive time-domain filtering.
pub fn forward_time(spec: &ModelSpec, state: &ModelState, x: &AudioClip, c: &Conditioning) -> Result<AudioClip> {
    check_rate(spec, x)?;
    let y = realize_model(spec, state, c)?.forward_time(&x.samples)?;
    Ok(x.with_samples(y))
}

/// Training path: each stage filters by its response sampled on an
/// `fft_size`-point grid with block overlap-add; gains and tanh are applied in
/// the time domain between stages.
pub fn forward_freq(
    spec: &ModelSpec,
    state: &ModelState,
    x: &AudioClip,
    c: &Conditioning,
    fft_size: usize,
) -> Result<AudioClip> {
    check_rate(spec, x)?;
    let y = realize_model(spec, state, c)?.forward_freq(&x.samples, fft_size)?;
    Ok(x.with_samples(y))
}

fn check_rate(spec: &ModelSpec, x: &AudioClip) -> Result<()> {
    if x.sample_rate != spec.sample_rate {
        return Err(Error::validation(
            "sample_rate",
            format!("model runs at {} Hz, clip is {} Hz", spec.sample_rate, x.sample_rate),
        ));
    }
    Ok(())
}

pub(crate) fn check_fft_size(n: usize) -> Result<()> {
    if n < 4 || !n.is_power_of_two() {
        return Err(Error::Domain(format!(
            "FFT size must be a power of two of at least 4, got {n}"
        )));
    }
    Ok(())
}

/// Stage gain in dB and linear scale for the given controls.
pub fn stage_gain_db(spec: &ModelSpec, state: &ModelState, s: usize, c: &Conditioning) -> Result<(f64, f64)> {
    let raw = state.stage_raw(spec, s, c)?;
    Ok((raw.gain_db, db_to_linear(raw.gain_db)))
}

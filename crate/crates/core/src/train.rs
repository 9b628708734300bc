//! Gradient training through the frequency-sampled forward pass.
//!
//! The backward pass is a set of explicit adjoints over the fixed stage
//! pipeline: loss, gain and tanh, the overlap-add transform, the cascade
//! product, the coefficient activations, the conditioning map and finally the
//! delay layer.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{fractional_delay_taps, AudioClip, BiquadCoeffs, FrequencyGrid, DENOMINATOR_GUARD, MAX_DELAY};
use crate::error::{Error, Result};
use crate::model::{
    check_fft_size, delay_layer, param_names, realize_model, Conditioning, ModelSpec, ModelState, StageParams,
};
use crate::reps::{section_jacobian, Representation, EQ_EDGE_FRACTION, Q_FLOOR};
use crate::scalar::sigmoid;
use crate::spectral::SpectralFilter;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// FFT size of the frequency-sampled forward pass.
    pub fft_size: usize,
    pub clip_seconds: f64,
    pub seed: u64,
    /// Share of source clips held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            fft_size: 4096,
            clip_seconds: 1.0,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("clip_seconds", self.clip_seconds),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(field, format!("must be positive, got {v}")));
            }
        }
        for (field, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::validation(field, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::validation(
                "val_fraction",
                format!("must lie in [0, 1), got {}", self.val_fraction),
            ));
        }
        check_fft_size(self.fft_size).map_err(|e| Error::validation("fft_size", e.to_string()))
    }
}

/// One training pair with the controls it was rendered under.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: AudioClip,
    pub target: AudioClip,
    pub conditioning: Conditioning,
    /// Source clip this pair was cut from; the validation split keeps clips whole.
    pub group: usize,
}

/// One real per trainable scalar, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        GradientVector { values: vec![0.0; len] }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }
}

pub fn mse_loss(y_hat: &AudioClip, y: &AudioClip) -> Result<f64> {
    mse(&y_hat.samples, &y.samples)
}

/// Mean of the per-clip losses.
pub fn mse_loss_batch(pairs: &[(AudioClip, AudioClip)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let total = pairs.iter().map(|(a, b)| mse_loss(a, b)).sum::<Result<f64>>()?;
    Ok(total / pairs.len() as f64)
}

/// `d mse / d y_hat`, i.e. `2 (y_hat - y) / M`.
pub fn mse_loss_grad(y_hat: &AudioClip, y: &AudioClip) -> Result<Vec<f64>> {
    check_lengths(&y_hat.samples, &y.samples)?;
    let m = y.samples.len() as f64;
    Ok(y_hat
        .samples
        .iter()
        .zip(&y.samples)
        .map(|(a, b)| 2.0 * (a - b) / m)
        .collect())
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: b.len(),
            found: a.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::Domain("empty clip".into()));
    }
    Ok(())
}

fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Shared transform state for one FFT size.
struct Engine {
    filter: SpectralFilter,
    /// `e^{-jw}` per bin.
    z1: Vec<Complex64>,
}

impl Engine {
    fn new(n: usize) -> Result<Self> {
        check_fft_size(n)?;
        let grid = FrequencyGrid::new(n)?;
        Ok(Engine {
            filter: SpectralFilter::new(n),
            z1: grid.omegas().iter().map(|w| Complex64::from_polar(1.0, -w)).collect(),
        })
    }

    /// Section responses `H` and reciprocal denominators `1/A` on the grid.
    fn section_response(&self, c: &BiquadCoeffs) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
        let mut h = Vec::with_capacity(self.z1.len());
        let mut inv_a = Vec::with_capacity(self.z1.len());
        for (bin, z) in self.z1.iter().enumerate() {
            let z2 = z * z;
            let a = 1.0 + c.a1 * z + c.a2 * z2;
            let magnitude = a.norm();
            if !(magnitude >= DENOMINATOR_GUARD) {
                return Err(Error::Degenerate { bin, magnitude });
            }
            let b = c.b0 + c.b1 * z + c.b2 * z2;
            let ia = 1.0 / a;
            h.push(b * ia);
            inv_a.push(ia);
        }
        Ok((h, inv_a))
    }
}

/// Everything the backward pass needs from one stage's realization.
struct StageTape {
    linear_gain: f64,
    /// Raw biquad parameters (gain excluded), section-major.
    jacobian: Vec<Vec<[f64; 5]>>,
    sections: Vec<BiquadCoeffs>,
    responses: Vec<Vec<Complex64>>,
    inv_den: Vec<Vec<Complex64>>,
    total: Vec<Complex64>,
    /// Stage input and filtered signal.
    input: Vec<f64>,
    filtered: Vec<f64>,
}

fn stage_tape(spec: &ModelSpec, state: &ModelState, s: usize, c: &Conditioning, engine: &Engine) -> Result<StageTape> {
    let raw = state.stage_raw(spec, s, c)?;
    let flat: Vec<f64> = raw.biquads.iter().flatten().copied().collect();
    let jac = section_jacobian(spec.representation, &flat, spec.sample_rate);
    let mut responses = Vec::with_capacity(jac.sections.len());
    let mut inv_den = Vec::with_capacity(jac.sections.len());
    for c in &jac.sections {
        let (h, ia) = engine.section_response(c)?;
        responses.push(h);
        inv_den.push(ia);
    }
    let mut total = responses[0].clone();
    for r in &responses[1..] {
        for (t, v) in total.iter_mut().zip(r) {
            *t *= v;
        }
    }
    Ok(StageTape {
        linear_gain: crate::dsp::db_to_linear(raw.gain_db),
        jacobian: jac.jacobian,
        sections: jac.sections,
        responses,
        inv_den,
        total,
        input: Vec::new(),
        filtered: Vec::new(),
    })
}

/// Squared-error loss of one example and its gradient, both scaled by `weight`.
fn example_gradient(
    spec: &ModelSpec,
    state: &ModelState,
    ex: &Example,
    engine: &Engine,
    weight: f64,
) -> Result<(f64, Vec<f64>)> {
    let x = &ex.input.samples;
    let c = &ex.conditioning;
    let delay = state.delay_samples();
    if !(0.0..=MAX_DELAY).contains(&delay) {
        return Err(Error::Domain(format!("delay {delay} samples outside [0, {MAX_DELAY}]")));
    }

    // forward, keeping what the adjoints need
    let mut tapes = (0..spec.stages)
        .map(|s| stage_tape(spec, state, s, c, engine))
        .collect::<Result<Vec<_>>>()?;
    let mut u = delay_layer(delay, state.delay_gain, x);
    let count = tapes.len();
    for (s, tape) in tapes.iter_mut().enumerate() {
        let v = engine.filter.apply(&u, &tape.total);
        let next: Vec<f64> = v
            .iter()
            .map(|&vi| {
                let z = vi * tape.linear_gain;
                if s + 1 == count {
                    z
                } else {
                    z.tanh()
                }
            })
            .collect();
        tape.input = std::mem::replace(&mut u, next);
        tape.filtered = v;
    }
    let y_hat = u;
    let loss = mse(&y_hat, &ex.target.samples)?;
    let m = y_hat.len() as f64;
    let mut grad_u: Vec<f64> = y_hat
        .iter()
        .zip(&ex.target.samples)
        .map(|(a, b)| weight * 2.0 * (a - b) / m)
        .collect();

    let mut grad = vec![0.0; state.param_count()];
    let offsets = stage_offsets(state);
    for s in (0..count).rev() {
        let tape = &tapes[s];
        let last = s + 1 == count;
        // through tanh; the stage output is the next stage's input
        let stage_out: &[f64] = if last { &y_hat } else { &tapes[s + 1].input };
        let grad_z: Vec<f64> = if last {
            grad_u
        } else {
            grad_u.iter().zip(stage_out).map(|(g, y)| g * (1.0 - y * y)).collect()
        };
        let g_lin: f64 = grad_z.iter().zip(&tape.filtered).map(|(g, v)| g * v).sum();
        let mut grad_raw = vec![0.0; 1 + tape.jacobian.len()];
        grad_raw[0] = g_lin * tape.linear_gain * std::f64::consts::LN_10 / 20.0;

        let grad_v: Vec<f64> = grad_z.iter().map(|g| g * tape.linear_gain).collect();
        let (grad_in, grad_h) = engine.filter.adjoint(&tape.input, &tape.total, &grad_v);
        let coeff_grads = section_coefficient_grads(engine, tape, &grad_h);
        for (i, row) in tape.jacobian.iter().enumerate() {
            grad_raw[1 + i] = row
                .iter()
                .zip(&coeff_grads)
                .map(|(d, g)| d.iter().zip(g).map(|(a, b)| a * b).sum::<f64>())
                .sum();
        }
        scatter_stage(&state.stages[s], &grad_raw, spec, s, c, &mut grad[offsets[s]..]);
        grad_u = grad_in;
    }

    // delay layer: y = gain * (w0 x[n-m] + w1 x[n-m-1]), w1 = frac(d)
    let (whole, w0, w1) = fractional_delay_taps(delay);
    let at = |i: isize| {
        if i >= 0 && (i as usize) < x.len() {
            x[i as usize]
        } else {
            0.0
        }
    };
    let mut g_gain = 0.0;
    let mut g_delay = 0.0;
    for (n, g) in grad_u.iter().enumerate() {
        let (a, b) = (at(n as isize - whole as isize), at(n as isize - whole as isize - 1));
        g_gain += g * (w0 * a + w1 * b);
        g_delay += g * state.delay_gain * (b - a);
    }
    let sig = sigmoid(state.delay_raw);
    grad[0] = g_delay * MAX_DELAY * sig * (1.0 - sig);
    grad[1] = g_gain;
    Ok((weight * loss, grad))
}

/// `dL/d(b0, b1, b2, a1, a2)` of every section, given the complex gradient
/// of the stage's total response.
fn section_coefficient_grads(engine: &Engine, tape: &StageTape, grad_h: &[Complex64]) -> Vec<[f64; 5]> {
    let k = tape.responses.len();
    let bins = grad_h.len();
    // product of all other sections, built from prefix and suffix products
    let mut suffix = vec![vec![Complex64::new(1.0, 0.0); bins]; k + 1];
    for i in (0..k).rev() {
        for b in 0..bins {
            suffix[i][b] = suffix[i + 1][b] * tape.responses[i][b];
        }
    }
    let mut prefix = vec![Complex64::new(1.0, 0.0); bins];
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let mut g = [0.0; 5];
        for b in 0..bins {
            let others = prefix[b] * suffix[i + 1][b];
            let gk = grad_h[b] * others.conj();
            let z = engine.z1[b];
            let z2 = z * z;
            let ia = tape.inv_den[i][b];
            let h = tape.responses[i][b];
            let gc = gk.conj();
            g[0] += (gc * ia).re;
            g[1] += (gc * z * ia).re;
            g[2] += (gc * z2 * ia).re;
            g[3] -= (gc * h * z * ia).re;
            g[4] -= (gc * h * z2 * ia).re;
        }
        for b in 0..bins {
            prefix[b] *= tape.responses[i][b];
        }
        out.push(g);
    }
    debug_assert_eq!(out.len(), tape.sections.len());
    out
}

fn stage_offsets(state: &ModelState) -> Vec<usize> {
    let mut at = 2;
    state
        .stages
        .iter()
        .map(|s| {
            let o = at;
            at += s.param_count();
            o
        })
        .collect()
}

fn scatter_stage(stage: &StageParams, grad_raw: &[f64], spec: &ModelSpec, s: usize, c: &Conditioning, out: &mut [f64]) {
    match stage {
        StageParams::Fixed(_) => {
            for (o, g) in out.iter_mut().zip(grad_raw) {
                *o += g;
            }
        }
        StageParams::Hyper(h) => {
            let controls = c[spec.site_index(s).expect("hyper stage has a site")].values();
            let rows = h.rows();
            for (o, g) in out[..rows].iter_mut().zip(grad_raw) {
                *o += g;
            }
            for (r, g) in grad_raw.iter().enumerate() {
                for (j, cj) in controls.iter().enumerate() {
                    out[rows + r * h.inputs() + j] += g * cj;
                }
            }
        }
    }
}

/// Batch MSE through the frequency-sampled path and its exact gradient.
pub fn backward(
    spec: &ModelSpec,
    state: &ModelState,
    batch: &[Example],
    config: &TrainConfig,
) -> Result<(f64, GradientVector)> {
    let engine = Engine::new(config.fft_size)?;
    backward_with(spec, state, batch, &engine)
}

fn backward_with(
    spec: &ModelSpec,
    state: &ModelState,
    batch: &[Example],
    engine: &Engine,
) -> Result<(f64, GradientVector)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    state.validate(spec)?;
    for ex in batch {
        spec.check_conditioning(&ex.conditioning)?;
        check_lengths(&ex.input.samples, &ex.target.samples)?;
    }
    let weight = 1.0 / batch.len() as f64;
    let parts = batch
        .par_iter()
        .map(|ex| example_gradient(spec, state, ex, engine, weight))
        .collect::<Result<Vec<_>>>()?;
    // fixed summation order keeps results independent of scheduling
    let mut loss = 0.0;
    let mut grad = GradientVector::zeros(state.param_count());
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.values.iter_mut().zip(&g) {
            *a += b;
        }
    }
    if let Some(index) = grad.first_non_finite() {
        return Err(Error::NonFiniteGradient {
            index,
            name: param_names(spec)[index].clone(),
        });
    }
    Ok((loss, grad))
}

/// Batch MSE through the frequency-sampled path, without gradients.
pub fn batch_loss_freq(spec: &ModelSpec, state: &ModelState, batch: &[Example], fft_size: usize) -> Result<f64> {
    batch_loss(spec, state, batch, |m, x| m.forward_freq(x, fft_size))
}

/// Batch MSE through the exact recursive path.
pub fn batch_loss_time(spec: &ModelSpec, state: &ModelState, batch: &[Example]) -> Result<f64> {
    batch_loss(spec, state, batch, |m, x| m.forward_time(x))
}

fn batch_loss(
    spec: &ModelSpec,
    state: &ModelState,
    batch: &[Example],
    run: impl Fn(&crate::model::RealizedModel, &[f64]) -> Result<Vec<f64>> + Sync,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let losses = batch
        .par_iter()
        .map(|ex| {
            let model = realize_model(spec, state, &ex.conditioning)?;
            mse(&run(&model, &ex.input.samples)?, &ex.target.samples)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// ADAM moments, persisted across steps and in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

pub fn adam_step(
    state: &mut ModelState,
    grads: &GradientVector,
    opt: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    let mut params = state.params();
    if grads.values.len() != params.len() || opt.m.len() != params.len() || opt.v.len() != params.len() {
        return Err(Error::LengthMismatch {
            expected: params.len(),
            found: grads.values.len(),
        });
    }
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grads.values[i];
        opt.m[i] = b1 * opt.m[i] + (1.0 - b1) * g;
        opt.v[i] = b2 * opt.v[i] + (1.0 - b2) * g * g;
        let m_hat = opt.m[i] / c1;
        let v_hat = opt.v[i] / c2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
    }
    state.set_params(&params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    /// Exact-path MSE on the held-out clips; `None` without a validation set.
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: ModelState,
    pub optimizer: AdamState,
    pub history: Vec<EpochLoss>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Splits example indices into train and validation sets, keeping groups whole.
pub fn split_examples(examples: &[Example], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut groups: Vec<usize> = examples.iter().map(|e| e.group).collect();
    groups.sort_unstable();
    groups.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    groups.shuffle(&mut rng);
    let n_val = ((groups.len() as f64 * val_fraction).round() as usize).min(groups.len().saturating_sub(1));
    let val: std::collections::BTreeSet<usize> = groups[..n_val].iter().copied().collect();
    (0..examples.len()).partition(|&i| !val.contains(&examples[i].group))
}

/// Keeps the split stream independent of the batch-order stream.
const SPLIT_SALT: u64 = 0x5eed_5011;

/// Observer called after every epoch; returning `false` stops training early.
pub type EpochCallback<'a> = dyn FnMut(&EpochLoss, &ModelState) -> bool + 'a;

pub fn fit(spec: &ModelSpec, examples: &[Example], config: &TrainConfig) -> Result<FitResult> {
    fit_from(
        spec,
        examples,
        config,
        ModelState::init(spec, config.seed),
        None,
        &mut |_, _| true,
    )
}

/// Shuffled mini-batch ADAM from the given starting point.
pub fn fit_from(
    spec: &ModelSpec,
    examples: &[Example],
    config: &TrainConfig,
    initial: ModelState,
    optimizer: Option<AdamState>,
    on_epoch: &mut EpochCallback<'_>,
) -> Result<FitResult> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Domain("dataset is empty".into()));
    }
    initial.validate(spec)?;
    let engine = Engine::new(config.fft_size)?;
    let (train_idx, val_idx) = split_examples(examples, config.val_fraction, config.seed);
    let val: Vec<Example> = val_idx.iter().map(|&i| examples[i].clone()).collect();
    let mut state = initial;
    let mut opt = optimizer.unwrap_or_else(|| AdamState::new(state.param_count()));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = train_idx.clone();
    let mut history = Vec::with_capacity(config.epochs);
    let batch_size = config.batch_size.min(order.len());

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let diverged = || Error::Diverged {
                epoch,
                last_good: Box::new(state.clone()),
            };
            let (loss, grad) = match backward_with(spec, &state, &batch, &engine) {
                Ok(v) => v,
                Err(Error::NonFiniteGradient { .. }) | Err(Error::Unstable { .. }) | Err(Error::Degenerate { .. }) => {
                    return Err(diverged())
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged());
            }
            let before = state.clone();
            adam_step(&mut state, &grad, &mut opt, config)?;
            if state.params().iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    last_good: Box::new(before),
                });
            }
            total += loss;
            batches += 1;
        }
        let val_mse = if val.is_empty() {
            None
        } else {
            Some(batch_loss_time(spec, &state, &val)?)
        };
        let record = EpochLoss {
            epoch,
            train_mse: total / batches as f64,
            val_mse,
        };
        history.push(record);
        if !on_epoch(&record, &state) {
            break;
        }
    }
    Ok(FitResult {
        state,
        optimizer: opt,
        history,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

pub fn write_loss_csv(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let mut out = String::from("epoch,train_mse,val_mse\n");
    for h in history {
        let val = h.val_mse.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", h.epoch, h.train_mse, val));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// A model document together with optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub model: crate::document::ModelDocument,
    pub optimizer: AdamState,
}

pub fn save_checkpoint(path: &Path, spec: &ModelSpec, state: &ModelState, opt: &AdamState) -> Result<()> {
    let cp = Checkpoint {
        model: crate::document::ModelDocument::from_model(spec, state)?,
        optimizer: opt.clone(),
    };
    std::fs::write(path, serde_json::to_string(&cp)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelSpec, ModelState, AdamState)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cp: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::validation("checkpoint", e.to_string()))?;
    let (spec, state) = cp.model.into_model()?;
    let n = state.param_count();
    if cp.optimizer.m.len() != n || cp.optimizer.v.len() != n {
        return Err(Error::validation("optimizer", format!("moments must have {n} entries")));
    }
    Ok((spec, state, cp.optimizer))
}

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-3;
pub const GRAD_CHECK_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub index: usize,
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// False when a perturbation crosses a kink of the activations.
    pub smooth: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries
            .iter()
            .filter(|e| e.smooth && !(e.rel_error <= self.tolerance))
    }

    pub fn max_error(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.smooth)
            .map(|e| e.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn excluded(&self) -> usize {
        self.entries.iter().filter(|e| !e.smooth).count()
    }
}

/// Compares [`backward`] with central finite differences for every parameter.
///
/// The numeric estimate combines central differences at steps `h` and `h/2`
/// (`h` = 1e-4 relative) by Richardson extrapolation.
///
/// Relative errors are measured against the larger of the two estimates.
/// That denominator is floored at a small fraction of the overall gradient
/// scale and at the round-off level of the difference quotient, so that
/// parameters with a vanishing gradient are judged by absolute error.
pub fn grad_check(
    spec: &ModelSpec,
    state: &ModelState,
    batch: &[Example],
    config: &TrainConfig,
) -> Result<GradCheckReport> {
    let engine = Engine::new(config.fft_size)?;
    let (loss, grad) = backward_with(spec, state, batch, &engine)?;
    let names = param_names(spec);
    let base = state.params();
    let scale = grad.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale_floor = 1e-6 * scale;
    let regime = regime_signature(spec, state, batch)?;

    let entries = (0..base.len())
        .into_par_iter()
        .map(|i| {
            let h = GRAD_CHECK_STEP * base[i].abs().max(1.0);
            let eval = |delta: f64| -> Result<(f64, Vec<i64>)> {
                let mut p = base.clone();
                p[i] += delta;
                let mut st = state.clone();
                st.set_params(&p)?;
                Ok((
                    batch_loss_freq(spec, &st, batch, config.fft_size)?,
                    regime_signature(spec, &st, batch)?,
                ))
            };
            let (up, r_up) = eval(h)?;
            let (dn, r_dn) = eval(-h)?;
            let (up_half, _) = eval(h / 2.0)?;
            let (dn_half, _) = eval(-h / 2.0)?;
            // Richardson extrapolation of two central differences
            let coarse = (up - dn) / (2.0 * h);
            let fine = (up_half - dn_half) / h;
            let numeric = (4.0 * fine - coarse) / 3.0;
            let analytic = grad.values[i];
            let round_off = 1e5 * f64::EPSILON * loss.abs() / h;
            let floor = scale_floor.max(round_off).max(f64::MIN_POSITIVE);
            let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            Ok(GradCheckEntry {
                index: i,
                name: names[i].clone(),
                analytic,
                numeric,
                rel_error,
                smooth: r_up == regime && r_dn == regime,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        loss,
        entries,
        tolerance: GRAD_CHECK_TOLERANCE,
    })
}

/// Discrete state of every piecewise activation; a parameter whose
/// perturbation changes it straddles a kink.
fn regime_signature(spec: &ModelSpec, state: &ModelState, batch: &[Example]) -> Result<Vec<i64>> {
    let mut sig = vec![state.delay_samples().floor() as i64];
    let fs = spec.sample_rate;
    for ex in batch {
        for s in 0..spec.stages {
            let raw = state.stage_raw(spec, s, &ex.conditioning)?;
            match spec.representation {
                Representation::Coefficient => {
                    for v in &raw.biquads {
                        sig.push(v[2].partial_cmp(&0.0).map_or(2, |o| o as i64));
                    }
                }
                Representation::PoleZero => {
                    for v in &raw.biquads {
                        sig.push(i64::from((v[2] * v[2] + v[3] * v[3]).sqrt() < 1e-12));
                    }
                }
                Representation::ParametricEq => {
                    let k = raw.biquads.len();
                    let edge = EQ_EDGE_FRACTION * fs;
                    let mut cumulative = 0.0;
                    for (i, v) in raw.biquads.iter().enumerate() {
                        let r = v[0].round_ties_even();
                        sig.push(r as i64);
                        sig.push(v[0].partial_cmp(&r).map_or(2, |o| o as i64));
                        cumulative += (v[0] - r).abs();
                        let f = fs / k as f64 * cumulative;
                        sig.push(if f < edge {
                            -1
                        } else if f > fs / 2.0 - edge {
                            1
                        } else {
                            0
                        });
                        let q_max = if i == 0 || i == k - 1 { 1.0 } else { 3.0 };
                        sig.push(i64::from(q_max * sigmoid(v[2]) < Q_FLOOR));
                    }
                }
            }
        }
    }
    Ok(sig)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    fn clip(v: Vec<f64>) -> AudioClip {
        AudioClip::new(v, 44100.0).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            fft_size: 256,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mse_examples() {
        let a = clip(vec![1.0, 0.0]);
        let z = clip(vec![0.0, 0.0]);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_loss(&a, &z).unwrap(), 0.5);
        let shifted = clip(vec![2.0, 1.0]);
        assert_eq!(mse_loss(&shifted, &a).unwrap(), 1.0);
        assert!(mse_loss(&a, &clip(vec![0.0])).is_err());
        assert_eq!(
            mse_loss_batch(&[(a.clone(), z.clone()), (a.clone(), a.clone())]).unwrap(),
            0.25
        );
    }

    #[test]
    fn mse_gradient_is_scaled_residual() {
        let a = clip(vec![1.0, -0.5, 0.25, 0.0]);
        let b = clip(vec![0.0, 0.5, 0.25, 1.0]);
        assert_eq!(mse_loss_grad(&a, &b).unwrap(), vec![0.5, -0.5, 0.0, -0.5]);
    }

    #[test]
    fn identity_model_has_zero_loss_and_gradient() {
        // with a single stage there is no tanh, so the model is transparent
        let spec = ModelSpec::new(1, 4, Representation::ParametricEq, 44100.0, vec![]).unwrap();
        let state = ModelState::identity(&spec);
        let x = clip(noise(600, 1));
        let ex = Example {
            input: x.clone(),
            target: x.clone(),
            conditioning: vec![],
            group: 0,
        };
        let (loss, grad) = backward(&spec, &state, &[ex], &small_config()).unwrap();
        assert!(loss < 1e-24, "{loss}");
        assert!(grad.norm() < 1e-10, "{}", grad.norm());
    }

    #[test]
    fn own_output_is_a_stationary_point() {
        let spec = ModelSpec::mt2(Representation::ParametricEq);
        let state = ModelState::identity(&spec);
        let c = spec.quiescent_conditioning();
        let x = clip(noise(600, 1));
        let ex = Example {
            target: crate::model::forward_freq(&spec, &state, &x, &c, 256).unwrap(),
            input: x,
            conditioning: c,
            group: 0,
        };
        let (loss, grad) = backward(&spec, &state, &[ex], &small_config()).unwrap();
        assert!(loss < 1e-24, "{loss}");
        assert!(grad.norm() < 1e-10, "{}", grad.norm());
    }

    #[test]
    fn gain_gradient_has_closed_form() {
        // single linear stage with flat filters: y_hat = 10^(a/20) x, target 2x
        let spec = ModelSpec::new(1, 2, Representation::ParametricEq, 44100.0, vec![]).unwrap();
        let mut state = ModelState::identity(&spec);
        state.delay_raw = -50.0;
        let alpha = 1.5;
        if let StageParams::Fixed(f) = &mut state.stages[0] {
            f.params[0] = alpha;
        }
        let x = noise(512, 2);
        let ex = Example {
            input: clip(x.clone()),
            target: clip(x.iter().map(|v| 2.0 * v).collect()),
            conditioning: vec![],
            group: 0,
        };
        let (_, grad) = backward(&spec, &state, &[ex], &small_config()).unwrap();
        let g = 10f64.powf(alpha / 20.0);
        let energy = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let expected = 2.0 * (g - 2.0) * energy * g * std::f64::consts::LN_10 / 20.0;
        assert!(
            (grad.values[2] - expected).abs() < 1e-6 * expected.abs(),
            "{} vs {expected}",
            grad.values[2]
        );
    }

    #[test]
    fn adam_examples() {
        let spec = ModelSpec::new(1, 1, Representation::Coefficient, 44100.0, vec![]).unwrap();
        let config = TrainConfig::default();
        let mut state = ModelState::init(&spec, 0);
        let start = state.params();
        let mut opt = AdamState::new(start.len());
        adam_step(&mut state, &GradientVector::zeros(start.len()), &mut opt, &config).unwrap();
        assert_eq!(state.params(), start);

        let mut state = ModelState::init(&spec, 0);
        let mut opt = AdamState::new(start.len());
        let g: Vec<f64> = (0..start.len()).map(|i| if i % 2 == 0 { 3.0 } else { -0.02 }).collect();
        let grads = GradientVector { values: g.clone() };
        adam_step(&mut state, &grads, &mut opt, &config).unwrap();
        for ((a, b), g) in state.params().iter().zip(&start).zip(&g) {
            assert!((a - b + config.learning_rate * g.signum()).abs() < 1e-8);
        }
        for _ in 0..5000 {
            let before = state.params();
            adam_step(&mut state, &grads, &mut opt, &config).unwrap();
            if opt.step == 5001 {
                for (a, b) in state.params().iter().zip(&before) {
                    assert!(((a - b).abs() - config.learning_rate).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn kinked_frequency_is_excluded() {
        let spec = ModelSpec::new(1, 2, Representation::ParametricEq, 44100.0, vec![]).unwrap();
        let mut state = ModelState::identity(&spec);
        if let StageParams::Fixed(f) = &mut state.stages[0] {
            f.params = vec![1.0, 0.5, 3.0, 0.2, 0.1, -2.0, 0.4];
        }
        let x = clip(noise(400, 3));
        let ex = Example {
            input: x.clone(),
            target: clip(noise(400, 4)),
            conditioning: vec![],
            group: 0,
        };
        let report = grad_check(&spec, &state, &[ex], &small_config()).unwrap();
        let flagged: Vec<&str> = report
            .entries
            .iter()
            .filter(|e| !e.smooth)
            .map(|e| e.name.as_str())
            .collect();
        assert_eq!(flagged, vec!["stage0.biquad0.freq"]);
        assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                fft_size: 1000,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                adam_beta2: 1.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}

//! Datasets: a synthetic teacher effect, source-clip synthesis, dataset
//! generation, and ingestion of measured WAV pairs.
//!
//! Manifest files start with the line `hcbiquad-manifest 1`. Every following
//! non-empty line holds one record as three tab-separated fields: input WAV
//! path, target WAV path, and comma-separated `NAME=value` settings. Relative
//! paths are resolved against the manifest's directory.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::hyper::{FixedStageParams, HyperMap};
use crate::model::{forward_time, ConditioningSite, ModelSpec, ModelState, StageParams};
use crate::reps::Representation;
use crate::train::Example;
use crate::wav::{read_wav, write_wav, WavEncoding};

pub const MANIFEST_HEADER: &str = "hcbiquad-manifest 1";

/// A fixed reference effect that stands in for a measured device.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSpec {
    pub spec: ModelSpec,
    pub state: ModelState,
}

/// One EQ section of the teacher: frequency in Hz, gain in dB, Q.
type Section = (f64, f64, f64);

/// Raw ParametricEq values that realize the given sections, which must have
/// non-decreasing frequencies below Nyquist.
pub fn eq_raw(gain_db: f64, sections: &[Section], sample_rate: f64) -> Vec<f64> {
    let k = sections.len();
    let scale = sample_rate / k as f64;
    let mut raw = vec![gain_db];
    let mut previous = 0.0;
    for (i, &(f, g, q)) in sections.iter().enumerate() {
        let q_max = if i == 0 || i == k - 1 { 1.0 } else { 3.0 };
        let p = q / q_max;
        raw.extend([(f - previous) / scale, g, (p / (1.0 - p)).ln()]);
        previous = f;
    }
    raw
}

impl TeacherSpec {
    /// Five-stage pedal-like reference.
    ///
    /// | stage | role | controls |
    /// |---|---|---|
    /// | 0 | input drive into the first clipper | DIST (+18 dB of gain) |
    /// | 1 | fixed inter-stage voicing | |
    /// | 2 | shelving tone stack | LOW, HIGH (+12 dB on the shelves) |
    /// | 3 | sweepable mid band | MID (+16 dB), MID FREQ (400 to 2000 Hz) |
    /// | 4 | output level, linear | LEVEL (+12 dB) |
    pub fn reference() -> Self {
        let fs = 44100.0;
        let spec = ModelSpec::new(
            5,
            4,
            Representation::ParametricEq,
            fs,
            vec![
                ConditioningSite::new(0, &["DIST"]),
                ConditioningSite::new(2, &["LOW", "HIGH"]),
                ConditioningSite::new(3, &["MID", "MID FREQ"]),
                ConditioningSite::new(4, &["LEVEL"]),
            ],
        )
        .expect("static topology is valid");
        let scale = fs / 4.0;
        let hyper = |bias: Vec<f64>, inputs: usize, entries: &[(usize, usize, f64)]| {
            let mut w = vec![vec![0.0; inputs]; bias.len()];
            for &(row, col, v) in entries {
                w[row][col] = v;
            }
            StageParams::Hyper(HyperMap::new(Representation::ParametricEq, w, bias).expect("valid teacher stage"))
        };
        let stages = vec![
            hyper(
                eq_raw(
                    6.0,
                    &[
                        (120.0, -2.0, 0.7),
                        (800.0, 3.0, 1.0),
                        (2500.0, 2.0, 1.2),
                        (6000.0, -6.0, 0.7),
                    ],
                    fs,
                ),
                1,
                &[(0, 0, 18.0)],
            ),
            StageParams::Fixed(
                FixedStageParams::new(
                    Representation::ParametricEq,
                    eq_raw(
                        -2.0,
                        &[
                            (90.0, -3.0, 0.7),
                            (1200.0, 4.0, 0.8),
                            (3500.0, -3.0, 1.5),
                            (4500.0, -10.0, 0.7),
                        ],
                        fs,
                    ),
                )
                .expect("valid teacher stage"),
            ),
            hyper(
                eq_raw(
                    0.0,
                    &[
                        (300.0, -6.0, 0.7),
                        (1000.0, 0.0, 1.0),
                        (2500.0, 0.0, 1.0),
                        (3000.0, -6.0, 0.7),
                    ],
                    fs,
                ),
                2,
                &[(2, 0, 12.0), (11, 1, 12.0)],
            ),
            hyper(
                eq_raw(
                    0.0,
                    &[
                        (100.0, 0.0, 0.7),
                        (400.0, -8.0, 1.2),
                        (5000.0, -2.0, 1.0),
                        (9000.0, -3.0, 0.7),
                    ],
                    fs,
                ),
                2,
                &[(5, 0, 16.0), (4, 1, 1600.0 / scale)],
            ),
            hyper(
                eq_raw(
                    -12.0,
                    &[
                        (80.0, 0.0, 0.7),
                        (2000.0, -1.0, 0.8),
                        (7000.0, 1.0, 1.0),
                        (12000.0, -2.0, 0.7),
                    ],
                    fs,
                ),
                1,
                &[(0, 0, 12.0)],
            ),
        ];
        let state = ModelState {
            // a quarter-sample latency, 64 * sigmoid(raw) = 0.25
            delay_raw: (0.25f64 / 63.75).ln(),
            delay_gain: 1.0,
            stages,
        };
        state.validate(&spec).expect("teacher matches its topology");
        TeacherSpec { spec, state }
    }
}

/// Exact recursive rendering of the teacher.
pub fn render_teacher(teacher: &TeacherSpec, x: &AudioClip, settings: &BTreeMap<String, f64>) -> Result<AudioClip> {
    let c = teacher.spec.conditioning_from_settings(settings)?;
    forward_time(&teacher.spec, &teacher.state, x, &c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub input: AudioClip,
    pub target: AudioClip,
    pub settings: BTreeMap<String, f64>,
    /// Records cut from the same source segment share an id.
    pub clip_id: usize,
}

impl DatasetRecord {
    /// Training example for `spec`; the settings must name exactly its controls.
    pub fn to_example(&self, spec: &ModelSpec) -> Result<Example> {
        let names = spec.control_names();
        if let Some(missing) = names.iter().find(|n| !self.settings.contains_key(**n)) {
            return Err(Error::validation(
                format!("record {}", self.clip_id),
                format!("missing setting `{missing}`"),
            ));
        }
        Ok(Example {
            input: self.input.clone(),
            target: self.target.clone(),
            conditioning: spec.conditioning_from_settings(&self.settings)?,
            group: self.clip_id,
        })
    }
}

pub fn to_examples(spec: &ModelSpec, records: &[DatasetRecord]) -> Result<Vec<Example>> {
    records.iter().map(|r| r.to_example(spec)).collect()
}

/// Segments the sources into clips of `clip_seconds`, draws `settings_per_clip`
/// uniform settings for each, and renders the teacher.
pub fn generate_dataset(
    teacher: &TeacherSpec,
    sources: &[AudioClip],
    settings_per_clip: usize,
    clip_seconds: f64,
    seed: u64,
) -> Result<Vec<DatasetRecord>> {
    if sources.is_empty() {
        return Err(Error::Domain("no source clips given".into()));
    }
    if !(clip_seconds > 0.0) {
        return Err(Error::Domain(format!(
            "clip length must be positive, got {clip_seconds}"
        )));
    }
    let rate = teacher.spec.sample_rate;
    if let Some(i) = sources.iter().position(|c| c.sample_rate != rate) {
        return Err(Error::validation(
            format!("sources[{i}]"),
            format!(
                "sample rate {} Hz differs from the teacher's {rate} Hz",
                sources[i].sample_rate
            ),
        ));
    }
    let clip_len = (clip_seconds * rate).round() as usize;
    let segments: Vec<AudioClip> = sources
        .iter()
        .flat_map(|c| {
            let n = (c.len() / clip_len).max(1);
            (0..n).map(move |i| c.with_samples(c.samples[i * clip_len..((i + 1) * clip_len).min(c.len())].to_vec()))
        })
        .filter(|c| !c.is_empty())
        .collect();

    let names = teacher.spec.control_names();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::with_capacity(segments.len() * settings_per_clip);
    for (id, _) in segments.iter().enumerate() {
        for _ in 0..settings_per_clip {
            let settings: BTreeMap<String, f64> = names.iter().map(|n| (n.to_string(), rng.gen::<f64>())).collect();
            jobs.push((id, settings));
        }
    }
    jobs.into_par_iter()
        .map(|(id, settings)| {
            let input = segments[id].clone();
            let target = render_teacher(teacher, &input, &settings)?;
            Ok(DatasetRecord {
                input,
                target,
                settings,
                clip_id: id,
            })
        })
        .collect()
}

/// Pseudo-guitar test signals: a few plucked notes per clip built from
/// decaying harmonics with fundamentals in 80-400 Hz, plus low-level noise,
/// peak-normalized to 0.5. Samples are rounded to `f32` so the clips survive
/// a float WAV round trip unchanged.
pub fn synth_source_clips(count: usize, seconds: f64, sample_rate: f64, seed: u64) -> Vec<AudioClip> {
    let len = (seconds * sample_rate).round() as usize;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64));
            let mut x = vec![0.0; len];
            let notes = rng.gen_range(1..=4);
            for _ in 0..notes {
                let onset = rng.gen_range(0..len.max(1) * 3 / 4 + 1);
                let f0 = rng.gen_range(80.0..400.0);
                let velocity = rng.gen_range(0.3..1.0);
                let decay = rng.gen_range(1.5..6.0);
                let brightness = rng.gen_range(0.5..1.5);
                for h in 1..=12 {
                    let f = f0 * h as f64;
                    if f >= sample_rate / 2.0 {
                        break;
                    }
                    let amp = velocity / (h as f64).powf(1.0 / brightness);
                    let phase = rng.gen_range(0.0..2.0 * PI);
                    let rate = decay * (1.0 + 0.3 * h as f64);
                    for (n, v) in x[onset..].iter_mut().enumerate() {
                        let t = n as f64 / sample_rate;
                        *v += amp * (-rate * t).exp() * (2.0 * PI * f * t + phase).sin();
                    }
                }
            }
            for v in &mut x {
                *v += 1e-3 * rng.gen_range(-1.0..1.0);
            }
            let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let samples = x.iter().map(|v| f64::from((0.5 * v / peak) as f32)).collect();
            AudioClip::new(samples, sample_rate).expect("finite by construction")
        })
        .collect()
}

fn format_settings(settings: &BTreeMap<String, f64>) -> String {
    settings
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Writes inputs (one file per clip id), targets and a manifest into `dir`.
pub fn write_dataset(dir: &Path, records: &[DatasetRecord], encoding: WavEncoding) -> Result<PathBuf> {
    for sub in ["inputs", "targets"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    let mut written = std::collections::BTreeSet::new();
    for (i, r) in records.iter().enumerate() {
        let input = format!("inputs/clip_{:05}.wav", r.clip_id);
        if written.insert(r.clip_id) {
            write_wav(&dir.join(&input), &r.input, encoding)?;
        }
        let target = format!("targets/record_{i:05}.wav");
        write_wav(&dir.join(&target), &r.target, encoding)?;
        writeln!(manifest, "{input}\t{target}\t{}", format_settings(&r.settings)).expect("string write");
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads the records a manifest lists. Targets one sample longer or shorter
/// than their input are trimmed to the shorter length.
pub fn ingest_wav_pairs(manifest: &Path) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
        other => {
            return Err(Error::validation(
                "manifest",
                format!(
                    "expected header `{MANIFEST_HEADER}`, found `{}`",
                    other.map_or("", |(_, h)| h)
                ),
            ))
        }
    }
    let mut groups: BTreeMap<PathBuf, usize> = BTreeMap::new();
    let mut records = Vec::new();
    for (n, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let field = format!("manifest line {}", n + 1);
        let parts: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(Error::validation(
                field,
                "expected input, target and settings separated by tabs",
            ));
        }
        let mut settings = BTreeMap::new();
        for item in parts
            .get(2)
            .copied()
            .unwrap_or("")
            .split(',')
            .filter(|s| !s.trim().is_empty())
        {
            let (name, value) = item
                .rsplit_once('=')
                .ok_or_else(|| Error::validation(&field, format!("setting `{item}` is not NAME=value")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::validation(&field, format!("setting `{item}` has a non-numeric value")))?;
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::validation(
                    &field,
                    format!("setting {name}={value} outside [0, 1]"),
                ));
            }
            settings.insert(name.to_string(), value);
        }
        let input_path = base.join(parts[0]);
        let mut input = read_wav(&input_path)?;
        let mut target = read_wav(&base.join(parts[1]))?;
        if input.sample_rate != target.sample_rate {
            return Err(Error::validation(
                field,
                format!("input at {} Hz, target at {} Hz", input.sample_rate, target.sample_rate),
            ));
        }
        match input.len().abs_diff(target.len()) {
            0 => {}
            1 => {
                let len = input.len().min(target.len());
                input.samples.truncate(len);
                target.samples.truncate(len);
            }
            d => {
                return Err(Error::validation(
                    field,
                    format!(
                        "input and target lengths differ by {d} samples ({} vs {})",
                        input.len(),
                        target.len()
                    ),
                ))
            }
        }
        let next = groups.len();
        let clip_id = *groups.entry(input_path).or_insert(next);
        records.push(DatasetRecord {
            input,
            target,
            settings,
            clip_id,
        });
    }
    Ok(records)
}

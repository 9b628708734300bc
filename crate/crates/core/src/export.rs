//! Stage responses across a sweep of one control.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::dsp::{cascade_response, FrequencyGrid};
use crate::error::{Error, Result};
use crate::model::{realize_stage, ModelSpec, ModelState};

pub const RESPONSE_CSV_HEADER: &str = "setting_value,freq_hz,mag_db,phase_rad";

/// `steps` evenly spaced values on [0, 1]; a single step is 0.
pub fn sweep_values(steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Stage response at one value of the swept control.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    /// Includes the stage gain.
    pub mag_db: Vec<f64>,
    pub phase_rad: Vec<f64>,
}

/// Response of stage `stage` for each sweep value of `control`; other
/// controls come from `settings`.
pub fn response_sweep(
    spec: &ModelSpec,
    state: &ModelState,
    stage: usize,
    control: &str,
    values: &[f64],
    settings: &BTreeMap<String, f64>,
    fft_size: usize,
) -> Result<Vec<SweepPoint>> {
    if stage >= spec.stages {
        return Err(Error::validation(
            "stage",
            format!("stage {stage} out of range (model has {} stages)", spec.stages),
        ));
    }
    let site = spec.site_index(stage).map(|i| &spec.sites[i]);
    if !site.is_some_and(|s| s.names.iter().any(|n| n == control)) {
        let names = site.map_or_else(|| "none".to_string(), |s| s.names.join(", "));
        return Err(Error::validation(
            "sweep",
            format!("stage {stage} is not conditioned on `{control}` (its controls: {names})"),
        ));
    }
    let grid = FrequencyGrid::new(fft_size)?;
    values
        .iter()
        .map(|&v| {
            let mut settings = settings.clone();
            settings.insert(control.to_string(), v);
            let c = spec.conditioning_from_settings(&settings)?;
            let realized = realize_stage(spec, state, stage, &c)?;
            let h = cascade_response(&realized.sections, &grid)?.scaled(realized.linear_gain);
            Ok(SweepPoint {
                value: v,
                mag_db: h.magnitude_db(),
                phase_rad: h.phase(),
            })
        })
        .collect()
}

/// CSV with columns `setting_value,freq_hz,mag_db,phase_rad`.
pub fn response_sweep_csv(
    spec: &ModelSpec,
    state: &ModelState,
    stage: usize,
    control: &str,
    values: &[f64],
    settings: &BTreeMap<String, f64>,
    fft_size: usize,
) -> Result<String> {
    let sweep = response_sweep(spec, state, stage, control, values, settings, fft_size)?;
    let freqs = FrequencyGrid::new(fft_size)?.frequencies_hz(spec.sample_rate);
    let mut csv = String::from(RESPONSE_CSV_HEADER);
    csv.push('\n');
    for point in &sweep {
        for ((f, m), p) in freqs.iter().zip(&point.mag_db).zip(&point.phase_rad) {
            writeln!(csv, "{},{f},{m},{p}", point.value).unwrap();
        }
    }
    Ok(csv)
}

//! Python bindings: load, inspect and run trained cascades.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use hcbiquad::data::TeacherSpec;
use hcbiquad::document::{deserialize, load_model, save_model, serialize};
use hcbiquad::dsp::{cascade_response, AudioClip, FrequencyGrid};
use hcbiquad::model::{self, count_params, realize_stage, ModelSpec, ModelState};
use hcbiquad::reps::Representation;
use hcbiquad::Error;

fn to_py(e: Error) -> PyErr {
    if e.is_usage() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// A cascade with its topology and trained parameters.
#[pyclass(module = "pyhcbiquad", frozen)]
struct Model {
    spec: ModelSpec,
    state: ModelState,
}

impl Model {
    fn conditioning(&self, settings: Option<BTreeMap<String, f64>>) -> PyResult<hcbiquad::model::Conditioning> {
        self.spec
            .conditioning_from_settings(&settings.unwrap_or_default())
            .map_err(to_py)
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (spec, state) = load_model(&path).map_err(to_py)?;
        Ok(Model { spec, state })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let (spec, state) = deserialize(text).map_err(to_py)?;
        Ok(Model { spec, state })
    }

    /// The reference teacher used for generated datasets.
    #[staticmethod]
    fn teacher() -> Self {
        let t = TeacherSpec::reference();
        Model {
            spec: t.spec,
            state: t.state,
        }
    }

    /// Freshly initialized MT-2 topology for a representation name.
    #[staticmethod]
    #[pyo3(signature = (representation, seed = 0))]
    fn mt2(representation: &str, seed: u64) -> PyResult<Self> {
        let rep: Representation = representation.parse().map_err(to_py)?;
        let spec = ModelSpec::mt2(rep);
        let state = ModelState::init(&spec, seed);
        Ok(Model { spec, state })
    }

    fn to_json(&self) -> PyResult<String> {
        serialize(&self.spec, &self.state).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&path, &self.spec, &self.state).map_err(to_py)
    }

    fn count_params(&self) -> usize {
        count_params(&self.spec)
    }

    fn control_names(&self) -> Vec<String> {
        self.spec.control_names().into_iter().map(str::to_string).collect()
    }

    #[getter]
    fn sample_rate(&self) -> f64 {
        self.spec.sample_rate
    }

    #[getter]
    fn stages(&self) -> usize {
        self.spec.stages
    }

    #[getter]
    fn representation(&self) -> String {
        self.spec.representation.to_string()
    }

    fn params(&self) -> Vec<f64> {
        self.state.params()
    }

    /// Runs the exact recursive path over `samples`.
    #[pyo3(signature = (samples, settings = None))]
    fn render(&self, py: Python<'_>, samples: Vec<f64>, settings: Option<BTreeMap<String, f64>>) -> PyResult<Vec<f64>> {
        let c = self.conditioning(settings)?;
        let x = AudioClip::new(samples, self.spec.sample_rate).map_err(to_py)?;
        py.detach(|| model::forward_time(&self.spec, &self.state, &x, &c))
            .map(|y| y.samples)
            .map_err(to_py)
    }

    /// Runs the frequency-sampled training path over `samples`.
    #[pyo3(signature = (samples, fft_size, settings = None))]
    fn render_freq(
        &self,
        py: Python<'_>,
        samples: Vec<f64>,
        fft_size: usize,
        settings: Option<BTreeMap<String, f64>>,
    ) -> PyResult<Vec<f64>> {
        let c = self.conditioning(settings)?;
        let x = AudioClip::new(samples, self.spec.sample_rate).map_err(to_py)?;
        py.detach(|| model::forward_freq(&self.spec, &self.state, &x, &c, fft_size))
            .map(|y| y.samples)
            .map_err(to_py)
    }

    /// Stage response including its gain: (freq_hz, mag_db, phase_rad).
    #[pyo3(signature = (stage, settings = None, fft_size = 4096))]
    fn stage_response(
        &self,
        stage: usize,
        settings: Option<BTreeMap<String, f64>>,
        fft_size: usize,
    ) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        if stage >= self.spec.stages {
            return Err(PyValueError::new_err(format!(
                "stage {stage} out of range (model has {} stages)",
                self.spec.stages
            )));
        }
        let c = self.conditioning(settings)?;
        let grid = FrequencyGrid::new(fft_size).map_err(to_py)?;
        let realized = realize_stage(&self.spec, &self.state, stage, &c).map_err(to_py)?;
        let h = cascade_response(&realized.sections, &grid)
            .map_err(to_py)?
            .scaled(realized.linear_gain);
        Ok((grid.frequencies_hz(self.spec.sample_rate), h.magnitude_db(), h.phase()))
    }

    /// Realized stage sections as [b0, b1, b2, a1, a2] rows.
    #[pyo3(signature = (stage, settings = None))]
    fn stage_sections(&self, stage: usize, settings: Option<BTreeMap<String, f64>>) -> PyResult<Vec<[f64; 5]>> {
        let c = self.conditioning(settings)?;
        let realized = realize_stage(&self.spec, &self.state, stage, &c).map_err(to_py)?;
        Ok(realized.sections.iter().map(|s| s.to_array()).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(representation={}, stages={}, biquads={}, params={})",
            self.spec.representation,
            self.spec.stages,
            self.spec.biquads,
            count_params(&self.spec)
        )
    }
}

/// Parameter count of the MT-2 topology for a representation name.
#[pyfunction]
fn mt2_param_count(representation: &str) -> PyResult<usize> {
    let rep: Representation = representation.parse().map_err(to_py)?;
    Ok(count_params(&ModelSpec::mt2(rep)))
}

#[pymodule]
fn pyhcbiquad(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(mt2_param_count, m)?)?;
    Ok(())
}

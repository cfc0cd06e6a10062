//! Python bindings: configuration, the window scorer, the review catalog,
//! bias analytics and an in-memory run over a synthetic world.
//!
//! Structured values cross the boundary as plain dicts and lists with the
//! same field names as the JSON files.

use std::path::PathBuf;

use impactscan::analytics::{bias_report_with_expected, effective_diameter, kl_divergence};
use impactscan::candidates::{read_candidates, write_candidates, TiBins};
use impactscan::catalog::{transition_allowed, CatalogStore, Decision, Measurements, ReviewStatus};
use impactscan::pipeline::{run_in_memory, PipelineConfig};
use impactscan::raster::Patch;
use impactscan::scorer::{apply_calibration, ece, window_features, Label, ModelFile, WindowScorer};
use impactscan::synth::SyntheticWorld;
use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj
        .py()
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn patch(pixels: Vec<f32>, width: usize, height: usize) -> PyResult<Patch> {
    if pixels.len() != width * height {
        return Err(value_err(format!(
            "{} pixels for a {width}x{height} patch",
            pixels.len()
        )));
    }
    Ok(Patch::new(width, height, pixels))
}

fn status(s: &str) -> PyResult<ReviewStatus> {
    s.parse().map_err(value_err)
}

/// Pipeline settings. `PipelineConfig(toml)` parses TOML; omitted keys take
/// their defaults.
#[pyclass(name = "PipelineConfig", from_py_object)]
#[derive(Clone)]
struct PyPipelineConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyPipelineConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => PipelineConfig::from_toml(t).map_err(value_err)?,
            None => PipelineConfig::default(),
        };
        Ok(Self { inner })
    }

    /// Reduced settings for the bundled synthetic world.
    #[staticmethod]
    fn demo() -> Self {
        Self {
            inner: PipelineConfig::demo(),
        }
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(value_err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[setter]
    fn set_k(&mut self, k: usize) {
        self.inner.k = k;
    }

    #[getter]
    fn per_bin(&self) -> usize {
        self.inner.per_bin
    }

    #[setter]
    fn set_per_bin(&mut self, n: usize) {
        self.inner.per_bin = n;
    }

    #[getter]
    fn parallelism(&self) -> usize {
        self.inner.parallelism
    }

    #[setter]
    fn set_parallelism(&mut self, n: usize) {
        self.inner.parallelism = n;
    }

    #[getter]
    fn world_seed(&self) -> u64 {
        self.inner.world.rng_seed
    }

    #[setter]
    fn set_world_seed(&mut self, seed: u64) {
        self.inner.world.rng_seed = seed;
    }

    #[getter]
    fn n_sites(&self) -> usize {
        self.inner.world.n_sites
    }

    #[setter]
    fn set_n_sites(&mut self, n: usize) {
        self.inner.world.n_sites = n;
    }

    #[getter]
    fn bin_edges(&self) -> Vec<f64> {
        self.inner.bin_edges.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "PipelineConfig(k={}, per_bin={}, parallelism={}, n_sites={})",
            self.inner.k, self.inner.per_bin, self.inner.parallelism, self.inner.world.n_sites
        )
    }
}

/// A trained scorer with its calibration, as written by `train`/`calibrate`.
#[pyclass(name = "Model")]
struct PyModel {
    inner: ModelFile,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ModelFile::read(&path).map_err(value_err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(value_err)
    }

    #[getter]
    fn window_size(&self) -> usize {
        self.inner.scorer.window_size()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.scorer.fingerprint()
    }

    /// `(temperature, b_neg, b_pos)`.
    #[getter]
    fn calibration(&self) -> (f64, f64, f64) {
        let c = &self.inner.calibration;
        (c.temperature, c.b_neg, c.b_pos)
    }

    /// Raw logits `(z_neg, z_pos)` of a row-major window.
    fn logits(&self, pixels: Vec<f32>, width: usize, height: usize) -> PyResult<(f64, f64)> {
        let s = self
            .inner
            .scorer
            .score_window(&patch(pixels, width, height)?)
            .map_err(value_err)?;
        let [n, p] = s.logits();
        Ok((n, p))
    }

    /// Calibrated `(p_neg, p_pos)` of a row-major window.
    fn score(&self, pixels: Vec<f32>, width: usize, height: usize) -> PyResult<(f64, f64)> {
        let s = self
            .inner
            .scorer
            .score_window(&patch(pixels, width, height)?)
            .map_err(value_err)?;
        Ok(apply_calibration(&self.inner.calibration, &s))
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }
}

/// Review decisions and the impact catalog stored in a directory.
#[pyclass(name = "Catalog")]
struct PyCatalog {
    inner: CatalogStore,
}

#[pymethods]
impl PyCatalog {
    #[staticmethod]
    fn open(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CatalogStore::open(&dir).map_err(value_err)?,
        })
    }

    /// New store over the candidates in a `candidates.jsonl` file.
    #[staticmethod]
    fn create(dir: PathBuf, candidates: PathBuf, bin_edges: Vec<f64>) -> PyResult<Self> {
        let cands = read_candidates(&candidates).map_err(value_err)?;
        let bins = TiBins::new(bin_edges).map_err(value_err)?;
        Ok(Self {
            inner: CatalogStore::create(&dir, &cands, &bins).map_err(value_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn status(&self, candidate_id: &str) -> PyResult<String> {
        self.inner
            .status(candidate_id)
            .map(|s| s.as_str().to_string())
            .map_err(|e| PyKeyError::new_err(e.to_string()))
    }

    fn statuses(&self) -> Vec<(String, String)> {
        self.inner
            .statuses()
            .into_iter()
            .map(|(id, s)| (id, s.as_str().to_string()))
            .collect()
    }

    /// Records a decision and returns the logged record.
    #[pyo3(signature = (candidate_id, status, reviewer, notes = String::new(), supervisor_override = false))]
    fn decide<'py>(
        &self,
        py: Python<'py>,
        candidate_id: &str,
        status: &str,
        reviewer: &str,
        notes: String,
        supervisor_override: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let d = Decision {
            status: self::status(status)?,
            reviewer: reviewer.to_string(),
            notes,
            supervisor_override,
        };
        let rec = self
            .inner
            .record_decision(candidate_id, d)
            .map_err(value_err)?;
        to_py(py, &rec)
    }

    fn history<'py>(&self, py: Python<'py>, candidate_id: &str) -> PyResult<Bound<'py, PyAny>> {
        let h = self
            .inner
            .history(candidate_id)
            .map_err(|e| PyKeyError::new_err(e.to_string()))?;
        to_py(py, &h)
    }

    /// Adds a confirmed candidate to the catalog. `measurements` holds
    /// `crater_type`, `diameters` and the optional morphology fields.
    fn promote<'py>(
        &self,
        py: Python<'py>,
        candidate_id: &str,
        measurements: &Bound<'py, PyAny>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let m: Measurements = from_py(measurements)?;
        let e = self
            .inner
            .promote_to_catalog(candidate_id, m)
            .map_err(value_err)?;
        to_py(py, &e)
    }

    fn entries<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.entries())
    }

    fn export_tables(&self, properties_csv: PathBuf, images_csv: PathBuf) -> PyResult<()> {
        self.inner
            .export_tables(&properties_csv, &images_csv)
            .map_err(value_err)
    }
}

/// Five intensity features of a row-major window.
#[pyfunction]
fn features(pixels: Vec<f32>, width: usize, height: usize) -> PyResult<Vec<f64>> {
    Ok(window_features(&patch(pixels, width, height)?).to_vec())
}

#[pyfunction(name = "transition_allowed")]
fn py_transition_allowed(from: &str, to: &str) -> PyResult<bool> {
    Ok(transition_allowed(status(from)?, status(to)?))
}

#[pyfunction(name = "kl_divergence")]
fn py_kl_divergence(observed: Vec<f64>, expected: Vec<f64>) -> PyResult<f64> {
    kl_divergence(&observed, &expected).map_err(value_err)
}

#[pyfunction(name = "effective_diameter")]
fn py_effective_diameter(diameters: Vec<f64>) -> PyResult<f64> {
    effective_diameter(&diameters).map_err(value_err)
}

/// Expected calibration error of `p_pos` predictions against 0/1 labels.
#[pyfunction(name = "ece")]
#[pyo3(signature = (p_pos, labels, n_bins = 10))]
fn py_ece(p_pos: Vec<f64>, labels: Vec<bool>, n_bins: usize) -> PyResult<f64> {
    if p_pos.len() != labels.len() {
        return Err(value_err("p_pos and labels differ in length"));
    }
    let preds: Vec<(f64, Label)> = p_pos
        .into_iter()
        .zip(labels)
        .map(|(p, l)| (p, if l { Label::Positive } else { Label::Negative }))
        .collect();
    ece(&preds, n_bins).map_err(value_err)
}

#[pyfunction]
fn bias_report<'py>(
    py: Python<'py>,
    ti_values: Vec<f64>,
    bin_edges: Vec<f64>,
    expected: Vec<f64>,
    label: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let bins = TiBins::new(bin_edges).map_err(value_err)?;
    let r = bias_report_with_expected(&ti_values, &bins, &expected, label).map_err(value_err)?;
    to_py(py, &r)
}

#[pyfunction(name = "read_candidates")]
fn py_read_candidates<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &read_candidates(&path).map_err(value_err)?)
}

/// Generates the configured synthetic world and runs every stage in memory.
/// The GIL is released while it runs. Candidates are also written to
/// `candidates_path` when given.
#[pyfunction]
#[pyo3(signature = (config, candidates_path = None))]
fn run_synthetic<'py>(
    py: Python<'py>,
    config: PyPipelineConfig,
    candidates_path: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.inner;
    let summary = py
        .detach(move || -> Result<serde_json::Value, String> {
            let world = SyntheticWorld::generate(&cfg.world).map_err(|e| e.to_string())?;
            let map = world.basemap().map_err(|e| e.to_string())?;
            let training = world
                .training_windows(cfg.window.size, cfg.max_train_per_class, cfg.seeds.training)
                .map_err(|e| e.to_string())?;
            let run = run_in_memory(&world, &training, &map, &cfg).map_err(|e| e.to_string())?;
            if let Some(p) = &candidates_path {
                write_candidates(p, &run.candidates).map_err(|e| e.to_string())?;
            }
            Ok(serde_json::json!({
                "n_observations": run.scan.grids.len(),
                "windows_scored": run.scan.windows_scored,
                "checksum": run.scan.checksum(),
                "n_candidates": run.candidates.len(),
                "train": run.train,
                "expected": run.bias.expected,
                "top_k": run.bias.top_k,
                "stratified": run.bias.stratified,
            }))
        })
        .map_err(PyValueError::new_err)?;
    to_py(py, &summary)
}

#[pymodule]
fn impactscan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPipelineConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyCatalog>()?;
    m.add_function(wrap_pyfunction!(features, m)?)?;
    m.add_function(wrap_pyfunction!(py_transition_allowed, m)?)?;
    m.add_function(wrap_pyfunction!(py_kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(py_effective_diameter, m)?)?;
    m.add_function(wrap_pyfunction!(py_ece, m)?)?;
    m.add_function(wrap_pyfunction!(bias_report, m)?)?;
    m.add_function(wrap_pyfunction!(py_read_candidates, m)?)?;
    m.add_function(wrap_pyfunction!(run_synthetic, m)?)?;
    Ok(())
}

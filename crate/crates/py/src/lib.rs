//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists with the same field names as the JSON formats.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::de::DeserializeOwned;
use serde::Serialize;

use detagnostic_core::anchors::{self, BoxDims, Distance};
use detagnostic_core::controller::{self, ControllerConfig, EpochReport};
use detagnostic_core::corpus::{self, CorpusRecord};
use detagnostic_core::dataset::{self, BoundingBox, DatasetIndex, RegimeLabel, RegimeThresholds, SizeSource, Split};
use detagnostic_core::eval::{self, ApMode, Detection, EvalConfig};
use detagnostic_core::sidecar;
use detagnostic_core::templates;

create_exception!(detagnostic, DetagnosticError, PyException);

fn err(e: detagnostic_core::Error) -> PyErr {
    DetagnosticError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn parse_arg<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

/// Raw bytes or text.
fn raw_bytes(obj: &Bound<'_, PyAny>) -> PyResult<Vec<u8>> {
    if let Ok(b) = obj.cast::<PyBytes>() {
        return Ok(b.as_bytes().to_vec());
    }
    Ok(obj.extract::<String>()?.into_bytes())
}

/// A validated COCO annotation index.
#[pyclass(name = "Dataset", module = "detagnostic", frozen)]
struct PyDataset {
    inner: DatasetIndex,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn name(&self) -> &str {
        self.inner.name()
    }

    #[getter]
    fn num_images(&self) -> usize {
        self.inner.images().len()
    }

    #[getter]
    fn num_annotations(&self) -> usize {
        self.inner.annotations().len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.categories().len()
    }

    #[pyo3(signature = (size_source = "train"))]
    fn stats<'py>(&self, py: Python<'py>, size_source: &str) -> PyResult<Bound<'py, PyAny>> {
        let source = match size_source {
            "train" => SizeSource::Train,
            "all" => SizeSource::All,
            other => return Err(PyValueError::new_err(format!("size_source must be train or all, got {other}"))),
        };
        to_py(py, &dataset::compute_stats_with(&self.inner, source))
    }

    /// Merges another split of the same dataset.
    fn merge(&self, other: &PyDataset) -> PyResult<PyDataset> {
        let inner = self.inner.clone().merge(other.inner.clone()).map_err(err)?;
        Ok(PyDataset { inner })
    }

    fn to_coco<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.to_coco_json())
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name={:?}, images={}, annotations={}, classes={})",
            self.inner.name(),
            self.inner.images().len(),
            self.inner.annotations().len(),
            self.inner.categories().len()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (raw, split = "train"))]
fn parse_coco(raw: &Bound<'_, PyAny>, split: &str) -> PyResult<PyDataset> {
    let inner = dataset::parse_coco(&raw_bytes(raw)?, parse_arg(split)?).map_err(err)?;
    Ok(PyDataset { inner })
}

#[pyfunction]
#[pyo3(signature = (path, split = "train"))]
fn load_coco(path: std::path::PathBuf, split: &str) -> PyResult<PyDataset> {
    Ok(PyDataset { inner: dataset::load_coco(path, parse_arg(split)?).map_err(err)? })
}

#[pyfunction]
fn load_dataset_dir(path: std::path::PathBuf) -> PyResult<PyDataset> {
    Ok(PyDataset { inner: dataset::load_dataset_dir(path).map_err(err)? })
}

#[pyfunction]
#[pyo3(signature = (stats, thresholds = None))]
fn classify_regime<'py>(
    py: Python<'py>,
    stats: &Bound<'py, PyAny>,
    thresholds: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let stats: dataset::DatasetStats = from_py(stats)?;
    let thresholds: RegimeThresholds = thresholds.map(from_py).transpose()?.unwrap_or_default();
    to_py(py, &dataset::classify_regime(&stats, &thresholds))
}

/// IoU of two `[x, y, w, h]` boxes.
#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    eval::iou(&BoundingBox::from(a), &BoundingBox::from(b))
}

/// AP@[0.5:0.95] of COCO-style detection dicts against `dataset`.
#[pyfunction]
#[pyo3(signature = (detections, dataset, split = "val", mode = "coco101"))]
fn coco_map<'py>(
    py: Python<'py>,
    detections: &Bound<'py, PyAny>,
    dataset: &PyDataset,
    split: &str,
    mode: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let dets: Vec<Detection> = from_py(detections)?;
    let config = EvalConfig { mode: parse_arg::<ApMode>(mode)?, ..EvalConfig::default() };
    let split: Split = parse_arg(split)?;
    let result = py.detach(|| eval::coco_map_with(&dets, &dataset.inner, split, &config)).map_err(err)?;
    to_py(py, &result)
}

/// Corpus means in percent. `ap_pct` maps dataset to AP in percent,
/// `regimes` maps dataset to a regime label dict.
#[pyfunction]
fn aggregate<'py>(py: Python<'py>, ap_pct: &Bound<'py, PyAny>, regimes: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let ap_pct: std::collections::BTreeMap<String, f64> = from_py(ap_pct)?;
    let regime: std::collections::BTreeMap<String, RegimeLabel> = from_py(regimes)?;
    let aps = ap_pct.into_iter().map(|(k, v)| (k, v / 100.0)).collect();
    let record = CorpusRecord::new("model", aps, regime).map_err(err)?;
    let [avg, small, objects, large] = corpus::aggregate(&record).map_err(err)?.as_percent();
    to_py(
        py,
        &serde_json::json!({
            "avg_ap": avg,
            "avg_ap_small_datasets": small,
            "avg_ap_small_objects": objects,
            "avg_ap_large_datasets": large,
        }),
    )
}

/// K-means anchors from `(w, h)` pairs.
#[pyfunction]
#[pyo3(signature = (dims, k, distance = "euclidean", seed = 42, heads = None))]
fn kmeans<'py>(
    py: Python<'py>,
    dims: Vec<(f64, f64)>,
    k: usize,
    distance: &str,
    seed: u64,
    heads: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let dims: Vec<BoxDims> = dims.into_iter().map(|(w, h)| BoxDims::new(w, h)).collect();
    let distance: Distance = parse_arg(distance)?;
    let mut set = py.detach(|| anchors::kmeans_cluster(&dims, k, distance, seed)).map_err(err)?;
    if let Some(h) = heads {
        set = anchors::assign_to_heads(&set, h).map_err(err)?;
    }
    to_py(py, &set)
}

fn resolve_config(template: Option<&str>, overrides: Option<&Bound<'_, PyAny>>) -> PyResult<ControllerConfig> {
    let base = match template {
        Some(name) => templates::lookup(name).map_err(err)?.scheduler_defaults,
        None => ControllerConfig::default(),
    };
    let Some(overrides) = overrides else {
        return Ok(base);
    };
    let over: serde_json::Map<String, serde_json::Value> = from_py(overrides)?;
    let mut merged = serde_json::to_value(&base).expect("config serializes");
    merged.as_object_mut().expect("config is an object").extend(over);
    serde_json::from_value(merged).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Plateau / early-stop controller with iteration patience.
#[pyclass(name = "Controller", module = "detagnostic")]
struct PyController {
    inner: controller::Controller,
}

#[pymethods]
impl PyController {
    /// `config` overrides individual fields of the template's defaults (or
    /// the global defaults without a template).
    #[new]
    #[pyo3(signature = (config = None, template = None))]
    fn new(config: Option<&Bound<'_, PyAny>>, template: Option<&str>) -> PyResult<Self> {
        let cfg = resolve_config(template, config)?;
        Ok(PyController { inner: controller::Controller::new(cfg).map_err(err)? })
    }

    /// Feeds one finished epoch; returns the decision dict.
    fn observe<'py>(
        &mut self,
        py: Python<'py>,
        epoch: u64,
        iterations: u64,
        val_metric: f64,
        lr: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let report = EpochReport { epoch, iterations_in_epoch: iterations, val_metric, current_lr: lr };
        let d = self.inner.observe(&report).map_err(err)?;
        to_py(py, &d)
    }

    #[getter]
    fn stopped(&self) -> bool {
        self.inner.is_stopped()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.config())
    }

    #[getter]
    fn state<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.state())
    }

    fn snapshot(&self) -> String {
        self.inner.snapshot()
    }

    #[staticmethod]
    fn restore(snapshot: &Bound<'_, PyAny>) -> PyResult<Self> {
        let inner = controller::Controller::restore(&raw_bytes(snapshot)?).map_err(err)?;
        Ok(PyController { inner })
    }
}

/// One sidecar protocol session driven line by line.
#[pyclass(name = "Session", module = "detagnostic")]
struct PySession {
    inner: sidecar::Session,
}

#[pymethods]
impl PySession {
    #[new]
    #[pyo3(signature = (session_id = "session"))]
    fn new(session_id: &str) -> Self {
        PySession { inner: sidecar::Session::new(session_id) }
    }

    fn handle_line(&mut self, line: &str) -> String {
        self.inner.handle_line(line)
    }

    #[getter]
    fn closed(&self) -> bool {
        self.inner.is_closed()
    }
}

#[pyfunction]
fn builtin_templates(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &templates::builtin_templates())
}

#[pyfunction]
fn lookup_template<'py>(py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &templates::lookup(name).map_err(err)?)
}

/// Training plan dict for `template` on `dataset`.
#[pyfunction]
fn instantiate<'py>(py: Python<'py>, template: &str, dataset: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
    let t = templates::lookup(template).map_err(err)?;
    let plan = py.detach(|| templates::instantiate(&t, &dataset.inner)).map_err(err)?;
    to_py(py, &plan)
}

#[pymodule]
fn detagnostic(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("DetagnosticError", m.py().get_type::<DetagnosticError>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyController>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(parse_coco, m)?)?;
    m.add_function(wrap_pyfunction!(load_coco, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset_dir, m)?)?;
    m.add_function(wrap_pyfunction!(classify_regime, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(coco_map, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_templates, m)?)?;
    m.add_function(wrap_pyfunction!(lookup_template, m)?)?;
    m.add_function(wrap_pyfunction!(instantiate, m)?)?;
    Ok(())
}

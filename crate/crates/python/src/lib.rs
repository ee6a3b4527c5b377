//! Python bindings: tensors, label maps, class statistics, the segmentation
//! model, losses, augmentation primitives, the synthetic benchmark and the
//! training harness.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use constyx::dfa::{self, AugConfig, MaskMode};
use constyx::harness::{self, RunConfig};
use constyx::model::{CheckpointMeta, ModelConfig, SegModel};
use constyx::rng::StreamKey;
use constyx::stats::{self, StatsBank};
use constyx::{afu, losses, metrics, synth, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn py_to_json(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    let text: String = py
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Dense float64 tensor (row-major).
#[pyclass(name = "Tensor", module = "constyx_py", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: constyx::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        constyx::Tensor::new(shape, data)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self {
            inner: constyx::Tensor::zeros(&shape),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn numel(&self) -> usize {
        self.inner.numel()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        constyx::Tensor::from_bytes(data)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        constyx::Tensor::load(path)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    fn max_abs_diff(&self, other: PyRef<'_, PyTensor>) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Per-pixel class labels.
#[pyclass(name = "LabelMap", module = "constyx_py", skip_from_py_object)]
#[derive(Clone)]
struct PyLabelMap {
    inner: constyx::LabelMap,
}

#[pymethods]
impl PyLabelMap {
    #[new]
    fn new(height: usize, width: usize, labels: Vec<usize>) -> PyResult<Self> {
        constyx::LabelMap::new(height, width, labels)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn tolist(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("LabelMap({}x{})", self.inner.height(), self.inner.width())
    }
}

/// Streaming per-class feature mean and covariance.
#[pyclass(name = "StatsBank", module = "constyx_py", skip_from_py_object)]
struct PyStatsBank {
    inner: StatsBank,
}

#[pymethods]
impl PyStatsBank {
    #[new]
    fn new(num_classes: usize, dim: usize) -> Self {
        Self {
            inner: StatsBank::new(num_classes, dim),
        }
    }

    fn ingest(
        &mut self,
        features: PyRef<'_, PyTensor>,
        labels: PyRef<'_, PyLabelMap>,
    ) -> PyResult<()> {
        self.inner
            .ingest_feature_map(&features.inner, &labels.inner)
            .map_err(to_py)
    }

    fn count(&self, class_id: usize) -> PyResult<u64> {
        self.check(class_id)?;
        Ok(self.inner.class(class_id).count())
    }

    fn mean(&self, class_id: usize) -> PyResult<Vec<f64>> {
        self.check(class_id)?;
        Ok(self.inner.class(class_id).mean().to_vec())
    }

    /// Row-major `dim x dim` covariance.
    fn cov(&self, class_id: usize) -> PyResult<Vec<f64>> {
        self.check(class_id)?;
        Ok(self.inner.class(class_id).cov().to_vec())
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(dir).map_err(to_py)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        StatsBank::load(dir)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }
}

impl PyStatsBank {
    fn check(&self, class_id: usize) -> PyResult<()> {
        if class_id >= self.inner.num_classes() {
            return Err(PyValueError::new_err(format!(
                "class {class_id} out of range for {} classes",
                self.inner.num_classes()
            )));
        }
        Ok(())
    }
}

/// Encoder/head segmentation network.
#[pyclass(name = "SegModel", module = "constyx_py", skip_from_py_object)]
struct PySegModel {
    inner: SegModel,
}

#[pymethods]
impl PySegModel {
    #[new]
    #[pyo3(signature = (feature_channels = 16, num_classes = 3, encoder_depth = 3, in_channels = 3, seed = 0))]
    fn new(
        feature_channels: usize,
        num_classes: usize,
        encoder_depth: usize,
        in_channels: usize,
        seed: u64,
    ) -> PyResult<Self> {
        SegModel::new(ModelConfig {
            in_channels,
            feature_channels,
            num_classes,
            encoder_depth,
            seed,
        })
        .map(|inner| Self { inner })
        .map_err(to_py)
    }

    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    fn parameter_hash(&self) -> String {
        self.inner.parameter_hash()
    }

    fn forward_encoder(&self, image: PyRef<'_, PyTensor>) -> PyResult<PyTensor> {
        self.inner
            .forward_encoder(&image.inner)
            .map(|inner| PyTensor { inner })
            .map_err(to_py)
    }

    fn forward_head(&self, features: PyRef<'_, PyTensor>) -> PyResult<PyTensor> {
        self.inner
            .forward_head(&features.inner)
            .map(|inner| PyTensor { inner })
            .map_err(to_py)
    }

    fn predict(&self, image: PyRef<'_, PyTensor>) -> PyResult<PyTensor> {
        self.inner
            .predict(&image.inner)
            .map(|inner| PyTensor { inner })
            .map_err(to_py)
    }

    /// Loss gradient with respect to the encoder features, parameters fixed.
    fn feature_gradient(
        &self,
        features: PyRef<'_, PyTensor>,
        labels: PyRef<'_, PyLabelMap>,
    ) -> PyResult<PyTensor> {
        dfa::feature_gradient(
            &self.inner,
            &features.inner,
            &labels.inner,
            losses::LossKind::CeDice,
        )
        .map(|inner| PyTensor { inner })
        .map_err(to_py)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner
            .save(dir, &CheckpointMeta::default(), false)
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        SegModel::load(dir)
            .map(|(inner, _)| Self { inner })
            .map_err(to_py)
    }
}

#[pyfunction]
fn seg_loss(probs: PyRef<'_, PyTensor>, labels: PyRef<'_, PyLabelMap>) -> PyResult<f64> {
    losses::seg_loss(&probs.inner, &labels.inner).map_err(to_py)
}

#[pyfunction]
fn weighted_seg_loss(
    probs: PyRef<'_, PyTensor>,
    labels: PyRef<'_, PyLabelMap>,
    weights: PyRef<'_, PyTensor>,
) -> PyResult<f64> {
    afu::weighted_seg_loss(&probs.inner, &labels.inner, &weights.inner).map_err(to_py)
}

/// AFU weight: 1 above the similarity threshold, `e^F − 1` otherwise.
#[pyfunction]
#[pyo3(signature = (similarity, confidence, tau = 0.6))]
fn afu_weight(similarity: f64, confidence: f64, tau: f64) -> f64 {
    afu::weight(similarity, confidence, tau)
}

#[pyfunction]
fn cosine_similarity_map(
    original: PyRef<'_, PyTensor>,
    augmented: PyRef<'_, PyTensor>,
) -> PyResult<PyTensor> {
    afu::cosine_similarity_map(&original.inner, &augmented.inner)
        .map(|inner| PyTensor { inner })
        .map_err(to_py)
}

#[pyfunction]
fn confidence_map(probs: PyRef<'_, PyTensor>) -> PyResult<PyTensor> {
    afu::confidence_map(&probs.inner)
        .map(|inner| PyTensor { inner })
        .map_err(to_py)
}

fn mask_mode(name: &str) -> PyResult<MaskMode> {
    match name {
        "min_k" => Ok(MaskMode::MinK),
        "max_k" => Ok(MaskMode::MaxK),
        "random_k" => Ok(MaskMode::RandomK),
        other => Err(PyValueError::new_err(format!(
            "unknown mask mode '{other}'"
        ))),
    }
}

/// Indices (ascending) of the `k` channels picked from one pixel's gradient.
#[pyfunction]
#[pyo3(signature = (values, k, mode = "min_k", seed = 0))]
fn select_channels(values: Vec<f64>, k: usize, mode: &str, seed: u64) -> PyResult<Vec<usize>> {
    if k > values.len() {
        return Err(PyValueError::new_err("k exceeds the number of values"));
    }
    Ok(dfa::select_channels(
        &values,
        k,
        mask_mode(mode)?,
        &mut StreamKey::new(seed).rng(),
    ))
}

/// `ẑ = z + α_ic + α_cd` for one feature map. `aug` is a dict of augmentation
/// settings overriding the defaults.
#[pyfunction]
#[pyo3(signature = (features, labels, bank, grad, seed = 0, aug = None))]
fn augment_features(
    py: Python<'_>,
    features: PyRef<'_, PyTensor>,
    labels: PyRef<'_, PyLabelMap>,
    bank: PyRef<'_, PyStatsBank>,
    grad: PyRef<'_, PyTensor>,
    seed: u64,
    aug: Option<Bound<'_, PyAny>>,
) -> PyResult<PyTensor> {
    let mut cfg = AugConfig::default();
    if let Some(obj) = aug {
        let mut base =
            serde_json::to_value(&cfg).map_err(|e| PyValueError::new_err(e.to_string()))?;
        if let (Some(b), serde_json::Value::Object(o)) =
            (base.as_object_mut(), py_to_json(py, &obj)?)
        {
            for (k, v) in o {
                if !b.contains_key(&k) {
                    return Err(PyValueError::new_err(format!(
                        "unknown augmentation key '{k}'"
                    )));
                }
                b.insert(k, v);
            }
        }
        cfg = serde_json::from_value(base).map_err(|e| PyValueError::new_err(e.to_string()))?;
    }
    dfa::augment_features(
        &features.inner,
        &labels.inner,
        &bank.inner,
        &grad.inner,
        &cfg,
        StreamKey::new(seed),
    )
    .map(|inner| PyTensor { inner })
    .map_err(to_py)
}

/// Population `(count, mean, cov)` of a list of equal-length vectors.
#[pyfunction]
fn batch_moments(rows: Vec<Vec<f64>>) -> PyResult<(u64, Vec<f64>, Vec<f64>)> {
    let m = stats::batch_moments(&rows).map_err(to_py)?;
    Ok((m.count, m.mean, m.cov))
}

#[pyfunction]
fn dice_score(
    pred: PyRef<'_, PyLabelMap>,
    labels: PyRef<'_, PyLabelMap>,
    class_id: usize,
) -> PyResult<f64> {
    metrics::dice_score(&pred.inner, &labels.inner, class_id).map_err(to_py)
}

#[pyfunction]
fn argmax_labels(probs: PyRef<'_, PyTensor>) -> PyResult<PyLabelMap> {
    metrics::argmax_labels(&probs.inner)
        .map(|inner| PyLabelMap { inner })
        .map_err(to_py)
}

#[pyfunction]
fn default_domains(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    json_to_py(py, &synth::default_domains())
}

/// `(image, labels)` for built-in domain `domain` and a sample seed.
#[pyfunction]
#[pyo3(signature = (domain, seed, size = 64))]
fn generate_sample(domain: usize, seed: u64, size: usize) -> PyResult<(PyTensor, PyLabelMap)> {
    let specs = synth::default_domains();
    let spec = specs
        .get(domain)
        .ok_or_else(|| PyValueError::new_err(format!("no built-in domain {domain}")))?;
    let rec = synth::generate_sample(spec, seed, size).map_err(to_py)?;
    Ok((
        PyTensor { inner: rec.image },
        PyLabelMap { inner: rec.label },
    ))
}

/// Writes the benchmark built from the first `domains` built-in domains.
#[pyfunction]
#[pyo3(signature = (out, domains = 5, per_domain = 80, size = 64, seed = 0))]
fn generate_benchmark(
    py: Python<'_>,
    out: PathBuf,
    domains: usize,
    per_domain: usize,
    size: usize,
    seed: u64,
) -> PyResult<Bound<'_, PyAny>> {
    let specs = synth::default_domains();
    let n = domains.min(specs.len());
    let manifest = py
        .detach(|| synth::generate_benchmark(&specs[..n], per_domain, size, seed, &out))
        .map_err(to_py)?;
    json_to_py(py, &manifest)
}

#[pyfunction]
#[pyo3(signature = (a, b, n = 50, seed = 0, size = 64))]
fn style_gap(a: usize, b: usize, n: usize, seed: u64, size: usize) -> PyResult<f64> {
    let specs = synth::default_domains();
    let get = |i: usize| {
        specs
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("no built-in domain {i}")))
    };
    synth::style_gap(get(a)?, get(b)?, n, seed, size).map_err(to_py)
}

/// Trains with a config dict (RunConfig field names; unspecified fields use
/// defaults) and returns the run log as a dict.
#[pyfunction]
#[pyo3(signature = (config, resume = false))]
fn train<'py>(
    py: Python<'py>,
    config: Bound<'py, PyAny>,
    resume: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = RunConfig::default();
    cfg.apply_json(&py_to_json(py, &config)?).map_err(to_py)?;
    let outcome = py
        .detach(|| harness::run_training(&cfg, resume))
        .map_err(to_py)?;
    json_to_py(py, &outcome.log)
}

#[pyfunction]
fn evaluate_checkpoint(
    py: Python<'_>,
    checkpoint: PathBuf,
    data: PathBuf,
) -> PyResult<Bound<'_, PyAny>> {
    let result = py
        .detach(|| harness::evaluate_checkpoint(&checkpoint, &data))
        .map_err(to_py)?;
    json_to_py(py, &result)
}

#[pymodule]
fn constyx_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyLabelMap>()?;
    m.add_class::<PyStatsBank>()?;
    m.add_class::<PySegModel>()?;
    m.add_function(wrap_pyfunction!(seg_loss, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_seg_loss, m)?)?;
    m.add_function(wrap_pyfunction!(afu_weight, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity_map, m)?)?;
    m.add_function(wrap_pyfunction!(confidence_map, m)?)?;
    m.add_function(wrap_pyfunction!(select_channels, m)?)?;
    m.add_function(wrap_pyfunction!(augment_features, m)?)?;
    m.add_function(wrap_pyfunction!(batch_moments, m)?)?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(argmax_labels, m)?)?;
    m.add_function(wrap_pyfunction!(default_domains, m)?)?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(generate_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(style_gap, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    Ok(())
}

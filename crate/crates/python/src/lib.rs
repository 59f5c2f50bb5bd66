//! Python bindings. Samples and tensors cross the boundary as nested lists
//! or as a flat value list plus a shape.

use eloss_core::analysis;
use eloss_core::checkpoint::Checkpoint;
use eloss_core::eloss as el;
use eloss_core::entropy::{self, EntropyConfig, EntropyEstimate as CoreEstimate};
use eloss_core::experiment::{self, ExperimentConfig};
use eloss_core::net::{profile_from_taps, ModelConfig, RepeatedBlockNet};
use eloss_core::samples::SampleMatrix;
use eloss_core::special;
use eloss_core::tensor::Tensor;
use eloss_core::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Domain(_) | Error::DegenerateGradient { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn samples_from(rows: Vec<Vec<f64>>) -> PyResult<SampleMatrix> {
    SampleMatrix::from_rows(&rows).map_err(py_err)
}

fn entropy_config(epsilon: Option<f64>) -> PyResult<EntropyConfig> {
    match epsilon {
        Some(e) => EntropyConfig::new(e).map_err(py_err),
        None => Ok(EntropyConfig::default()),
    }
}

#[pyclass(name = "EntropyEstimate", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyEntropyEstimate {
    value: f64,
    k: usize,
    n: usize,
    d: usize,
    clamped_count: usize,
}

#[pymethods]
impl PyEntropyEstimate {
    fn __repr__(&self) -> String {
        format!(
            "EntropyEstimate(value={}, k={}, n={}, d={}, clamped_count={})",
            self.value, self.k, self.n, self.d, self.clamped_count
        )
    }
}

impl From<CoreEstimate> for PyEntropyEstimate {
    fn from(e: CoreEstimate) -> Self {
        Self { value: e.value, k: e.k, n: e.n, d: e.d, clamped_count: e.clamped_count }
    }
}

#[pyclass(name = "ElossValue", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyElossValue {
    tap_names: Vec<String>,
    taps: Vec<f64>,
    deltas: Vec<f64>,
    l1: f64,
    l2: f64,
    combined: f64,
    lambda1: f64,
    lambda2: f64,
    mean_delta: f64,
}

#[pymethods]
impl PyElossValue {
    fn __repr__(&self) -> String {
        format!("ElossValue(l1={}, l2={}, combined={})", self.l1, self.l2, self.combined)
    }
}

fn eloss_of(profile: &el::EntropyProfile, lambda1: f64, lambda2: f64) -> PyResult<PyElossValue> {
    let v = el::eloss(profile, lambda1, lambda2).map_err(py_err)?;
    Ok(PyElossValue {
        tap_names: profile.tap_names.clone(),
        taps: profile.taps.clone(),
        deltas: profile.deltas.clone(),
        l1: v.l1,
        l2: v.l2,
        combined: v.combined,
        lambda1: v.lambda1,
        lambda2: v.lambda2,
        mean_delta: v.mean_delta,
    })
}

#[pyfunction]
fn digamma(x: f64) -> PyResult<f64> {
    special::digamma(x).map_err(py_err)
}

#[pyfunction]
fn log_unit_ball_volume(d: usize) -> PyResult<f64> {
    special::log_unit_ball_volume(d).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (samples, k=1, epsilon=None))]
fn entropy_kl(samples: Vec<Vec<f64>>, k: usize, epsilon: Option<f64>) -> PyResult<PyEntropyEstimate> {
    let cfg = entropy_config(epsilon)?;
    Ok(entropy::entropy_kl(&samples_from(samples)?, k, &cfg).map_err(py_err)?.into())
}

#[pyfunction]
#[pyo3(signature = (samples, epsilon=None))]
fn entropy_first(samples: Vec<Vec<f64>>, epsilon: Option<f64>) -> PyResult<PyEntropyEstimate> {
    let cfg = entropy_config(epsilon)?;
    Ok(entropy::entropy_first(&samples_from(samples)?, &cfg).map_err(py_err)?.into())
}

/// Gradient of the k-NN estimate with respect to every sample, as rows.
#[pyfunction]
#[pyo3(signature = (samples, k=1, epsilon=None))]
fn entropy_gradient(samples: Vec<Vec<f64>>, k: usize, epsilon: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
    let cfg = entropy_config(epsilon)?;
    let m = samples_from(samples)?;
    let g = entropy::entropy_gradient(&m, k, &cfg).map_err(py_err)?;
    Ok(g.chunks(m.d()).map(<[f64]>::to_vec).collect())
}

#[pyfunction]
#[pyo3(name = "eloss", signature = (entropies, lambda1=1.0, lambda2=0.1, names=None))]
fn eloss_from_entropies(
    entropies: Vec<f64>,
    lambda1: f64,
    lambda2: f64,
    names: Option<Vec<String>>,
) -> PyResult<PyElossValue> {
    let names = names.unwrap_or_default();
    let profile = el::build_profile(&entropies, &names).map_err(py_err)?;
    eloss_of(&profile, lambda1, lambda2)
}

fn curve(values: Vec<f64>) -> PyResult<analysis::Curve> {
    analysis::Curve::from_values(&values).map_err(py_err)
}

#[pyfunction]
fn mavp_literal(values: Vec<f64>) -> PyResult<f64> {
    analysis::mavp_literal(&curve(values)?).map_err(py_err)
}

#[pyfunction]
fn mavp_abs(values: Vec<f64>) -> PyResult<f64> {
    analysis::mavp_abs(&curve(values)?).map_err(py_err)
}

#[pyfunction]
fn max_metric(values: Vec<f64>) -> PyResult<f64> {
    analysis::max_metric(&curve(values)?).map_err(py_err)
}

#[pyfunction]
fn percent_change(clean_mean: f64, noisy_mean: f64) -> PyResult<f64> {
    analysis::percent_change(clean_mean, noisy_mean).map_err(py_err)
}

#[pyclass(name = "Network")]
struct PyNetwork {
    net: RepeatedBlockNet,
}

fn tensor(values: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, values).map_err(py_err)
}

#[pymethods]
impl PyNetwork {
    /// `kind` is `"mlp"` (32 features) or `"conv"` (4×16×16 maps); both
    /// have 4 classes.
    #[new]
    #[pyo3(signature = (kind="conv", seed=0))]
    fn new(kind: &str, seed: u64) -> PyResult<Self> {
        let model = match kind {
            "mlp" => ModelConfig::mlp(32, 4),
            "conv" => ModelConfig::conv(4, 16, 16, 4),
            other => return Err(PyValueError::new_err(format!("unknown model kind {other:?}"))),
        };
        Ok(Self { net: RepeatedBlockNet::from_config(&model, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::load(path).map_err(py_err)?;
        Ok(Self { net: ckpt.to_net().map_err(py_err)? })
    }

    #[pyo3(signature = (path, epoch=0))]
    fn save(&self, path: &str, epoch: usize) -> PyResult<()> {
        Checkpoint::from_net(&self.net, epoch).and_then(|c| c.save(path)).map_err(py_err)
    }

    #[getter]
    fn block_count(&self) -> usize {
        self.net.block_count()
    }

    /// Returns `(logits, logits_shape, taps)` where each tap is
    /// `(name, values, shape)`.
    #[pyo3(signature = (values, shape, coverage=None))]
    #[allow(clippy::type_complexity)]
    fn forward(
        &self,
        values: Vec<f64>,
        shape: Vec<usize>,
        coverage: Option<usize>,
    ) -> PyResult<(Vec<f64>, Vec<usize>, Vec<(String, Vec<f64>, Vec<usize>)>)> {
        let x = tensor(values, shape)?;
        let cov = coverage.unwrap_or(self.net.block_count());
        let (out, taps) = self.net.forward_with_coverage(&x, cov).map_err(py_err)?;
        let taps = taps.into_iter().map(|t| (t.name, t.captured.values, t.captured.shape)).collect();
        Ok((out.values, out.shape, taps))
    }

    /// Batch-averaged entropy profile over every block and its Eloss values.
    #[pyo3(signature = (values, shape, k=1, lambda1=1.0, lambda2=0.1))]
    fn eloss(
        &self,
        values: Vec<f64>,
        shape: Vec<usize>,
        k: usize,
        lambda1: f64,
        lambda2: f64,
    ) -> PyResult<PyElossValue> {
        let x = tensor(values, shape)?;
        let (_, taps) = self.net.forward_with_coverage(&x, self.net.block_count()).map_err(py_err)?;
        let profile = profile_from_taps(&taps, k, &EntropyConfig::default()).map_err(py_err)?;
        eloss_of(&profile, lambda1, lambda2)
    }

    fn confidence(&self, values: Vec<f64>, shape: Vec<usize>) -> PyResult<f64> {
        analysis::confidence(&self.net, &tensor(values, shape)?).map_err(py_err)
    }
}

/// Runs an experiment from its JSON document. When `out_dir` is given the
/// run directory is written beneath it. Returns a summary dict.
#[pyfunction]
#[pyo3(signature = (config_json, seed=None, out_dir=None))]
fn train<'py>(
    py: Python<'py>,
    config_json: &str,
    seed: Option<u64>,
    out_dir: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let config = ExperimentConfig::from_json(config_json)
        .and_then(|c| c.materialize(seed, None))
        .map_err(py_err)?;
    let out = py.detach(|| experiment::run(&config)).map_err(py_err)?;
    let run_name = config.run_name().map_err(py_err)?;
    if let Some(dir) = out_dir {
        let path = std::path::Path::new(dir).join(&run_name);
        experiment::write_run_dir(&path, &config, &out).map_err(py_err)?;
    }
    let d = PyDict::new(py);
    d.set_item("run_name", run_name)?;
    d.set_item("diverged", out.log.is_diverged())?;
    let curve: Vec<f64> = out.log.epochs().map(|r| r.validation_metric).collect();
    let losses: Vec<f64> = out.log.epochs().map(|r| r.task_loss).collect();
    let l1: Vec<Option<f64>> = out.log.epochs().map(|r| r.eloss_l1).collect();
    d.set_item("validation_metric", curve)?;
    d.set_item("task_loss", losses)?;
    d.set_item("eloss_l1", l1)?;
    d.set_item("runlog", out.log.to_jsonl().map_err(py_err)?)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "eloss")]
pub fn eloss_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEntropyEstimate>()?;
    m.add_class::<PyElossValue>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(digamma, m)?)?;
    m.add_function(wrap_pyfunction!(log_unit_ball_volume, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_kl, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_first, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(eloss_from_entropies, m)?)?;
    m.add_function(wrap_pyfunction!(mavp_literal, m)?)?;
    m.add_function(wrap_pyfunction!(mavp_abs, m)?)?;
    m.add_function(wrap_pyfunction!(max_metric, m)?)?;
    m.add_function(wrap_pyfunction!(percent_change, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}

//! Python bindings: tensors, configs, models, metrics, losses, the learning
//! rate schedule, degradations and checkpoints.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use symunet_core::checkpoint::{load_model, save_checkpoint, Checkpoint};
use symunet_core::config::ModelConfig;
use symunet_core::data::{self, DegradationSpec};
use symunet_core::model::{self, build_any};
use symunet_core::{loss, metrics, optim, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Dense float32 tensor.
#[pyclass(name = "Tensor", module = "symunet", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: symunet_core::Tensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: symunet_core::Tensor::new(shape, data).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self { inner: symunet_core::Tensor::zeros(shape) }
    }

    #[staticmethod]
    fn full(shape: Vec<usize>, value: f32) -> Self {
        Self { inner: symunet_core::Tensor::full(shape, value) }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn numel(&self) -> usize {
        self.inner.numel()
    }

    fn save_symt(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_symt(path).map_err(py_err)
    }

    #[staticmethod]
    fn load_symt(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: symunet_core::Tensor::load_symt(path).map_err(py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Architecture hyperparameters.
#[pyclass(name = "ModelConfig", module = "symunet", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    /// Default configuration, optionally updated from `key=value` strings.
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<HashMap<String, String>>) -> PyResult<Self> {
        let mut c = Self { inner: ModelConfig::default() };
        for (k, v) in overrides.unwrap_or_default() {
            c.set(&k, &v)?;
        }
        Ok(c)
    }

    #[staticmethod]
    fn tiny() -> Self {
        Self { inner: ModelConfig::tiny() }
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ModelConfig::from_kv_text(text).map_err(py_err)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        if self.inner.apply(key, value).map_err(py_err)? {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!("unknown config key '{key}'")))
        }
    }

    fn to_dict(&self) -> HashMap<String, String> {
        self.inner
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    fn to_text(&self) -> String {
        self.inner.to_kv_text()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn required_multiple(&self) -> usize {
        self.inner.required_multiple()
    }
}

/// A built network with its parameters.
#[pyclass(name = "Model", module = "symunet")]
pub struct PyModel {
    inner: model::Model<f32>,
}

#[pymethods]
impl PyModel {
    /// Builds the variant selected by `config` (`symmetric=false` gives the
    /// asymmetric baseline).
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: build_any(&config.inner, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_model(&path).map_err(py_err)? })
    }

    /// Writes a checkpoint with fresh optimizer state.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &Checkpoint::fresh(self.inner.clone(), self.inner.seed())).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig { inner: self.inner.config().clone() }
    }

    fn count_parameters(&self) -> usize {
        model::count_parameters(&self.inner)
    }

    fn estimate_flops(&self, height: usize, width: usize) -> PyResult<u64> {
        model::estimate_flops(&self.inner, height, width).map_err(py_err)
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.store().iter().map(|(_, n, _)| n.to_string()).collect()
    }

    /// Restores a `(3, H, W)` image; any size is padded and cropped back.
    fn forward(&self, y: &PyTensor) -> PyResult<PyTensor> {
        let (padded, orig) = data::pad_to_multiple(&y.inner, self.inner.config().required_multiple()).map_err(py_err)?;
        let out = symunet_core::train::restore(&self.inner, &padded).map_err(py_err)?;
        Ok(PyTensor { inner: data::crop_back(&out, orig).map_err(py_err)? })
    }

    /// Detached feature maps for the named taps.
    fn extract_features(&self, y: &PyTensor, taps: Vec<String>) -> PyResult<HashMap<String, PyTensor>> {
        let (_, maps) = model::extract_features(&self.inner, &y.inner, &taps).map_err(py_err)?;
        Ok(maps.into_iter().map(|(k, v)| (k, PyTensor { inner: v })).collect())
    }
}

#[pyfunction]
#[pyo3(signature = (x_hat, x, peak = 1.0))]
fn psnr(x_hat: &PyTensor, x: &PyTensor, peak: f64) -> PyResult<f64> {
    metrics::psnr(&x_hat.inner, &x.inner, peak).map_err(py_err)
}

#[pyfunction]
fn ssim(x_hat: &PyTensor, x: &PyTensor) -> PyResult<f64> {
    metrics::ssim(&x_hat.inner, &x.inner).map_err(py_err)
}

#[pyfunction]
fn l1_loss(x_hat: &PyTensor, x: &PyTensor) -> PyResult<f64> {
    loss::l1_loss(&x_hat.inner, &x.inner).map_err(py_err)
}

#[pyfunction]
fn fft_loss(x_hat: &PyTensor, x: &PyTensor) -> PyResult<f64> {
    loss::fft_loss(&x_hat.inner, &x.inner).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (x_hat, x, lambda_fft = 0.1))]
fn total_loss(x_hat: &PyTensor, x: &PyTensor, lambda_fft: f64) -> PyResult<f64> {
    loss::total_loss(&x_hat.inner, &x.inner, lambda_fft).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (step, total, lr0 = 1e-3, lr_min = 1e-7))]
fn cosine_lr(step: u64, total: u64, lr0: f64, lr_min: f64) -> f64 {
    optim::cosine_lr(step, total, lr0, lr_min)
}

/// Applies a degradation given as `kind` or `kind:param=value,...`.
#[pyfunction]
#[pyo3(signature = (x, spec, seed = 0))]
fn degrade(x: &PyTensor, spec: &str, seed: u64) -> PyResult<PyTensor> {
    let d = data::parse_degradation(spec).map_err(py_err)?;
    let spec = DegradationSpec::new(d, seed).map_err(py_err)?;
    Ok(PyTensor { inner: spec.apply(&x.inner).map_err(py_err)? })
}

#[pyfunction]
fn load_png(path: PathBuf) -> PyResult<PyTensor> {
    Ok(PyTensor { inner: data::load_png(&path).map_err(py_err)? })
}

#[pyfunction]
fn save_png(path: PathBuf, x: &PyTensor) -> PyResult<()> {
    data::save_png(&path, &x.inner).map_err(py_err)
}

#[pymodule]
fn symunet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(l1_loss, m)?)?;
    m.add_function(wrap_pyfunction!(fft_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(load_png, m)?)?;
    m.add_function(wrap_pyfunction!(save_png, m)?)?;
    Ok(())
}

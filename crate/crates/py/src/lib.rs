//! Python bindings. Images cross the boundary as nested lists of floats in the
//! normalized [-1, 1] range unless a function says otherwise.

use std::path::PathBuf;

use mitsgan::manipulator::{tamper, ManipulatorHandle, TamperRegion};
use mitsgan::metrics::{self, MetricConfig};
use mitsgan::trainer::{self, Checkpoint, TrainingConfig};
use mitsgan::volume::{generate_phantom, normalize_slice, PhantomSpec};
use ndarray::Array2;
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

type Image = Vec<Vec<f64>>;

pub fn to_py_err(e: mitsgan::Error) -> PyErr {
    use mitsgan::Error as E;
    let msg = e.to_string();
    match e {
        E::CheckpointNotFound(_) | E::NoSlices(_) => PyFileNotFoundError::new_err(msg),
        E::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => PyFileNotFoundError::new_err(msg),
        ref other if other.is_invariant_violation() || matches!(other, E::Config(_)) => PyValueError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

pub fn to_array(rows: &Image) -> PyResult<Array2<f64>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image must be a non-empty rectangular list of rows"));
    }
    Ok(Array2::from_shape_vec((h, w), rows.concat()).expect("checked shape"))
}

pub fn to_rows(a: &Array2<f64>) -> Image {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[pyclass(name = "TrainingConfig", module = "mitsgan", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTrainingConfig {
    inner: TrainingConfig,
}

#[pymethods]
impl PyTrainingConfig {
    /// Defaults, or the small desk-scale preset when `toy` is true.
    #[new]
    #[pyo3(signature = (toy = false))]
    fn new(toy: bool) -> Self {
        let inner = if toy { TrainingConfig::toy() } else { TrainingConfig::default() };
        PyTrainingConfig { inner }
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py_err)?;
        self.inner.validate().map_err(to_py_err)
    }

    fn to_kv(&self) -> String {
        self.inner.to_kv()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }
}

#[pyclass(name = "Manipulator", module = "mitsgan", skip_from_py_object)]
#[derive(Clone)]
pub struct PyManipulator {
    inner: ManipulatorHandle,
}

#[pymethods]
impl PyManipulator {
    #[staticmethod]
    fn blur_blend() -> Self {
        PyManipulator {
            inner: ManipulatorHandle::blur_blend(),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = ManipulatorHandle::load(&path).map_err(to_py_err)?;
        Ok(PyManipulator { inner })
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().to_string()
    }

    /// Replaces the square centred at (cx, cy) with the manipulator's output.
    #[pyo3(signature = (image, cx, cy, size = 32))]
    fn tamper(&self, image: Image, cx: usize, cy: usize, size: usize) -> PyResult<Image> {
        let x = to_array(&image)?;
        let region = TamperRegion::new(cx, cy).with_size(size);
        let out = tamper(x.view(), region, &self.inner).map_err(to_py_err)?;
        Ok(to_rows(&out))
    }
}

#[pyclass(name = "Checkpoint", module = "mitsgan", skip_from_py_object)]
#[derive(Clone)]
pub struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = trainer::load_run_checkpoint(&path).map_err(to_py_err)?;
        Ok(PyCheckpoint { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&self.inner, &path).map_err(to_py_err)
    }

    fn protect(&self, image: Image) -> PyResult<Image> {
        let x = to_array(&image)?;
        let xp = trainer::protect_pixels(&x, &self.inner).map_err(to_py_err)?;
        Ok(to_rows(&xp))
    }

    fn manipulator(&self) -> PyManipulator {
        PyManipulator {
            inner: self.inner.manipulator.clone(),
        }
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    fn config(&self) -> PyTrainingConfig {
        PyTrainingConfig {
            inner: self.inner.config.clone(),
        }
    }
}

/// Normalized slices of one synthetic chest phantom volume.
#[pyfunction]
#[pyo3(signature = (size = 64, slices = 32, nodule_probability = 0.3, seed = 0))]
fn phantom_slices(size: usize, slices: usize, nodule_probability: f64, seed: u64) -> PyResult<Vec<Image>> {
    let vol = generate_phantom(&PhantomSpec::new(size, slices, nodule_probability, seed)).map_err(to_py_err)?;
    let records = vol.slices().map_err(to_py_err)?;
    Ok(records.iter().map(|r| to_rows(&r.pixels)).collect())
}

/// Hounsfield units to [-1, 1].
#[pyfunction]
fn normalize(hu: Image) -> PyResult<Image> {
    let a = to_array(&hu)?;
    Ok(to_rows(&normalize_slice(a.view()).map_err(to_py_err)?))
}

/// Trains a protector; `out_dir` receives per-epoch checkpoints and the loss log.
#[pyfunction]
#[pyo3(signature = (slices, config, manipulator = None, out_dir = None))]
fn fit(
    py: Python<'_>,
    slices: Vec<Image>,
    config: &PyTrainingConfig,
    manipulator: Option<&PyManipulator>,
    out_dir: Option<PathBuf>,
) -> PyResult<PyCheckpoint> {
    let xs = slices.iter().map(to_array).collect::<PyResult<Vec<_>>>()?;
    let cfg = config.inner.clone();
    let m = match manipulator {
        Some(m) => m.inner.clone(),
        None => trainer::build_manipulator(&xs, &cfg).map_err(to_py_err)?,
    };
    let out = out_dir.map(|dir| trainer::RunOutput { dir });
    let inner = py
        .detach(|| trainer::fit(&xs, &cfg, m, out.as_ref()))
        .map_err(to_py_err)?;
    Ok(PyCheckpoint { inner })
}

fn pair(a: &Image, b: &Image) -> PyResult<(Array2<f64>, Array2<f64>)> {
    let (a, b) = (to_array(a)?, to_array(b)?);
    Ok((metrics::to_metric_scale(a.view()), metrics::to_metric_scale(b.view())))
}

/// Metrics take normalized images and report on the 12-bit intensity scale.
#[pyfunction]
fn rmse(a: Image, b: Image) -> PyResult<f64> {
    let (a, b) = pair(&a, &b)?;
    metrics::rmse(a.view(), b.view()).map_err(to_py_err)
}

#[pyfunction]
fn psnr(a: Image, b: Image) -> PyResult<f64> {
    let (a, b) = pair(&a, &b)?;
    metrics::psnr(a.view(), b.view(), &MetricConfig::default()).map_err(to_py_err)
}

#[pyfunction]
fn ssim(a: Image, b: Image) -> PyResult<f64> {
    let (a, b) = pair(&a, &b)?;
    metrics::ssim(a.view(), b.view(), &MetricConfig::default()).map_err(to_py_err)
}

#[pyfunction]
fn lpips(a: Image, b: Image) -> PyResult<f64> {
    let (a, b) = pair(&a, &b)?;
    metrics::lpips(a.view(), b.view(), &MetricConfig::default()).map_err(to_py_err)
}

/// Absolute-difference map between two images of equal shape.
#[pyfunction]
fn heatmap(a: Image, b: Image) -> PyResult<Image> {
    let (a, b) = (to_array(&a)?, to_array(&b)?);
    Ok(to_rows(&metrics::heatmap(a.view(), b.view()).map_err(to_py_err)?))
}

#[pymodule]
#[pyo3(name = "mitsgan")]
pub fn mitsgan_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyTrainingConfig>()?;
    m.add_class::<PyManipulator>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(phantom_slices, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(lpips, m)?)?;
    m.add_function(wrap_pyfunction!(heatmap, m)?)?;
    Ok(())
}

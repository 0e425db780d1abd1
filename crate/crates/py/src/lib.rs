//! Python bindings: images as float64 numpy arrays in `[0, 1]`, feature maps
//! as C×H×W arrays, plus the model, degradation, metric, and training entry
//! points.

use numpy::ndarray::{Array1, Array2, Array3};
use numpy::{IntoPyArray, PyArray1, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use o2sr_core::config::RunConfig;
use o2sr_core::error::Error;
use o2sr_core::image::{BitDepth, Image, ValueRange};
use o2sr_core::model::{ModelConfig, ModelParams};
use o2sr_core::tensor::FeatureMap;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Divergence(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn image_from_array(arr: &PyReadonlyArray2<f64>, id: &str) -> PyResult<Image> {
    let a = arr.as_array();
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let data: Vec<f64> = a.iter().copied().collect();
    Image::new(h, w, 1, ValueRange::Unit, data, id).map_err(to_py)
}

fn image_to_array<'py>(py: Python<'py>, img: &Image) -> PyResult<Bound<'py, PyArray2<f64>>> {
    if img.channels() != 1 {
        return Err(PyValueError::new_err("expected a single-channel image"));
    }
    let arr = Array2::from_shape_vec((img.height(), img.width()), img.data().to_vec())
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(arr.into_pyarray(py))
}

fn map_from_array(arr: &PyReadonlyArray3<f64>) -> PyResult<FeatureMap> {
    let a = arr.as_array();
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let data: Vec<f64> = a.iter().copied().collect();
    FeatureMap::from_vec(c, h, w, data).map_err(to_py)
}

fn map_to_array<'py>(py: Python<'py>, m: &FeatureMap) -> PyResult<Bound<'py, PyArray3<f64>>> {
    let (c, h, w) = m.shape();
    let arr = Array3::from_shape_vec((c, h, w), m.data().to_vec())
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(arr.into_pyarray(py))
}

/// Load an 8/16-bit grayscale or 8-bit RGB PNG as a float64 array in [0, 1].
/// Grayscale gives (H, W); RGB gives (H, W, 3).
#[pyfunction]
fn load_image(py: Python<'_>, path: &str) -> PyResult<Py<PyAny>> {
    let img = o2sr_core::image::load_image(path).map_err(to_py)?;
    if img.channels() == 1 {
        Ok(image_to_array(py, &img)?.into_any().unbind())
    } else {
        let arr = Array3::from_shape_vec(
            (img.height(), img.width(), 3),
            img.data().to_vec(),
        )
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(arr.into_pyarray(py).into_any().unbind())
    }
}

/// Save a (H, W) array in [0, 1] as a PNG at the given bit depth (8 or 16).
#[pyfunction]
#[pyo3(signature = (arr, path, bit_depth = 8))]
fn save_image(arr: PyReadonlyArray2<f64>, path: &str, bit_depth: u32) -> PyResult<()> {
    let img = image_from_array(&arr, "py")?;
    let depth = match bit_depth {
        8 => BitDepth::Eight,
        16 => BitDepth::Sixteen,
        other => {
            return Err(PyValueError::new_err(format!(
                "bit_depth must be 8 or 16, got {other}"
            )))
        }
    };
    o2sr_core::image::save_image_with_depth(&img, path, depth).map_err(to_py)
}

/// BT.601 luminance of an (H, W, 3) array; (H, W) passes through.
#[pyfunction]
fn to_luminance<'py>(
    py: Python<'py>,
    arr: PyReadonlyArray3<'py, f64>,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let a = arr.as_array();
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if c != 3 {
        return Err(PyValueError::new_err(format!(
            "expected (H, W, 3), got last dim {c}"
        )));
    }
    let data: Vec<f64> = a.iter().copied().collect();
    let img = Image::new(h, w, 3, ValueRange::Unit, data, "py").map_err(to_py)?;
    image_to_array(py, &o2sr_core::image::to_luminance(&img).map_err(to_py)?)
}

/// Bicubic resampling (a = -0.5, reflect boundary).
#[pyfunction]
fn bicubic_resample<'py>(
    py: Python<'py>,
    arr: PyReadonlyArray2<'py, f64>,
    factor: f64,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let img = image_from_array(&arr, "py")?;
    image_to_array(py, &o2sr_core::image::bicubic_resample(&img, factor).map_err(to_py)?)
}

/// Normalized isotropic Gaussian kernel sampled at integer offsets.
#[pyfunction]
fn gaussian_kernel(py: Python<'_>, sigma: f64, size: usize) -> PyResult<Bound<'_, PyArray2<f64>>> {
    let k = o2sr_core::degrade::gaussian_kernel(sigma, size).map_err(to_py)?;
    let arr = Array2::from_shape_vec((size, size), k.weights().to_vec())
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(arr.into_pyarray(py))
}

/// Anti-aliased motion-blur kernel for a length/orientation pair.
#[pyfunction]
fn motion_kernel(
    py: Python<'_>,
    length: f64,
    orientation: f64,
    size: usize,
) -> PyResult<Bound<'_, PyArray2<f64>>> {
    let mv = o2sr_core::degrade::MotionVector::new(length, orientation).map_err(to_py)?;
    let k = o2sr_core::degrade::motion_kernel(mv, size).map_err(to_py)?;
    let arr = Array2::from_shape_vec((size, size), k.weights().to_vec())
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(arr.into_pyarray(py))
}

fn degrade_settings(
    kernel: &str,
    sigma: f64,
    kernel_size: usize,
    motion_length: f64,
    motion_angle: f64,
    motion_size: usize,
    scale: usize,
    noise_sigma: f64,
    seed: u64,
    downsample: &str,
) -> PyResult<o2sr_core::degrade::DegradationConfig> {
    let settings = o2sr_core::config::DegradeSettings {
        kernel: kernel.to_string(),
        sigma,
        kernel_size,
        motion_length,
        motion_angle,
        motion_size,
        scale,
        noise_sigma,
        seed,
        downsample: match downsample {
            "bicubic" => o2sr_core::degrade::DownsampleMode::Bicubic,
            "stride" => o2sr_core::degrade::DownsampleMode::Stride,
            other => {
                return Err(PyValueError::new_err(format!(
                    "downsample must be bicubic or stride, got '{other}'"
                )))
            }
        },
    };
    settings.to_config().map_err(to_py)
}

/// Blur, downsample by `scale`, and add seeded noise.
/// `kernel` is one of delta, gaussian, motion, gaussian+motion.
#[pyfunction]
#[pyo3(signature = (hr, scale, kernel = "gaussian", sigma = 1.2, kernel_size = 9,
    motion_length = 3.0, motion_angle = 0.7853981633974483, motion_size = 5,
    noise_sigma = 0.01, seed = 0, downsample = "bicubic"))]
#[allow(clippy::too_many_arguments)]
fn degrade<'py>(
    py: Python<'py>,
    hr: PyReadonlyArray2<'py, f64>,
    scale: usize,
    kernel: &str,
    sigma: f64,
    kernel_size: usize,
    motion_length: f64,
    motion_angle: f64,
    motion_size: usize,
    noise_sigma: f64,
    seed: u64,
    downsample: &str,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let cfg = degrade_settings(
        kernel,
        sigma,
        kernel_size,
        motion_length,
        motion_angle,
        motion_size,
        scale,
        noise_sigma,
        seed,
        downsample,
    )?;
    let img = image_from_array(&hr, "py")?;
    image_to_array(py, &o2sr_core::degrade::degrade(&img, &cfg).map_err(to_py)?)
}

/// Peak signal-to-noise ratio in dB (`inf` for identical inputs).
#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn psnr(a: PyReadonlyArray2<f64>, b: PyReadonlyArray2<f64>, peak: f64) -> PyResult<f64> {
    let ia = image_from_array(&a, "a")?;
    let ib = image_from_array(&b, "b")?;
    o2sr_core::metrics::psnr(&ia, &ib, peak).map_err(to_py)
}

/// Mean local SSIM (11x11 Gaussian window, sigma 1.5, unit peak).
#[pyfunction]
fn ssim(a: PyReadonlyArray2<f64>, b: PyReadonlyArray2<f64>) -> PyResult<f64> {
    let ia = image_from_array(&a, "a")?;
    let ib = image_from_array(&b, "b")?;
    o2sr_core::metrics::ssim(&ia, &ib).map_err(to_py)
}

/// Training objective: `alpha * mean|sr - hr| + beta * mean((sr - hr)^2)`.
#[pyfunction]
#[pyo3(signature = (sr, hr, alpha = 1.0, beta = 0.1))]
fn loss(
    sr: PyReadonlyArray2<f64>,
    hr: PyReadonlyArray2<f64>,
    alpha: f64,
    beta: f64,
) -> PyResult<f64> {
    let isr = image_from_array(&sr, "sr")?;
    let ihr = image_from_array(&hr, "hr")?;
    o2sr_core::train::loss(&isr, &ihr, alpha, beta).map_err(to_py)
}

/// Per-channel directional variance statistics of a (C, H, W) feature map.
/// Returns `(v_stats, h_stats)`.
#[pyfunction]
fn orientation_operator<'py>(
    py: Python<'py>,
    z: PyReadonlyArray3<'py, f64>,
) -> PyResult<(Bound<'py, PyArray1<f64>>, Bound<'py, PyArray1<f64>>)> {
    let m = map_from_array(&z)?;
    let desc = o2sr_core::orientation::orientation_operator(&m);
    Ok((
        Array1::from_vec(desc.v_stats).into_pyarray(py),
        Array1::from_vec(desc.h_stats).into_pyarray(py),
    ))
}

/// Gate a (C, H, W) map channel-wise by `v_stats + h_stats`.
#[pyfunction]
fn modulate<'py>(
    py: Python<'py>,
    m: PyReadonlyArray3<'py, f64>,
    v_stats: Vec<f64>,
    h_stats: Vec<f64>,
) -> PyResult<Bound<'py, PyArray3<f64>>> {
    let map = map_from_array(&m)?;
    let desc = o2sr_core::orientation::OrientationDescriptor { v_stats, h_stats };
    map_to_array(py, &o2sr_core::orientation::modulate(&map, &desc).map_err(to_py)?)
}

/// Deterministic synthetic radiograph-like test image.
#[pyfunction]
fn synthetic_radiograph(
    py: Python<'_>,
    height: usize,
    width: usize,
    seed: u64,
) -> PyResult<Bound<'_, PyArray2<f64>>> {
    image_to_array(py, &o2sr_core::synth::synthetic_radiograph(height, width, seed))
}

/// The super-resolution model: configuration plus parameters.
#[pyclass]
struct Model {
    cfg: ModelConfig,
    params: ModelParams,
}

#[pymethods]
impl Model {
    /// Build a freshly initialized model. `config_text` uses the run-config
    /// schema (`model.channels = 16` etc.) on top of the defaults.
    #[new]
    #[pyo3(signature = (config_text = ""))]
    fn new(config_text: &str) -> PyResult<Self> {
        let mut rc = RunConfig::default();
        rc.apply_text(config_text).map_err(to_py)?;
        let params = o2sr_core::model::build_model(&rc.model).map_err(to_py)?;
        Ok(Model {
            cfg: rc.model,
            params,
        })
    }

    /// Load a model from a checkpoint file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = o2sr_core::model::load_checkpoint(path).map_err(to_py)?;
        Ok(Model {
            cfg: ck.config,
            params: ck.params,
        })
    }

    /// Super-resolve a (H, W) array in [0, 1]; output is (scale*H, scale*W).
    fn forward<'py>(
        &self,
        py: Python<'py>,
        lr: PyReadonlyArray2<'py, f64>,
    ) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let img = image_from_array(&lr, "lr")?;
        let sr = o2sr_core::model::forward(&img, &self.params, &self.cfg).map_err(to_py)?;
        image_to_array(py, &sr)
    }

    /// Write a checkpoint (parameters and config only).
    #[pyo3(signature = (path, step = 0))]
    fn save(&self, path: &str, step: u64) -> PyResult<()> {
        o2sr_core::model::save_checkpoint(&self.params, &self.cfg, step, path).map_err(to_py)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.params.n_params()
    }

    #[getter]
    fn scale(&self) -> usize {
        self.cfg.scale
    }

    /// Canonical `model.*` key/value echo of the configuration.
    #[getter]
    fn config_text(&self) -> String {
        o2sr_core::config::serialize_kv(&o2sr_core::config::model_to_kv(&self.cfg))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(scale={}, channels={}, encoder={}, params={})",
            self.cfg.scale,
            self.cfg.channels,
            self.cfg.encoder.name(),
            self.params.n_params()
        )
    }
}

/// Train on a paired dataset directory (`hr/` plus `lr_x<d>/`), writing
/// checkpoints and a loss log into `out_dir`. Returns
/// `(final_checkpoint_path, steps_run, final_loss)`.
#[pyfunction]
#[pyo3(signature = (data_dir, out_dir, config_text = "", preset = "tiny", resume = false))]
fn fit(
    data_dir: &str,
    out_dir: &str,
    config_text: &str,
    preset: &str,
    resume: bool,
) -> PyResult<(String, u64, Option<f64>)> {
    let mut rc = match preset {
        "tiny" => RunConfig::preset_tiny(),
        "paper" => RunConfig::preset_paper(),
        other => {
            return Err(PyValueError::new_err(format!(
                "preset must be tiny or paper, got '{other}'"
            )))
        }
    };
    rc.apply_text(config_text).map_err(to_py)?;
    let lr_dir = std::path::Path::new(data_dir).join(format!("lr_x{}", rc.model.scale));
    let hr_dir = std::path::Path::new(data_dir).join("hr");
    let ds = o2sr_core::dataset::build_paired_dataset(lr_dir, hr_dir, rc.model.scale)
        .map_err(to_py)?;
    let report = o2sr_core::train::fit(&ds, &rc.model, &rc.train, out_dir, resume).map_err(to_py)?;
    Ok((
        report.final_checkpoint.to_string_lossy().into_owned(),
        report.steps_run,
        report.final_loss,
    ))
}

/// Evaluate PSNR/SSIM between two directories on the luminance channel.
/// Returns `(mean_psnr, mean_ssim, records)` with one `(id, psnr, ssim)`
/// tuple per image.
#[pyfunction]
#[pyo3(signature = (sr_dir, hr_dir, scale = 4, border_crop = None))]
fn evaluate_dirs(
    sr_dir: &str,
    hr_dir: &str,
    scale: usize,
    border_crop: Option<usize>,
) -> PyResult<(f64, f64, Vec<(String, f64, f64)>)> {
    let report = o2sr_core::metrics::evaluate_pairs(
        sr_dir,
        hr_dir,
        scale,
        border_crop.unwrap_or(scale),
    )
    .map_err(to_py)?;
    Ok((
        report.mean_psnr,
        report.mean_ssim,
        report
            .records
            .iter()
            .map(|r| (r.image_id.clone(), r.psnr_db, r.ssim))
            .collect(),
    ))
}

#[pymodule]
fn o2sr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(save_image, m)?)?;
    m.add_function(wrap_pyfunction!(to_luminance, m)?)?;
    m.add_function(wrap_pyfunction!(bicubic_resample, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(motion_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(orientation_operator, m)?)?;
    m.add_function(wrap_pyfunction!(modulate, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_radiograph, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_dirs, m)?)?;
    Ok(())
}

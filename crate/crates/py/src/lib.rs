//! Python bindings. Images are 2-D float64 arrays in [0, 1]; depth maps use
//! NaN for invalid pixels.

use endomap::evaluation::rms_error;
use endomap::image::{ImageBuffer, Raster};
use endomap::mask::BinaryMask;
use endomap::pipeline::{run_pipeline as run_pipeline_rs, synth_dataset as synth_rs, PipelineConfig};
use endomap::preprocess::{correct_vignetting as correct_rs, detect_reflections as detect_rs, fit_vignette as fit_rs, ReflectionParams, VignetteModel};
use endomap::sfs::{estimate_light as estimate_rs, tsai_shah, DepthMap, LightModel, SfsMethod, SfsParams};
use endomap::synthkit::DatasetParams;
use numpy::ndarray::Array2;
use numpy::{IntoPyArray, PyArray2, PyReadonlyArray2};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

fn err(e: endomap::Error) -> PyErr {
    match e {
        endomap::Error::InvalidParameter(_) | endomap::Error::Dimension(_) | endomap::Error::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_image(a: &PyReadonlyArray2<f64>) -> PyResult<ImageBuffer> {
    let v = a.as_array();
    let (h, w) = v.dim();
    ImageBuffer::new(w, h, 1, v.iter().copied().collect()).map_err(err)
}

fn to_mask(a: &PyReadonlyArray2<bool>) -> PyResult<BinaryMask> {
    let v = a.as_array();
    let (h, w) = v.dim();
    BinaryMask::from_bits(w, h, v.iter().copied().collect()).map_err(err)
}

fn to_depth(a: &PyReadonlyArray2<f64>) -> DepthMap {
    let v = a.as_array();
    let (h, w) = v.dim();
    DepthMap::from_nan_raster(Raster { width: w, height: h, data: v.iter().copied().collect() })
}

fn array<'py>(py: Python<'py>, w: usize, h: usize, data: Vec<f64>) -> Bound<'py, PyArray2<f64>> {
    Array2::from_shape_vec((h, w), data).expect("shape matches buffer").into_pyarray_bound(py)
}

/// Tsai-Shah shape from shading. Returns the depth map (NaN = invalid).
#[pyfunction]
#[pyo3(signature = (image, slant=0.0, tilt=0.0, albedo=1.0, iters=200, method="robust", invalid=None, flat_tolerance=0.0))]
#[allow(clippy::too_many_arguments)]
fn shape_from_shading<'py>(
    py: Python<'py>,
    image: PyReadonlyArray2<f64>,
    slant: f64,
    tilt: f64,
    albedo: f64,
    iters: usize,
    method: &str,
    invalid: Option<PyReadonlyArray2<bool>>,
    flat_tolerance: f64,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let img = to_image(&image)?;
    let mask = invalid.as_ref().map(to_mask).transpose()?;
    let light = LightModel::new(slant, tilt, albedo).map_err(err)?;
    let method = match method {
        "robust" => SfsMethod::Robust,
        "newton" => SfsMethod::Newton,
        m => return Err(PyValueError::new_err(format!("unknown method `{m}`"))),
    };
    let params = SfsParams { iters, method, flat_tolerance, ..Default::default() };
    let out = py.allow_threads(|| tsai_shah(&img, mask.as_ref(), &light, &params)).map_err(err)?;
    let r = out.depth.to_nan_raster();
    Ok(array(py, r.width, r.height, r.data))
}

/// Light direction and albedo from image statistics: `(slant, tilt, albedo, fallback)`.
#[pyfunction]
#[pyo3(signature = (image, invalid=None))]
fn estimate_light(image: PyReadonlyArray2<f64>, invalid: Option<PyReadonlyArray2<bool>>) -> PyResult<(f64, f64, f64, bool)> {
    let img = to_image(&image)?;
    let mask = match invalid {
        Some(m) => to_mask(&m)?,
        None => BinaryMask::new(img.width(), img.height()),
    };
    let e = estimate_rs(&img, &mask).map_err(err)?;
    Ok((e.light.slant, e.light.tilt, e.light.albedo, e.fallback))
}

/// Fitted radial gain coefficients `(a, b, c)`.
#[pyfunction]
fn fit_vignette(image: PyReadonlyArray2<f64>) -> PyResult<(f64, f64, f64)> {
    let m = fit_rs(&to_image(&image)?).map_err(err)?;
    Ok((m.a, m.b, m.c))
}

/// Divides out the gain `1 + a r² + b r⁴ + c r⁶`.
#[pyfunction]
fn correct_vignetting<'py>(py: Python<'py>, image: PyReadonlyArray2<f64>, a: f64, b: f64, c: f64) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let img = to_image(&image)?;
    let m = VignetteModel::new(img.width(), img.height(), a, b, c);
    let out = correct_rs(&img, &m).map_err(err)?;
    Ok(array(py, out.width(), out.height(), out.data().to_vec()))
}

/// Boolean specular mask.
#[pyfunction]
#[pyo3(signature = (image, percentile=95.0, close_radius=3, halo=2))]
fn detect_reflections<'py>(py: Python<'py>, image: PyReadonlyArray2<f64>, percentile: f64, close_radius: usize, halo: usize) -> PyResult<Bound<'py, PyArray2<bool>>> {
    let img = to_image(&image)?;
    let m = detect_rs(&img, &ReflectionParams { percentile, close_radius, halo }).map_err(err)?;
    let a = Array2::from_shape_vec((m.height(), m.width()), m.bits().to_vec()).expect("shape matches mask");
    Ok(a.into_pyarray_bound(py))
}

/// RMS depth error as a dict (`percent` is the aligned figure).
#[pyfunction]
fn depth_rms<'py>(py: Python<'py>, depth: PyReadonlyArray2<f64>, reference: PyReadonlyArray2<f64>) -> PyResult<Bound<'py, PyDict>> {
    let r = rms_error(&to_depth(&depth), &to_depth(&reference)).map_err(err)?;
    let d = PyDict::new_bound(py);
    d.set_item("rms", r.rms)?;
    d.set_item("percent", r.percent)?;
    d.set_item("raw_rms", r.raw_rms)?;
    d.set_item("raw_percent", r.raw_percent)?;
    d.set_item("scale", r.scale)?;
    d.set_item("offset", r.offset)?;
    d.set_item("pixels", r.pixels)?;
    d.set_item("range", r.range)?;
    Ok(d)
}

/// Writes the synthetic benchmark to `out`; returns the written paths.
#[pyfunction]
#[pyo3(signature = (out, frames=100, size=128, seed=7))]
fn synth_dataset(py: Python<'_>, out: PathBuf, frames: usize, size: usize, seed: u64) -> PyResult<Vec<String>> {
    let p = DatasetParams { frames, size, seed, ..Default::default() };
    let (_, files) = py.allow_threads(|| synth_rs(&p, &out)).map_err(err)?;
    Ok(files.iter().map(|f| f.display().to_string()).collect())
}

/// Runs every stage for the config at `config`. Returns the mean RMS per
/// group size when evaluation ran.
#[pyfunction]
#[pyo3(signature = (config, out=None))]
fn run_pipeline(py: Python<'_>, config: PathBuf, out: Option<PathBuf>) -> PyResult<Vec<(usize, f64)>> {
    let mut cfg = PipelineConfig::load(&config).map_err(err)?;
    if let Some(o) = out {
        cfg.output = o;
    }
    let (_, reports) = py.allow_threads(|| run_pipeline_rs(&cfg)).map_err(err)?;
    Ok(reports.unwrap_or_default().iter().map(|r| (r.group_size, r.mean)).collect())
}

#[pymodule]
fn endomap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(shape_from_shading, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_light, m)?)?;
    m.add_function(wrap_pyfunction!(fit_vignette, m)?)?;
    m.add_function(wrap_pyfunction!(correct_vignetting, m)?)?;
    m.add_function(wrap_pyfunction!(detect_reflections, m)?)?;
    m.add_function(wrap_pyfunction!(depth_rms, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

//! Python bindings for the image-level pieces of mop.
//!
//! Images cross the boundary as flat row-major HWC lists of floats in
//! `[0, 1]` together with their height and width, so the module needs no
//! array library on either side.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mop_core::config::PipelineConfig;
use mop_core::degrade::OpticsParams;
use mop_core::image::ImagePatch;
use mop_core::Error;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn image(pixels: Vec<f32>, height: usize, width: usize) -> PyResult<ImagePatch> {
    ImagePatch::new("py", height, width, pixels).map_err(to_py)
}

fn optics(sigma_per_plane: f64) -> PyResult<OpticsParams> {
    let params = OpticsParams {
        sigma_per_plane,
        ..OpticsParams::default()
    };
    params.validate().map_err(to_py)?;
    Ok(params)
}

/// PSNR in dB between two images of the same shape, capped at `PSNR_CAP`.
#[pyfunction]
fn psnr(a: Vec<f32>, b: Vec<f32>, height: usize, width: usize) -> PyResult<f64> {
    mop_core::metrics::psnr(&image(a, height, width)?, &image(b, height, width)?).map_err(to_py)
}

/// Mean SSIM (11x11 Gaussian window) between two images of the same shape.
#[pyfunction]
fn ssim(a: Vec<f32>, b: Vec<f32>, height: usize, width: usize) -> PyResult<f64> {
    mop_core::metrics::ssim(&image(a, height, width)?, &image(b, height, width)?).map_err(to_py)
}

/// Binary Canny edge mask (row-major, values 0/1) of the image's luminance.
#[pyfunction]
#[pyo3(signature = (pixels, height, width, low=0.1, high=0.2))]
fn canny(pixels: Vec<f32>, height: usize, width: usize, low: f64, high: f64) -> PyResult<Vec<u8>> {
    let edges = mop_core::canny::canny(&image(pixels, height, width)?, low, high).map_err(to_py)?;
    Ok(edges.mask)
}

/// Blurs the image as if it were `d` planes away from focus.
#[pyfunction]
#[pyo3(signature = (pixels, height, width, d, sigma_per_plane=0.5))]
fn defocus_blur(pixels: Vec<f32>, height: usize, width: usize, d: f64, sigma_per_plane: f64) -> PyResult<Vec<f32>> {
    let params = optics(sigma_per_plane)?;
    let out = mop_core::degrade::defocus_blur(&image(pixels, height, width)?, d, &params);
    Ok(out.pixels().to_vec())
}

/// Contrast-transfer value at the reference frequency for distance `d`.
#[pyfunction]
#[pyo3(signature = (d, sigma_per_plane=0.5))]
fn ctf_value(d: f64, sigma_per_plane: f64) -> PyResult<f64> {
    Ok(mop_core::degrade::ctf_value(d, &optics(sigma_per_plane)?))
}

/// Deterministic synthetic tissue image, flat HWC.
#[pyfunction]
fn procedural_tissue(height: usize, width: usize, seed: u64) -> PyResult<Vec<f32>> {
    let img = mop_core::degrade::procedural_tissue("py", height, width, seed).map_err(to_py)?;
    Ok(img.pixels().to_vec())
}

/// Validates a TOML pipeline config and returns its fingerprint.
#[pyfunction]
fn config_fingerprint(text: &str) -> PyResult<String> {
    let config = PipelineConfig::from_toml(text).map_err(to_py)?;
    config.validate().map_err(to_py)?;
    Ok(config.fingerprint())
}

#[pymodule]
fn mop(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(canny, m)?)?;
    m.add_function(wrap_pyfunction!(defocus_blur, m)?)?;
    m.add_function(wrap_pyfunction!(ctf_value, m)?)?;
    m.add_function(wrap_pyfunction!(procedural_tissue, m)?)?;
    m.add_function(wrap_pyfunction!(config_fingerprint, m)?)?;
    m.add("PSNR_CAP", mop_core::metrics::PSNR_CAP)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

//! Canny edge detector on the luminance of an RGB patch.

use crate::error::{Error, Result};
use crate::image::ImagePatch;

pub const CANNY_SIGMA: f64 = 1.4;
pub const DEFAULT_LOW: f64 = 0.1;
pub const DEFAULT_HIGH: f64 = 0.2;
/// Sobel response of a unit step along one axis; magnitudes are divided by
/// this so that thresholds live on a `[0, ~1.4]` scale.
pub const SOBEL_NORM: f64 = 4.0;
/// Magnitudes are snapped to this grid so that responses that are equal in
/// exact arithmetic compare equal regardless of summation order.
pub const MAGNITUDE_QUANTUM: f64 = 1.0 / (1u64 << 30) as f64;

/// Binary edge mask, row-major, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<u8>,
}

impl EdgeMap {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            mask: vec![0; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.mask[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().map(|&v| v as usize).sum()
    }
}

pub fn gaussian_taps_1d(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

pub fn quantize(m: f64) -> f64 {
    (m / MAGNITUDE_QUANTUM).round() * MAGNITUDE_QUANTUM
}

fn clamp_idx(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Quantized gradient direction used by non-maximum suppression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Gradient along columns: compare left/right.
    Horizontal,
    /// Gradient along rows: compare up/down.
    Vertical,
    /// Gradient towards down-right (or up-left).
    Diagonal,
    /// Gradient towards down-left (or up-right).
    AntiDiagonal,
}

impl Direction {
    /// `(drow, dcol)` of the neighbor along the gradient.
    pub fn offset(self) -> (i64, i64) {
        match self {
            Direction::Horizontal => (0, 1),
            Direction::Vertical => (1, 0),
            Direction::Diagonal => (1, 1),
            Direction::AntiDiagonal => (1, -1),
        }
    }
}

const TAN_22_5: f64 = 0.414_213_562_373_095_03;

fn quantize_direction(gx: f64, gy: f64) -> Direction {
    let (ax, ay) = (gx.abs(), gy.abs());
    if ay <= ax * TAN_22_5 {
        Direction::Horizontal
    } else if ax <= ay * TAN_22_5 {
        Direction::Vertical
    } else if (gx > 0.0) == (gy > 0.0) {
        Direction::Diagonal
    } else {
        Direction::AntiDiagonal
    }
}

/// Normalized, quantized Sobel magnitude and gradient components of the
/// smoothed luminance.
pub fn gradients(image: &ImagePatch) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, w) = image.dims();
    let lum = image.luminance();
    let k = gaussian_taps_1d(CANNY_SIGMA);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * lum[y * w + clamp_idx(x as i64 + t as i64 - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut smooth = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * tmp[clamp_idx(y as i64 + t as i64 - r, h) * w + x];
            }
            smooth[y * w + x] = acc;
        }
    }
    let at = |y: i64, x: i64| smooth[clamp_idx(y, h) * w + clamp_idx(x, w)];
    let mut mag = vec![0.0; h * w];
    let mut gxs = vec![0.0; h * w];
    let mut gys = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            mag[i] = quantize((gx * gx + gy * gy).sqrt() / SOBEL_NORM);
            gxs[i] = gx;
            gys[i] = gy;
        }
    }
    (mag, gxs, gys)
}

/// Grayscale, Gaussian smoothing, Sobel, 4-direction non-maximum
/// suppression and hysteresis. Border pixels are never edges.
pub fn canny(image: &ImagePatch, low: f64, high: f64) -> Result<EdgeMap> {
    if !(0.0 <= low && low < high && high <= 1.0) {
        return Err(Error::Parameter(format!(
            "canny thresholds must satisfy 0 <= low < high <= 1, got low={low} high={high}"
        )));
    }
    let (h, w) = image.dims();
    let (mag, gx, gy) = gradients(image);
    // non-maximum suppression: strictly above the neighbor against the
    // gradient, at least the neighbor along it (breaks exact ties once)
    let mut thin = vec![0.0; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let (dy, dx) = quantize_direction(gx[i], gy[i]).offset();
            let ahead = mag[(y as i64 + dy) as usize * w + (x as i64 + dx) as usize];
            let behind = mag[(y as i64 - dy) as usize * w + (x as i64 - dx) as usize];
            if m > behind && m >= ahead {
                thin[i] = m;
            }
        }
    }
    // hysteresis: flood from strong pixels through weak ones (8-connected)
    let mut out = EdgeMap::empty(h, w);
    let mut stack: Vec<usize> = (0..h * w).filter(|&i| thin[i] >= high).collect();
    for &i in &stack {
        out.mask[i] = 1;
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / w) as i64, (i % w) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out.mask[j] == 0 && thin[j] >= low {
                    out.mask[j] = 1;
                    stack.push(j);
                }
            }
        }
    }
    Ok(out)
}

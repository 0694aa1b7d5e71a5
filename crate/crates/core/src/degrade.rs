//! Synthetic defocus: Gaussian PSF, closed-form CTF labels, focal stacks,
//! stain augmentation and procedural tissue-like textures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{lab_to_rgb, rgb_to_lab};
use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::manifest::FocalStack;

/// Side length of the square regions that carry defocus labels.
pub const REGION: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpticsParams {
    /// Blur standard deviation in pixels per unit of plane offset.
    pub sigma_per_plane: f64,
    /// Reference spatial frequency (cycles/pixel) at which the CTF is read.
    pub f_ref: f64,
    pub kernel_radius_sigmas: f64,
}

impl Default for OpticsParams {
    fn default() -> Self {
        Self {
            sigma_per_plane: 0.5,
            f_ref: 0.1,
            kernel_radius_sigmas: 3.0,
        }
    }
}

impl OpticsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_per_plane > 0.0) {
            return Err(Error::Parameter("sigma_per_plane must be > 0".into()));
        }
        if !(self.f_ref > 0.0 && self.f_ref < 0.5) {
            return Err(Error::Parameter("f_ref must lie in (0, 0.5)".into()));
        }
        if !(self.kernel_radius_sigmas >= 3.0) {
            return Err(Error::Parameter("kernel_radius_sigmas must be >= 3".into()));
        }
        Ok(())
    }

    pub fn sigma(&self, d: f64) -> f64 {
        self.sigma_per_plane * d.abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefocusLabel {
    pub d: f64,
    pub c: f64,
}

impl DefocusLabel {
    pub fn from_distance(d: f64, params: &OpticsParams) -> Self {
        Self {
            d,
            c: ctf_value(d, params),
        }
    }
}

/// Square, normalized 2-D kernel of odd side `2 * radius + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    pub radius: usize,
    pub values: Vec<f64>,
}

impl Kernel2D {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.side() + j]
    }
}

fn kernel_radius(sigma: f64, params: &OpticsParams) -> usize {
    (params.kernel_radius_sigmas * sigma).ceil() as usize
}

/// Normalized 1-D Gaussian taps.
fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let taps: Vec<f64> = (-(radius as i64)..=radius as i64)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / z).collect()
}

pub fn gaussian_psf(sigma: f64, params: &OpticsParams) -> Result<Kernel2D> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Parameter(format!("PSF sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(Kernel2D {
            radius: 0,
            values: vec![1.0],
        });
    }
    let radius = kernel_radius(sigma, params);
    let side = 2 * radius + 1;
    let mut values = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let (y, x) = (i as f64 - radius as f64, j as f64 - radius as f64);
            values.push((-(x * x + y * y) / (2.0 * sigma * sigma)).exp());
        }
    }
    let z: f64 = values.iter().sum();
    values.iter_mut().for_each(|v| *v /= z);
    Ok(Kernel2D { radius, values })
}

/// Gaussian MTF read at `f_ref`: `exp(-2 pi^2 sigma(d)^2 f_ref^2)`.
pub fn ctf_value(d: f64, params: &OpticsParams) -> f64 {
    let s = params.sigma(d);
    (-2.0 * std::f64::consts::PI.powi(2) * s * s * params.f_ref * params.f_ref).exp()
}

/// Mirror index into `[0, n)` without repeating the edge sample.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Separable blur where every output column `x` uses its own `sigma[x]`.
fn blur_columns_varying(image: &ImagePatch, sigmas: &[f64], params: &OpticsParams) -> ImagePatch {
    let (h, w) = image.dims();
    let taps: Vec<Vec<f64>> = sigmas
        .iter()
        .map(|&s| gaussian_taps(s, kernel_radius(s, params)))
        .collect();
    let src: Vec<f64> = image.pixels().iter().map(|&v| v as f64).collect();
    // vertical pass, column x uses taps[x]
    let mut tmp = vec![0.0f64; h * w * 3];
    for x in 0..w {
        let k = &taps[x];
        let r = (k.len() / 2) as i64;
        for y in 0..h {
            let mut acc = [0.0f64; 3];
            for (t, kv) in k.iter().enumerate() {
                let yy = reflect(y as i64 + t as i64 - r, h);
                let o = (yy * w + x) * 3;
                for c in 0..3 {
                    acc[c] += kv * src[o + c];
                }
            }
            let o = (y * w + x) * 3;
            tmp[o..o + 3].copy_from_slice(&acc);
        }
    }
    // horizontal pass, output column x gathers with taps[x]
    let mut out = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let k = &taps[x];
            let r = (k.len() / 2) as i64;
            let mut acc = [0.0f64; 3];
            for (t, kv) in k.iter().enumerate() {
                let xx = reflect(x as i64 + t as i64 - r, w);
                let o = (y * w + xx) * 3;
                for c in 0..3 {
                    acc[c] += kv * tmp[o + c];
                }
            }
            let o = (y * w + x) * 3;
            for c in 0..3 {
                out[o + c] = acc[c].clamp(0.0, 1.0) as f32;
            }
        }
    }
    ImagePatch::new(image.id.clone(), h, w, out).expect("blur preserves invariants")
}

/// Blurs every channel with `gaussian_psf(sigma(d))`, reflective borders,
/// output clipped to `[0, 1]`.
pub fn defocus_blur(image: &ImagePatch, d: f64, params: &OpticsParams) -> ImagePatch {
    if d == 0.0 {
        return image.clone();
    }
    let sigmas = vec![params.sigma(d); image.width()];
    blur_columns_varying(image, &sigmas, params)
}

/// Slope (plane units per pixel) such that the first and last region
/// centers along a row differ by `tilt`.
fn tilt_slope(width: usize, tilt: f64) -> f64 {
    if width > REGION {
        tilt / (width - REGION) as f64
    } else {
        tilt / width as f64
    }
}

/// Signed defocus at column `x` for a plane at `offset`.
pub fn defocus_at_column(offset: f64, tilt: f64, x: f64, width: usize) -> f64 {
    offset + tilt_slope(width, tilt) * (x + 0.5 - width as f64 / 2.0)
}

/// Defocus labels on the 32x32 region grid of one plane.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<DefocusLabel>,
}

impl LabelMap {
    pub fn at(&self, row: usize, col: usize) -> DefocusLabel {
        self.labels[row * self.cols + col]
    }

    /// Label at the image center (mean of the region distances).
    pub fn center(&self, params: &OpticsParams) -> DefocusLabel {
        let d = self.labels.iter().map(|l| l.d).sum::<f64>() / self.labels.len() as f64;
        DefocusLabel::from_distance(d, params)
    }
}

pub fn region_labels(height: usize, width: usize, offset: f64, tilt: f64, params: &OpticsParams) -> LabelMap {
    let rows = height.div_ceil(REGION);
    let cols = width.div_ceil(REGION);
    let mut labels = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        for j in 0..cols {
            let x0 = j * REGION;
            let x1 = ((j + 1) * REGION).min(width);
            // center of the covered columns
            let cx = (x0 + x1) as f64 / 2.0 - 0.5;
            let d = defocus_at_column(offset, tilt, cx, width);
            labels.push(DefocusLabel::from_distance(d, params));
        }
    }
    LabelMap { rows, cols, labels }
}

/// Generates one blurred plane per offset, with per-region labels.
/// The blur varies along columns when `tilt` is non-zero.
pub fn synth_focal_stack(
    sharp: &ImagePatch,
    offsets: &[f64],
    params: &OpticsParams,
    tilt: Option<f64>,
    spacing_um: f64,
) -> Result<(FocalStack, Vec<LabelMap>)> {
    params.validate()?;
    let tilt = tilt.unwrap_or(0.0);
    let (h, w) = sharp.dims();
    let mut planes = Vec::with_capacity(offsets.len());
    let mut labels = Vec::with_capacity(offsets.len());
    for (k, &offset) in offsets.iter().enumerate() {
        let plane = if tilt == 0.0 {
            defocus_blur(sharp, offset, params)
        } else {
            let sigmas: Vec<f64> = (0..w)
                .map(|x| params.sigma(defocus_at_column(offset, tilt, x as f64, w)))
                .collect();
            blur_columns_varying(sharp, &sigmas, params)
        };
        planes.push((offset, plane.with_id(format!("{}_p{k:02}", sharp.id))));
        labels.push(region_labels(h, w, offset, tilt, params));
    }
    let stack = FocalStack::new(sharp.id.clone(), planes, sharp.clone(), spacing_um)?;
    Ok((stack, labels))
}

/// Per-channel (mean, std) targets in L*a*b*.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Uniform ranges from which augmentation targets are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StainRanges {
    pub mean_lo: [f64; 3],
    pub mean_hi: [f64; 3],
    pub std_lo: [f64; 3],
    pub std_hi: [f64; 3],
}

impl Default for StainRanges {
    fn default() -> Self {
        Self {
            mean_lo: [62.0, 12.0, -14.0],
            mean_hi: [78.0, 26.0, -2.0],
            std_lo: [8.0, 4.0, 3.0],
            std_hi: [16.0, 10.0, 7.0],
        }
    }
}

impl StainRanges {
    pub fn draw(&self, seed: u64) -> LabStats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = rng.gen_range(self.mean_lo[c]..=self.mean_hi[c]);
            std[c] = rng.gen_range(self.std_lo[c]..=self.std_hi[c]);
        }
        LabStats { mean, std }
    }
}

/// Reference statistics used when normalizing (rather than augmenting) stain.
pub const REFERENCE_STAIN: LabStats = LabStats {
    mean: [70.0, 19.0, -8.0],
    std: [12.0, 7.0, 5.0],
};

pub fn to_lab(image: &ImagePatch) -> Vec<[f64; 3]> {
    image
        .pixels()
        .chunks_exact(3)
        .map(|p| rgb_to_lab([p[0] as f64, p[1] as f64, p[2] as f64]))
        .collect()
}

pub fn lab_stats(lab: &[[f64; 3]]) -> LabStats {
    let n = lab.len() as f64;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = lab.iter().map(|p| p[c]).sum::<f64>() / n;
        std[c] = (lab.iter().map(|p| (p[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt();
    }
    LabStats { mean, std }
}

/// Shift-and-scale of each L*a*b* channel onto `target`, before conversion back.
pub fn transfer_lab(lab: &[[f64; 3]], target: &LabStats) -> Vec<[f64; 3]> {
    let src = lab_stats(lab);
    let scale: [f64; 3] = std::array::from_fn(|c| {
        if src.std[c] > 1e-12 {
            target.std[c] / src.std[c]
        } else {
            1.0
        }
    });
    lab.iter()
        .map(|p| std::array::from_fn(|c| (p[c] - src.mean[c]) * scale[c] + target.mean[c]))
        .collect()
}

pub fn stain_transfer(image: &ImagePatch, target: &LabStats) -> ImagePatch {
    let lab = transfer_lab(&to_lab(image), target);
    let pixels: Vec<f32> = lab
        .iter()
        .flat_map(|&p| lab_to_rgb(p).map(|v| v.clamp(0.0, 1.0) as f32))
        .collect();
    ImagePatch::new(image.id.clone(), image.height(), image.width(), pixels)
        .expect("clipped transfer keeps invariants")
}

/// Color-statistics resampling augmentation; deterministic in `seed`.
pub fn stain_augment(image: &ImagePatch, seed: u64, ranges: &StainRanges) -> ImagePatch {
    stain_transfer(image, &ranges.draw(seed))
}

pub fn stain_normalize(image: &ImagePatch) -> ImagePatch {
    stain_transfer(image, &REFERENCE_STAIN)
}

/// Smooth value noise in `[0, 1]` on a lattice of spacing `cell`.
fn value_noise(h: usize, w: usize, cell: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / cell;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let a = lattice[iy * gw + ix];
            let b = lattice[iy * gw + ix + 1];
            let c = lattice[(iy + 1) * gw + ix];
            let d = lattice[(iy + 1) * gw + ix + 1];
            out.push((a * (1.0 - tx) + b * tx) * (1.0 - ty) + (c * (1.0 - tx) + d * tx) * ty);
        }
    }
    out
}

/// Deterministic H&E-like texture: stroma with fibres, dense nuclei with
/// chromatin speckle, and fine grain. Rich in high frequencies.
pub fn procedural_tissue(id: impl Into<String>, h: usize, w: usize, seed: u64) -> Result<ImagePatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stroma = [0.93, 0.66, 0.78];
    let pale = [0.98, 0.90, 0.94];
    let fibre = [0.86, 0.45, 0.64];
    let nucleus = [0.30, 0.18, 0.50];

    let coarse = value_noise(h, w, 18.0, &mut rng);
    let medium = value_noise(h, w, 6.0, &mut rng);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let freq: f64 = rng.gen_range(0.18..0.32);
    let (ca, sa) = (angle.cos(), angle.sin());

    let mut img = vec![[0.0f64; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = (0.6 * coarse[i] + 0.4 * medium[i]).clamp(0.0, 1.0);
            let phase = (x as f64 * ca + y as f64 * sa) * freq * std::f64::consts::TAU
                + 3.0 * medium[i];
            let f = (0.5 + 0.5 * phase.sin()).powi(3) * (0.4 + 0.6 * coarse[i]);
            for c in 0..3 {
                let base = stroma[c] * (1.0 - m) + pale[c] * m;
                img[i][c] = base * (1.0 - f) + fibre[c] * f;
            }
        }
    }

    let area = (h * w) as f64;
    let n_nuclei = (area / 90.0 * rng.gen_range(0.6..1.2)) as usize;
    for _ in 0..n_nuclei {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let ry: f64 = rng.gen_range(1.8..4.5);
        let rx = ry * rng.gen_range(0.6..1.4);
        let th: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let darkness = rng.gen_range(0.7..1.0);
        let (ct, st) = (th.cos(), th.sin());
        let reach = rx.max(ry) + 1.5;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(h - 1);
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let u = (dx * ct + dy * st) / rx;
                let v = (-dx * st + dy * ct) / ry;
                let r = (u * u + v * v).sqrt();
                // one-pixel soft rim
                let cover = ((1.0 - r) * rx.min(ry) + 0.5).clamp(0.0, 1.0);
                if cover <= 0.0 {
                    continue;
                }
                let speckle = 0.75 + 0.5 * rng.gen::<f64>();
                let i = y * w + x;
                for c in 0..3 {
                    let target = (nucleus[c] * speckle).min(1.0);
                    let a = cover * darkness;
                    img[i][c] = img[i][c] * (1.0 - a) + target * a;
                }
            }
        }
    }

    let pixels: Vec<f32> = img
        .iter()
        .flat_map(|p| {
            let g = rng.gen_range(-0.02..0.02);
            p.map(|v| (v + g) as f32)
        })
        .collect();
    ImagePatch::from_clipped(id, h, w, pixels)
}

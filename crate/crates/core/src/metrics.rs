//! Distortion (PSNR, SSIM) and perceptual-proxy metrics, and slide-level
//! dataset evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoders::{Encoder, PathologyPrompt};
use crate::error::{dim_err, Error, Result};
use crate::image::{load_image, ImagePatch};
use crate::manifest::{read_image_records, ImageRecord};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(a: &ImagePatch, b: &ImagePatch) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(dim_err!("images {:?} and {:?} differ in size", a.dims(), b.dims()));
    }
    Ok(())
}

pub fn mse(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    check_same(a, b)?;
    let s: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(s / a.pixels().len() as f64)
}

/// `10 log10(1 / MSE)` with peak 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" filtering of a row-major `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            tmp[y * ow + xo] = k.iter().enumerate().map(|(t, kv)| kv * x[y * w + xo + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = k.iter().enumerate().map(|(t, kv)| kv * tmp[(yo + t) * ow + xo]).sum();
        }
    }
    out
}

/// Single-scale SSIM: Gaussian window over fully contained positions, per
/// channel, averaged.
pub fn ssim(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(dim_err!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"));
    }
    let k = ssim_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = a.channel(ch).iter().map(|v| *v as f64).collect();
        let y: Vec<f64> = b.channel(ch).iter().map(|v| *v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &k));
        let mut s = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            s += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += s / mx.len() as f64;
    }
    Ok(total / 3.0)
}

/// Mean over tokens of the squared distance between unit-normalized tokens.
pub fn token_distance(a: &PathologyPrompt, b: &PathologyPrompt) -> Result<f64> {
    let ta: Vec<f64> = a.token_values()?.into_iter().map(f64::from).collect();
    let tb: Vec<f64> = b.token_values()?.into_iter().map(f64::from).collect();
    if ta.len() != tb.len() || a.dim() != b.dim() {
        return Err(dim_err!(
            "token sets {}x{} and {}x{} differ",
            a.num_tokens(),
            a.dim(),
            b.num_tokens(),
            b.dim()
        ));
    }
    let d = a.dim();
    let unit = |v: &[f64]| -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| x / n).collect()
    };
    let mut total = 0.0;
    for (ra, rb) in ta.chunks(d).zip(tb.chunks(d)) {
        let (ua, ub) = (unit(ra), unit(rb));
        total += ua.iter().zip(&ub).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(total / a.num_tokens() as f64)
}

/// Plugin point for perceptual distances (e.g. an external LPIPS scorer).
pub trait PerceptualScorer: Send + Sync {
    fn name(&self) -> String;
    fn distance(&self, a: &ImagePatch, b: &ImagePatch) -> Result<f64>;
}

/// Feature-space distance under a frozen encoder.
pub struct EncoderProxy {
    pub encoder: Arc<dyn Encoder>,
}

impl PerceptualScorer for EncoderProxy {
    fn name(&self) -> String {
        format!("proxy:{}", self.encoder.spec().name)
    }

    fn distance(&self, a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
        check_same(a, b)?;
        token_distance(&self.encoder.encode(a)?, &self.encoder.encode(b)?)
    }
}

pub fn perceptual_proxy(a: &ImagePatch, b: &ImagePatch, encoder: Arc<dyn Encoder>) -> Result<f64> {
    EncoderProxy { encoder }.distance(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub scorer: String,
    pub per_slide: BTreeMap<String, MetricTriple>,
}

pub fn score_pair(pred: &ImagePatch, reference: &ImagePatch, scorer: &dyn PerceptualScorer) -> Result<MetricTriple> {
    Ok(MetricTriple {
        psnr: psnr(pred, reference)?,
        ssim: ssim(pred, reference)?,
        perceptual: scorer.distance(pred, reference)?,
    })
}

/// Scores `(slide, prediction, reference)` and averages across slides.
pub fn evaluate_slides(slides: &[(String, ImagePatch, ImagePatch)], scorer: &dyn PerceptualScorer) -> Result<MetricReport> {
    if slides.is_empty() {
        return Err(Error::Validation("nothing to evaluate".into()));
    }
    let mut per_slide = BTreeMap::new();
    for (id, pred, reference) in slides {
        per_slide.insert(id.clone(), score_pair(pred, reference, scorer)?);
    }
    let n = per_slide.len() as f64;
    let mean = |f: fn(&MetricTriple) -> f64| per_slide.values().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        psnr: mean(|m| m.psnr),
        ssim: mean(|m| m.ssim),
        perceptual: mean(|m| m.perceptual),
        scorer: scorer.name(),
        per_slide,
    })
}

/// Pastes placed images onto a canvas covering all of them; overlaps average.
pub fn assemble_slide(id: &str, parts: &[(usize, usize, ImagePatch)]) -> Result<ImagePatch> {
    let h = parts.iter().map(|(r, _, im)| r + im.height()).max().unwrap_or(0);
    let w = parts.iter().map(|(_, c, im)| c + im.width()).max().unwrap_or(0);
    let mut acc = vec![0.0f64; h * w * 3];
    let mut count = vec![0u32; h * w];
    for (r0, c0, im) in parts {
        for r in 0..im.height() {
            for c in 0..im.width() {
                let o = (r0 + r) * w + c0 + c;
                count[o] += 1;
                for ch in 0..3 {
                    acc[o * 3 + ch] += im.get(r, c, ch) as f64;
                }
            }
        }
    }
    if let Some(pos) = count.iter().position(|&n| n == 0) {
        return Err(Error::Coverage {
            row: pos / w.max(1),
            col: pos % w.max(1),
        });
    }
    let px = acc
        .iter()
        .enumerate()
        .map(|(i, v)| (*v / count[i / 3] as f64) as f32)
        .collect();
    ImagePatch::new(id, h, w, px)
}

fn group(records: &[ImageRecord], by_slide: bool) -> Result<BTreeMap<String, Vec<(usize, usize, ImagePatch)>>> {
    let mut out: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for r in records {
        let im = load_image(&r.path)?;
        if by_slide {
            out.entry(r.slide_id().to_string()).or_default().push((r.row, r.col, im));
        } else {
            out.entry(r.id.clone()).or_default().push((0, 0, im));
        }
    }
    Ok(out)
}

/// Matches predictions to references by id, stitches each slide (or keeps
/// images separate), scores, and averages across slides.
pub fn evaluate_dataset(
    predictions: impl AsRef<Path>,
    references: impl AsRef<Path>,
    group_by_slide: bool,
    scorer: &dyn PerceptualScorer,
) -> Result<MetricReport> {
    let preds = read_image_records(predictions)?;
    let refs = read_image_records(references)?;
    let ref_ids: BTreeMap<&str, &ImageRecord> = refs.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut matched = Vec::with_capacity(preds.len());
    for p in &preds {
        let r = ref_ids
            .get(p.id.as_str())
            .ok_or_else(|| Error::Validation(format!("prediction `{}` has no reference", p.id)))?;
        // placement comes from the reference so both sides assemble alike
        matched.push(ImageRecord {
            path: p.path.clone(),
            ..(*r).clone()
        });
    }
    let pred_ids: std::collections::BTreeSet<&str> = preds.iter().map(|p| p.id.as_str()).collect();
    if let Some(r) = refs.iter().find(|r| !pred_ids.contains(r.id.as_str())) {
        return Err(Error::Validation(format!("reference `{}` has no prediction", r.id)));
    }
    let gp = group(&matched, group_by_slide)?;
    let gr = group(&refs, group_by_slide)?;
    let mut slides = Vec::with_capacity(gp.len());
    for (id, parts) in &gp {
        slides.push((id.clone(), assemble_slide(id, parts)?, assemble_slide(id, &gr[id])?));
    }
    evaluate_slides(&slides, scorer)
}

/// Aligned text table and a line-delimited JSON record file.
pub fn write_report(report: &MetricReport, table_path: impl AsRef<Path>, records_path: impl AsRef<Path>) -> Result<()> {
    let mut table = format!("{:<24} {:>9} {:>8} {:>11}\n", "slide", "psnr", "ssim", "perceptual");
    for (id, m) in &report.per_slide {
        let _ = writeln!(table, "{id:<24} {:>9.3} {:>8.4} {:>11.5}", m.psnr, m.ssim, m.perceptual);
    }
    let _ = writeln!(
        table,
        "{:<24} {:>9.3} {:>8.4} {:>11.5}",
        "mean", report.psnr, report.ssim, report.perceptual
    );
    let mut records = String::new();
    for (id, m) in &report.per_slide {
        let line = serde_json::json!({"slide": id, "psnr": m.psnr, "ssim": m.ssim, "perceptual": m.perceptual});
        let _ = writeln!(records, "{line}");
    }
    let line = serde_json::json!({"slide": "mean", "psnr": report.psnr, "ssim": report.ssim,
        "perceptual": report.perceptual, "scorer": report.scorer});
    let _ = writeln!(records, "{line}");
    for (path, text) in [(table_path.as_ref(), table), (records_path.as_ref(), records)] {
        crate::image::ensure_parent(path)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

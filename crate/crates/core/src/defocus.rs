//! Multi-task defocus estimator: a stride-32 residual CNN that regresses the
//! signed focal distance and the CTF value of a patch. Its last feature map
//! is the defocus prompt.

use candle_core::{DType, Module, Tensor, D};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::degrade::{
    procedural_tissue, stain_augment, stain_normalize, synth_focal_stack, DefocusLabel, OpticsParams, StainRanges,
};
use crate::error::{dim_err, Error, Result};
use crate::image::ImagePatch;
use crate::nn::{resize_bilinear, Adam, Conv2d, GroupNorm, Linear, StepLr, VarStore};

pub const STRIDE: usize = 32;

/// Which terms of the loss are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefocusTargets {
    Distance,
    Ctf,
    CtfDistance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefocusConfig {
    pub stem_width: usize,
    /// Output widths of the four stride-2 stages.
    pub widths: [usize; 4],
    pub targets: DefocusTargets,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_gamma: f64,
    pub stain_augment: bool,
    pub seed: u64,
}

impl Default for DefocusConfig {
    fn default() -> Self {
        Self {
            stem_width: 16,
            widths: [16, 32, 64, 64],
            targets: DefocusTargets::CtfDistance,
            epochs: 100,
            batch_size: 16,
            lr: 1e-4,
            lr_gamma: 0.95,
            stain_augment: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DefocusPrompt {
    /// `(C_d, H/32, W/32)`.
    pub features: Tensor,
    pub source_hw: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefocusEstimate {
    pub d_hat: f64,
    pub c_hat: f64,
}

impl DefocusEstimate {
    /// CTF clipped into `(0, 1]` for reporting.
    pub fn c_reported(&self) -> f64 {
        self.c_hat.clamp(1e-6, 1.0)
    }
}

/// `|d - d_hat| + |c - c_hat|`.
pub fn defocus_loss(pred: &DefocusEstimate, gt: &DefocusLabel) -> f64 {
    (gt.d - pred.d_hat).abs() + (gt.c - pred.c_hat).abs()
}

/// Batch mean of [`defocus_loss`].
pub fn defocus_loss_batch(preds: &[DefocusEstimate], gts: &[DefocusLabel]) -> f64 {
    let n = preds.len().min(gts.len()).max(1);
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| defocus_loss(p, g))
        .sum::<f64>()
        / n as f64
}

/// Tensor form on `(B, 2)` predictions and targets; only the selected terms
/// contribute.
pub fn defocus_loss_tensor(pred: &Tensor, target: &Tensor, targets: DefocusTargets) -> Result<Tensor> {
    let abs = (pred - target)?.abs()?;
    let per = match targets {
        DefocusTargets::CtfDistance => abs.sum(1)?,
        DefocusTargets::Distance => abs.narrow(1, 0, 1)?.squeeze(1)?,
        DefocusTargets::Ctf => abs.narrow(1, 1, 1)?.squeeze(1)?,
    };
    Ok(per.mean_all()?)
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    skip: Conv2d,
}

fn groups_for(c: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1)
}

impl ResBlock {
    fn new(vs: &VarStore, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&vs.pp("conv1"), c_in, c_out, 3, 2, false)?,
            norm1: GroupNorm::new(&vs.pp("norm1"), groups_for(c_out), c_out)?,
            conv2: Conv2d::new(&vs.pp("conv2"), c_out, c_out, 3, 1, false)?,
            norm2: GroupNorm::new(&vs.pp("norm2"), groups_for(c_out), c_out)?,
            skip: Conv2d::new(&vs.pp("skip"), c_in, c_out, 1, 2, false)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        Ok((h + self.skip.forward(x)?)?.relu()?)
    }
}

pub struct DefocusEstimator {
    pub vs: VarStore,
    pub config: DefocusConfig,
    stem: Conv2d,
    stages: Vec<ResBlock>,
    /// Row 0 predicts distance, row 1 predicts CTF.
    pub head: Linear,
}

impl DefocusEstimator {
    pub fn new(vs: VarStore, config: DefocusConfig) -> Result<Self> {
        let stem = Conv2d::new(&vs.pp("stem"), 3, config.stem_width, 3, 2, true)?;
        let mut stages = Vec::with_capacity(4);
        let mut c = config.stem_width;
        for (i, &w) in config.widths.iter().enumerate() {
            stages.push(ResBlock::new(&vs.pp(format!("stage{i}")), c, w)?);
            c = w;
        }
        let head = Linear::new(&vs.pp("head"), c, 2, true)?;
        Ok(Self {
            vs,
            config,
            stem,
            stages,
            head,
        })
    }

    pub fn prompt_channels(&self) -> usize {
        self.config.widths[3]
    }

    /// `(B, 3, H, W)` in `[0, 1]` -> (features `(B, C_d, H/32, W/32)`, `(B, 2)`).
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = x.dims4()?;
        if h % STRIDE != 0 || w % STRIDE != 0 {
            return Err(dim_err!("defocus estimator needs dims divisible by {STRIDE}, got {h}x{w}"));
        }
        let mut f = self.stem.forward(&((x - 0.5)? * 4.0)?)?.relu()?;
        for s in &self.stages {
            f = s.forward(&f)?;
        }
        let pooled = f.mean(D::Minus1)?.mean(D::Minus1)?;
        let out = self.head.forward(&pooled)?;
        Ok((f, out))
    }

    fn prepare(&self, image: &ImagePatch, apply_stain_norm: bool) -> ImagePatch {
        if apply_stain_norm {
            stain_normalize(image)
        } else {
            image.clone()
        }
    }

    pub fn estimate(&self, image: &ImagePatch, apply_stain_norm: bool) -> Result<(DefocusEstimate, DefocusPrompt)> {
        let mut v = self.estimate_batch(&[image], apply_stain_norm)?;
        Ok(v.remove(0))
    }

    pub fn estimate_batch(&self, images: &[&ImagePatch], apply_stain_norm: bool) -> Result<Vec<(DefocusEstimate, DefocusPrompt)>> {
        let prepared: Vec<ImagePatch> = images.iter().map(|im| self.prepare(im, apply_stain_norm)).collect();
        let refs: Vec<&ImagePatch> = prepared.iter().collect();
        let x = ImagePatch::batch_to_tensor(&refs, self.vs.dtype())?;
        let (feat, out) = self.forward(&x)?;
        let out = out.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let feat = feat.detach();
        images
            .iter()
            .enumerate()
            .map(|(i, im)| {
                Ok((
                    DefocusEstimate {
                        d_hat: out[i][0],
                        c_hat: out[i][1],
                    },
                    DefocusPrompt {
                        features: feat.get(i)?,
                        source_hw: im.dims(),
                    },
                ))
            })
            .collect()
    }

    /// The distance row of the head as a `(weights, bias)` pair.
    pub fn distance_head(&self) -> Result<(Vec<f64>, f64)> {
        let w = self.head.weight.get(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let b = match &self.head.bias {
            Some(b) => b.to_dtype(DType::F64)?.to_vec1::<f64>()?[0],
            None => 0.0,
        };
        Ok((w, b))
    }

    /// The CTF row of the head as a `(weights, bias)` pair.
    pub fn ctf_head(&self) -> Result<(Vec<f64>, f64)> {
        let w = self.head.weight.get(1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let b = match &self.head.bias {
            Some(b) => b.to_dtype(DType::F64)?.to_vec1::<f64>()?[1],
            None => 0.0,
        };
        Ok((w, b))
    }
}

/// Applies a `C_d -> 1` linear map at every location of the prompt, resizes
/// bilinearly to the source size and takes the absolute value.
/// Returns a row-major `H x W` map.
pub fn defocus_heatmap(prompt: &DefocusPrompt, head: &(Vec<f64>, f64)) -> Result<Vec<f32>> {
    let (c, hd, wd) = prompt.features.dims3()?;
    if head.0.len() != c {
        return Err(dim_err!("distance head has {} inputs, prompt has {c} channels", head.0.len()));
    }
    let w = Tensor::from_vec(head.0.clone(), (1, c, 1, 1), prompt.features.device())?;
    let f = prompt.features.to_dtype(DType::F64)?.unsqueeze(0)?;
    let map = (f.broadcast_mul(&w)?.sum_keepdim(1)? + head.1)?;
    debug_assert_eq!(map.dims(), &[1, 1, hd, wd]);
    let (h, wt) = prompt.source_hw;
    let up = resize_bilinear(&map, h, wt)?.abs()?;
    Ok(up.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

#[derive(Debug, Clone)]
pub struct DefocusSample {
    pub image: ImagePatch,
    pub label: DefocusLabel,
}

/// Recipe for labelled synthetic patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefocusDataConfig {
    pub patch_size: usize,
    /// Offsets are drawn uniformly from the integers in `[-max_offset, max_offset]`.
    pub max_offset: i64,
    /// Left-to-right defocus change across a patch. Its fixed sign is what
    /// makes the sign of `d` observable from a symmetric PSF.
    pub tilt: f64,
}

impl Default for DefocusDataConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            max_offset: 6,
            tilt: 1.0,
        }
    }
}

/// `n` tilted patches labelled with the defocus at their center.
pub fn synth_defocus_dataset(n: usize, data: &DefocusDataConfig, params: &OpticsParams, seed: u64) -> Result<Vec<DefocusSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let offset = rng.gen_range(-data.max_offset..=data.max_offset) as f64;
            let tissue_seed: u64 = rng.gen();
            let sharp = procedural_tissue(format!("dz{i:05}"), data.patch_size, data.patch_size, tissue_seed)?;
            let (stack, _) = synth_focal_stack(&sharp, &[offset], params, Some(data.tilt), 0.8)?;
            let image = stack.planes.into_iter().next().expect("one plane").1;
            Ok(DefocusSample {
                image,
                label: DefocusLabel::from_distance(offset, params),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
}

/// Sample order for an epoch: a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

pub fn labels_tensor(labels: &[DefocusLabel], dtype: DType) -> Result<Tensor> {
    let flat: Vec<f64> = labels.iter().flat_map(|l| [l.d, l.c]).collect();
    Ok(Tensor::from_vec(flat, (labels.len(), 2), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Optimizes the multi-task L1 loss with Adam and per-epoch step decay.
/// `on_epoch` receives `(epoch, mean loss)`.
pub fn train_defocus(
    model: &DefocusEstimator,
    samples: &[DefocusSample],
    fingerprint: &str,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(Checkpoint, TrainHistory)> {
    if samples.is_empty() {
        return Err(Error::Validation("defocus training set is empty".into()));
    }
    let cfg = &model.config;
    let sched = StepLr {
        base: cfg.lr,
        gamma: cfg.lr_gamma,
        step_size: 1,
    };
    let mut opt = Adam::new(model.vs.trainable(), cfg.lr)?;
    let ranges = StainRanges::default();
    let dtype = model.vs.dtype();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        opt.lr = sched.lr(epoch);
        let order = epoch_order(samples.len(), cfg.seed, epoch);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let images: Vec<ImagePatch> = chunk
                .iter()
                .map(|&i| {
                    if cfg.stain_augment {
                        let s = cfg.seed.wrapping_mul(1_000_003) ^ ((epoch * samples.len() + i) as u64);
                        stain_augment(&samples[i].image, s, &ranges)
                    } else {
                        samples[i].image.clone()
                    }
                })
                .collect();
            let refs: Vec<&ImagePatch> = images.iter().collect();
            let x = ImagePatch::batch_to_tensor(&refs, dtype)?;
            let labels: Vec<DefocusLabel> = chunk.iter().map(|&i| samples[i].label).collect();
            let y = labels_tensor(&labels, dtype)?;
            let (_, pred) = model.forward(&x)?;
            let loss = defocus_loss_tensor(&pred, &y, cfg.targets)?;
            total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
            opt.backward_step(&loss)?;
        }
        let mean = total / samples.len() as f64;
        history.epoch_loss.push(mean);
        on_epoch(epoch, mean);
    }
    let mut ck = Checkpoint::new("defocus", fingerprint)
        .with_params(&model.vs)
        .with_optimizer(&opt);
    ck.epoch = cfg.epochs as u64;
    ck.step = opt.step;
    ck.metadata = serde_json::json!({
        "config": cfg,
        "epoch_loss": history.epoch_loss,
    });
    Ok((ck, history))
}

/// Mean absolute errors and z-accuracy (`round(d_hat) == d`) on labelled patches.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DefocusEval {
    pub mae_distance: f64,
    pub mae_ctf: f64,
    pub z_accuracy: f64,
}

pub fn evaluate_defocus(model: &DefocusEstimator, samples: &[DefocusSample], batch: usize) -> Result<DefocusEval> {
    let mut ad = 0.0;
    let mut ac = 0.0;
    let mut hits = 0usize;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&ImagePatch> = chunk.iter().map(|s| &s.image).collect();
        let est = model.estimate_batch(&refs, false)?;
        for (s, (e, _)) in chunk.iter().zip(est) {
            ad += (e.d_hat - s.label.d).abs();
            ac += (e.c_reported() - s.label.c).abs();
            if (e.d_hat.round() - s.label.d).abs() < 1e-9 {
                hits += 1;
            }
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(DefocusEval {
        mae_distance: ad / n,
        mae_ctf: ac / n,
        z_accuracy: hits as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use candle_core::{Device, Var};

    fn small() -> DefocusConfig {
        DefocusConfig {
            stem_width: 8,
            widths: [8, 8, 16, 16],
            ..Default::default()
        }
    }

    #[test]
    fn loss_examples() {
        let gt = DefocusLabel { d: 1.0, c: 0.5 };
        assert_eq!(defocus_loss(&DefocusEstimate { d_hat: 1.0, c_hat: 0.5 }, &gt), 0.0);
        let p2 = DefocusEstimate { d_hat: 2.0, c_hat: 0.3 };
        assert!((defocus_loss(&p2, &gt) - 1.2).abs() < 1e-12);
        let batch = defocus_loss_batch(&[DefocusEstimate { d_hat: 1.0, c_hat: 0.5 }, p2], &[gt, gt]);
        assert!((batch - 0.6).abs() < 1e-12);
    }

    #[test]
    fn tensor_loss_matches_scalar_loss() {
        let pred = Tensor::new(&[[1.0f64, 0.5], [2.0, 0.3]], &Device::Cpu).unwrap();
        let gt = labels_tensor(&[DefocusLabel { d: 1.0, c: 0.5 }; 2], DType::F64).unwrap();
        let l = defocus_loss_tensor(&pred, &gt, DefocusTargets::CtfDistance).unwrap();
        assert!((l.to_scalar::<f64>().unwrap() - 0.6).abs() < 1e-12);
        let ld = defocus_loss_tensor(&pred, &gt, DefocusTargets::Distance).unwrap();
        assert!((ld.to_scalar::<f64>().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_is_sign_of_residual() {
        let pred = Var::new(&[[1.7f64, 0.2], [-0.4, 0.9]], &Device::Cpu).unwrap();
        let gt = labels_tensor(&[DefocusLabel { d: 1.0, c: 0.5 }, DefocusLabel { d: 0.3, c: 0.1 }], DType::F64).unwrap();
        let vars = vec![("pred".to_string(), pred.clone())];
        let report = check_gradients(
            &vars,
            || defocus_loss_tensor(pred.as_tensor(), &gt, DefocusTargets::CtfDistance),
            4,
            1e-6,
            0,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
        let g = defocus_loss_tensor(pred.as_tensor(), &gt, DefocusTargets::CtfDistance)
            .unwrap()
            .backward()
            .unwrap();
        let g = g.get(pred.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
        // batch mean of two samples: each entry is sign(residual) / 2
        assert_eq!(g, vec![vec![0.5, -0.5], vec![-0.5, 0.5]]);
    }

    #[test]
    fn prompt_is_one_thirty_second() {
        let m = DefocusEstimator::new(VarStore::new(DType::F32, 0), small()).unwrap();
        let im = procedural_tissue("a", 256, 256, 1).unwrap();
        let (_, p) = m.estimate(&im, false).unwrap();
        assert_eq!(p.features.dims(), &[16, 8, 8]);
        assert_eq!(p.source_hw, (256, 256));
    }

    #[test]
    fn non_divisible_input_rejected() {
        let m = DefocusEstimator::new(VarStore::new(DType::F32, 0), small()).unwrap();
        let im = procedural_tissue("a", 48, 64, 1).unwrap();
        assert!(matches!(m.estimate(&im, false), Err(Error::Dimension(_))));
    }

    #[test]
    fn estimate_is_deterministic() {
        let m = DefocusEstimator::new(VarStore::new(DType::F32, 0), small()).unwrap();
        let im = procedural_tissue("a", 64, 64, 1).unwrap();
        let (a, pa) = m.estimate(&im, true).unwrap();
        let (b, pb) = m.estimate(&im, true).unwrap();
        assert_eq!(a, b);
        let fa = pa.features.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let fb = pb.features.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn zero_prompt_gives_zero_heat() {
        let p = DefocusPrompt {
            features: Tensor::zeros((4, 2, 3), DType::F32, &Device::Cpu).unwrap(),
            source_hw: (64, 96),
        };
        let heat = defocus_heatmap(&p, &(vec![0.3, -1.0, 2.0, 0.5], 0.0)).unwrap();
        assert_eq!(heat.len(), 64 * 96);
        assert!(heat.iter().all(|v| *v == 0.0));
        assert!(matches!(defocus_heatmap(&p, &(vec![1.0; 3], 0.0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn heat_is_nonnegative_for_random_prompts() {
        let p = DefocusPrompt {
            features: Tensor::randn(0f32, 1.0, (6, 3, 3), &Device::Cpu).unwrap(),
            source_hw: (96, 96),
        };
        let heat = defocus_heatmap(&p, &(vec![0.5, -0.2, 0.1, 0.9, -1.1, 0.3], -0.2)).unwrap();
        assert_eq!(heat.len(), 96 * 96);
        assert!(heat.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn empty_dataset_rejected() {
        let m = DefocusEstimator::new(VarStore::new(DType::F32, 0), small()).unwrap();
        assert!(matches!(train_defocus(&m, &[], "x", |_, _| {}), Err(Error::Validation(_))));
    }

    #[test]
    fn distance_only_and_multitask_both_train() {
        let p = OpticsParams::default();
        let samples: Vec<DefocusSample> = (0..4)
            .map(|i| DefocusSample {
                image: procedural_tissue("s", 64, 64, i).unwrap(),
                label: DefocusLabel::from_distance(i as f64 - 1.5, &p),
            })
            .collect();
        for targets in [DefocusTargets::Distance, DefocusTargets::Ctf, DefocusTargets::CtfDistance] {
            let cfg = DefocusConfig { targets, epochs: 2, batch_size: 2, ..small() };
            let m = DefocusEstimator::new(VarStore::new(DType::F32, 1), cfg).unwrap();
            let (ck, h) = train_defocus(&m, &samples, "fp", |_, _| {}).unwrap();
            assert_eq!(h.epoch_loss.len(), 2);
            assert_eq!(ck.epoch, 2);
        }
    }

    #[test]
    fn checkpoint_resume_reproduces_outputs() {
        let cfg = DefocusConfig { epochs: 1, batch_size: 2, ..small() };
        let p = OpticsParams::default();
        let samples: Vec<DefocusSample> = (0..2)
            .map(|i| DefocusSample {
                image: procedural_tissue("s", 64, 64, i).unwrap(),
                label: DefocusLabel::from_distance(i as f64, &p),
            })
            .collect();
        let m = DefocusEstimator::new(VarStore::new(DType::F32, 5), cfg.clone()).unwrap();
        let (ck, _) = train_defocus(&m, &samples, "fp", |_, _| {}).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        let m2 = DefocusEstimator::new(VarStore::new(DType::F32, 77), cfg).unwrap();
        back.load_params(&m2.vs).unwrap();
        let im = procedural_tissue("q", 64, 64, 42).unwrap();
        let (a, pa) = m.estimate(&im, false).unwrap();
        let (b, pb) = m2.estimate(&im, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            pa.features.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            pb.features.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }
}

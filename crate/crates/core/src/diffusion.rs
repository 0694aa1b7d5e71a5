//! Fine stage: residual-shift diffusion from the coarse output towards the
//! sharp image, a prompt-conditioned x0-predicting U-Net, and its sampler.

use candle_core::{DType, Device, Module, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::canny::EdgeMap;
use crate::checkpoint::Checkpoint;
use crate::defocus::{epoch_order, DefocusPrompt};
use crate::edge::{edge_tensor, EdgePromptNet, EDGE_CHANNELS};
use crate::encoders::PathologyPrompt;
use crate::error::{dim_err, Error, Result};
use crate::image::ImagePatch;
use crate::nn::{
    from_tokens, pixel_shuffle, timestep_embedding, to_tokens, Adam, Attention, Conv2d, GroupNorm, LayerNorm, Linear,
    VarStore, WarmupCosine,
};

/// `eta[0..=T]` with `eta[0] = 0`, `eta[T] = 1`; `alpha[t-1] = eta[t] - eta[t-1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub kappa: f64,
    pub eta: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kappa: f64,
    pub eta1: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            kappa: 2.0,
            eta1: 0.04,
        }
    }
}

/// Geometric schedule `eta[t] = eta1^((T - t) / (T - 1))`.
pub fn make_schedule(steps: usize, kappa: f64, eta1: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Parameter("diffusion needs at least one step".into()));
    }
    if !(eta1 > 0.0 && eta1 < 1.0) {
        return Err(Error::Parameter(format!("eta1 must lie in (0, 1), got {eta1}")));
    }
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::Parameter(format!("kappa must be > 0, got {kappa}")));
    }
    let mut eta = vec![0.0];
    if steps == 1 {
        eta.push(1.0);
    } else {
        let span = (steps - 1) as f64;
        eta.extend((1..=steps).map(|t| eta1.powf((steps - t) as f64 / span)));
    }
    let alpha = eta.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(DiffusionSchedule {
        steps,
        kappa,
        eta,
        alpha,
    })
}

impl DiffusionSchedule {
    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        make_schedule(c.steps, c.kappa, c.eta1)
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Standard deviation of `x_t` given `x0`.
    pub fn marginal_std(&self, t: usize) -> f64 {
        self.kappa * self.eta[t].sqrt()
    }

    /// `(mean coefficient on x_t, mean coefficient on x0, std)` of
    /// `q(x_{t-1} | x_t, x0)`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64, f64) {
        let (prev, cur, a) = (self.eta[t - 1], self.eta[t], self.alpha_at(t));
        (prev / cur, a / cur, self.kappa * (prev * a / cur).sqrt())
    }
}

fn check_t(t: usize, lo: usize, sched: &DiffusionSchedule) -> Result<()> {
    if t < lo || t > sched.steps {
        return Err(Error::Parameter(format!("timestep {t} outside {lo}..={}", sched.steps)));
    }
    Ok(())
}

/// `x_t = x0 + eta_t (i_lq - x0) + kappa sqrt(eta_t) noise`; `t = 0` gives `x0`.
pub fn forward_marginal(x0: &Tensor, i_lq: &Tensor, t: usize, noise: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    check_t(t, 0, sched)?;
    // convex form so that eta = 0 and eta = 1 reproduce the endpoints exactly
    let eta = sched.eta[t];
    let mean = ((x0 * (1.0 - eta))? + (i_lq * eta)?)?;
    Ok((mean + (noise * sched.marginal_std(t))?)?)
}

/// One reverse step: sample `x_{t-1}` from the Gaussian posterior with
/// `x0` replaced by the prediction. At `t = 1` the variance vanishes and
/// the result is `x0_hat`.
pub fn posterior_step(x_t: &Tensor, x0_hat: &Tensor, t: usize, noise: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    check_t(t, 1, sched)?;
    let (a, b, std) = sched.posterior_coefficients(t);
    let mean = ((x_t * a)? + (x0_hat * b)?)?;
    if std == 0.0 {
        return Ok(mean);
    }
    Ok((mean + (noise * std)?)?)
}

/// Standard normal tensor from a seeded stream.
pub fn gaussian_noise(shape: &[usize], rng: &mut ChaCha8Rng, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Channel width per resolution level.
    pub widths: Vec<usize>,
    pub groups: usize,
    pub heads: usize,
    /// Number of lowest-resolution levels with prompt cross-attention.
    pub attn_levels: usize,
    pub time_dim: usize,
    pub c_e: usize,
    pub d_p: usize,
    /// Feed raw `I_LQ` as an extra conditioning input.
    pub raw_lq_channel: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 64, 128],
            groups: 8,
            heads: 4,
            attn_levels: 2,
            time_dim: 64,
            c_e: EDGE_CHANNELS,
            d_p: 192,
            raw_lq_channel: false,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Parameter("denoiser needs at least one level".into()));
        }
        if self.attn_levels > self.widths.len() {
            return Err(Error::Parameter("attn_levels exceeds the number of levels".into()));
        }
        for w in &self.widths {
            if self.groups == 0 || w % self.groups != 0 || w % self.heads != 0 {
                return Err(Error::Parameter(format!(
                    "width {w} must be divisible by {} groups and {} heads",
                    self.groups, self.heads
                )));
            }
        }
        Ok(())
    }

    pub fn size_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    pub fn cond_channels(&self) -> usize {
        if self.raw_lq_channel {
            6
        } else {
            3
        }
    }
}

/// GN -> SiLU -> conv, time embedding added, GN -> SiLU -> conv, residual.
#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(vs: &VarStore, c_in: usize, c_out: usize, groups: usize, time_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&vs.pp("norm1"), groups, c_in)?,
            conv1: Conv2d::new(&vs.pp("conv1"), c_in, c_out, 3, 1, true)?,
            time: Linear::new(&vs.pp("time"), time_dim, c_out, true)?,
            norm2: GroupNorm::new(&vs.pp("norm2"), groups, c_out)?,
            conv2: Conv2d::new(&vs.pp("conv2"), c_out, c_out, 3, 1, true)?,
            skip: if c_in == c_out {
                None
            } else {
                Some(Conv2d::new(&vs.pp("skip"), c_in, c_out, 1, 1, false)?)
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time.forward(temb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((s + h)?)
    }
}

/// Pre-LN cross-attention of feature-map tokens over pathology tokens.
#[derive(Debug, Clone)]
pub struct PromptCrossAttention {
    norm: LayerNorm,
    pub attn: Attention,
}

impl PromptCrossAttention {
    pub fn new(vs: &VarStore, c: usize, d_p: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&vs.pp("norm"), c)?,
            attn: Attention::new(&vs.pp("attn"), c, d_p, heads)?,
        })
    }

    /// `x: (B, C, H, W)`, `p_p: (B, N, D_p)`.
    pub fn forward(&self, x: &Tensor, p_p: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let tok = to_tokens(x)?;
        let y = self.attn.forward(&self.norm.forward(&tok)?, p_p)?;
        Ok((x + from_tokens(&y, h, w)?)?)
    }
}

/// Shallow 3x3 conv over the conditioning stack, concatenated with `P_E` and
/// fused by a 1x1 conv.
#[derive(Debug, Clone)]
pub struct EdgeFusion {
    pub shallow: Conv2d,
    pub fuse: Conv2d,
}

impl EdgeFusion {
    pub fn new(vs: &VarStore, c_in: usize, c: usize, c_e: usize) -> Result<Self> {
        Ok(Self {
            shallow: Conv2d::new(&vs.pp("shallow"), c_in, c, 3, 1, true)?,
            fuse: Conv2d::new(&vs.pp("fuse"), c + c_e, c, 1, 1, true)?,
        })
    }

    pub fn forward(&self, stack: &Tensor, p_e: &Tensor) -> Result<Tensor> {
        let f = self.shallow.forward(stack)?;
        Ok(self.fuse.forward(&Tensor::cat(&[&f, p_e], 1)?)?)
    }
}

struct Level {
    block: ResBlock,
    attn: Option<PromptCrossAttention>,
}

impl Level {
    fn forward(&self, x: &Tensor, temb: &Tensor, p_p: &Tensor) -> Result<Tensor> {
        let h = self.block.forward(x, temb)?;
        match &self.attn {
            Some(a) => a.forward(&h, p_p),
            None => Ok(h),
        }
    }
}

/// Batched denoiser inputs. `cond` is `I'` (optionally followed by `I_LQ`).
pub struct DenoiserInputs<'a> {
    pub x_t: &'a Tensor,
    pub cond: &'a Tensor,
    pub t: &'a [usize],
    pub p_p: &'a Tensor,
    pub p_e: &'a Tensor,
}

/// U-shaped x0 predictor.
pub struct Denoiser {
    pub config: DenoiserConfig,
    time_mlp: (Linear, Linear),
    pub fusion: EdgeFusion,
    encoders: Vec<Level>,
    downs: Vec<Conv2d>,
    ups: Vec<Conv2d>,
    decoders: Vec<Level>,
    out_norm: GroupNorm,
    out: Conv2d,
}

impl Denoiser {
    pub fn new(vs: &VarStore, config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let l = c.widths.len();
        let td = c.time_dim;
        let with_attn = |i: usize| i + c.attn_levels >= l;
        let level = |vs: &VarStore, i: usize, c_in: usize| -> Result<Level> {
            Ok(Level {
                block: ResBlock::new(&vs.pp("block"), c_in, c.widths[i], c.groups, td)?,
                attn: if with_attn(i) {
                    Some(PromptCrossAttention::new(&vs.pp("xattn"), c.widths[i], c.d_p, c.heads)?)
                } else {
                    None
                },
            })
        };
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        let mut decoders = Vec::new();
        for i in 0..l {
            let c_in = if i == 0 { c.widths[0] } else { c.widths[i - 1] };
            encoders.push(level(&vs.pp(format!("enc{i}")), i, c_in)?);
            if i + 1 < l {
                downs.push(Conv2d::new(&vs.pp(format!("down{i}")), c.widths[i], c.widths[i], 3, 2, true)?);
                ups.push(Conv2d::new(&vs.pp(format!("up{i}")), c.widths[i + 1], 4 * c.widths[i], 3, 1, true)?);
                decoders.push(level(&vs.pp(format!("dec{i}")), i, 2 * c.widths[i])?);
            }
        }
        Ok(Self {
            time_mlp: (
                Linear::new(&vs.pp("time0"), td, td, true)?,
                Linear::new(&vs.pp("time1"), td, td, true)?,
            ),
            fusion: EdgeFusion::new(&vs.pp("fusion"), 3 + c.cond_channels(), c.widths[0], c.c_e)?,
            encoders,
            downs,
            ups,
            decoders,
            out_norm: GroupNorm::new(&vs.pp("out_norm"), c.groups, c.widths[0])?,
            out: Conv2d::zeros(&vs.pp("out"), c.widths[0], 3, 3, true)?,
            config,
        })
    }

    pub fn time_embedding(&self, t: &[usize], dtype: DType) -> Result<Tensor> {
        let raw: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let e = timestep_embedding(&raw, self.config.time_dim, dtype)?;
        Ok(self.time_mlp.1.forward(&self.time_mlp.0.forward(&e)?.silu()?)?)
    }

    /// `x0_hat = I' + residual` (unclipped).
    pub fn forward(&self, inp: &DenoiserInputs) -> Result<Tensor> {
        let (b, ch, h, w) = inp.x_t.dims4()?;
        let m = self.config.size_multiple();
        if ch != 3 || h % m != 0 || w % m != 0 {
            return Err(dim_err!("denoiser needs 3 channels and dims divisible by {m}, got {:?}", inp.x_t.dims()));
        }
        if inp.cond.dims() != [b, self.config.cond_channels(), h, w] {
            return Err(dim_err!("conditioning {:?} does not match x_t {:?}", inp.cond.dims(), inp.x_t.dims()));
        }
        if inp.p_e.dims() != [b, self.config.c_e, h, w] {
            return Err(dim_err!("edge prompt {:?} does not match x_t {:?}", inp.p_e.dims(), inp.x_t.dims()));
        }
        let (pb, _, pd) = inp.p_p.dims3()?;
        if pb != b || pd != self.config.d_p || inp.t.len() != b {
            return Err(dim_err!("prompt/timestep batch does not match x_t"));
        }
        let temb = self.time_embedding(inp.t, inp.x_t.dtype())?;
        let stack = Tensor::cat(&[inp.x_t, inp.cond], 1)?;
        let mut x = self.fusion.forward(&stack, inp.p_e)?;
        let last = self.encoders.len() - 1;
        let mut skips = Vec::new();
        for i in 0..last {
            x = self.encoders[i].forward(&x, &temb, inp.p_p)?;
            skips.push(x.clone());
            x = self.downs[i].forward(&x)?;
        }
        x = self.encoders[last].forward(&x, &temb, inp.p_p)?;
        for i in (0..last).rev() {
            let up = pixel_shuffle(&self.ups[i].forward(&x)?, 2)?;
            x = self.decoders[i].forward(&Tensor::cat(&[&up, &skips[i]], 1)?, &temb, inp.p_p)?;
        }
        let res = self.out.forward(&self.out_norm.forward(&x)?.silu()?)?;
        Ok((inp.cond.narrow(1, 0, 3)? + res)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PDiffusionConfig {
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub steps: u64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-timestep loss weights `w_1..w_T`; empty means all ones.
    pub loss_weights: Vec<f64>,
    pub seed: u64,
}

impl Default for PDiffusionConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            steps: 100_000,
            warmup_steps: 10_000,
            batch_size: 8,
            lr: 1e-4,
            loss_weights: Vec::new(),
            seed: 0,
        }
    }
}

/// Denoiser plus the learned edge-prompt layers it is trained with.
pub struct PDiffusion {
    pub vs: VarStore,
    pub config: PDiffusionConfig,
    pub schedule: DiffusionSchedule,
    pub edge: EdgePromptNet,
    pub denoiser: Denoiser,
}

impl PDiffusion {
    /// `c_d`: defocus-prompt channels; `ctf_head` seeds the confidence conv.
    pub fn new(vs: VarStore, config: PDiffusionConfig, c_d: usize, ctf_head: Option<&(Vec<f64>, f64)>) -> Result<Self> {
        let schedule = DiffusionSchedule::from_config(&config.schedule)?;
        if !config.loss_weights.is_empty() && config.loss_weights.len() != schedule.steps {
            return Err(Error::Parameter(format!(
                "{} loss weights for {} steps",
                config.loss_weights.len(),
                schedule.steps
            )));
        }
        let c_e = config.denoiser.c_e;
        let edge = match ctf_head {
            Some(h) => {
                if h.0.len() != c_d {
                    return Err(dim_err!("ctf head has {} inputs, prompt has {c_d} channels", h.0.len()));
                }
                EdgePromptNet::with_ctf_prior(&vs.pp("edge"), c_e, h)?
            }
            None => EdgePromptNet::new(&vs.pp("edge"), c_d, c_e)?,
        };
        let denoiser = Denoiser::new(&vs.pp("denoiser"), config.denoiser.clone())?;
        Ok(Self {
            vs,
            config,
            schedule,
            edge,
            denoiser,
        })
    }

    pub fn loss_weight(&self, t: usize) -> f64 {
        self.config.loss_weights.get(t - 1).copied().unwrap_or(1.0)
    }
}

/// One training or inference item; tensors are built per batch.
#[derive(Debug, Clone)]
pub struct DiffusionSample {
    pub hq: ImagePatch,
    pub coarse: ImagePatch,
    pub lq: ImagePatch,
    pub edges: EdgeMap,
    pub p_d: DefocusPrompt,
    pub p_p: PathologyPrompt,
}

/// Stacked tensors of a batch of [`DiffusionSample`].
pub struct DiffusionBatch {
    pub hq: Tensor,
    pub cond: Tensor,
    pub edges: Tensor,
    pub p_d: Tensor,
    pub p_p: Tensor,
}

impl DiffusionBatch {
    pub fn new(items: &[&DiffusionSample], raw_lq_channel: bool, dtype: DType) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Validation("empty diffusion batch".into()));
        }
        let coarse: Vec<&ImagePatch> = items.iter().map(|s| &s.coarse).collect();
        let hq: Vec<&ImagePatch> = items.iter().map(|s| &s.hq).collect();
        let mut cond = ImagePatch::batch_to_tensor(&coarse, dtype)?;
        if raw_lq_channel {
            let lq: Vec<&ImagePatch> = items.iter().map(|s| &s.lq).collect();
            cond = Tensor::cat(&[&cond, &ImagePatch::batch_to_tensor(&lq, dtype)?], 1)?;
        }
        let edges = Tensor::cat(&items.iter().map(|s| edge_tensor(&s.edges, dtype)).collect::<Result<Vec<_>>>()?, 0)?;
        let p_d = Tensor::stack(&items.iter().map(|s| s.p_d.features.to_dtype(dtype)).collect::<candle_core::Result<Vec<_>>>()?, 0)?;
        let p_p = Tensor::stack(&items.iter().map(|s| s.p_p.tokens.to_dtype(dtype)).collect::<candle_core::Result<Vec<_>>>()?, 0)?;
        Ok(Self {
            hq: ImagePatch::batch_to_tensor(&hq, dtype)?,
            cond,
            edges,
            p_d,
            p_p,
        })
    }
}

/// Weighted MSE between `f(x_t, ...)` and `I_HQ` for given timesteps and
/// noise; `x_t` is built around `I'` with the forward marginal.
pub fn diffusion_loss_with(model: &PDiffusion, batch: &DiffusionBatch, t: &[usize], noise: &Tensor) -> Result<Tensor> {
    let p_e = model.edge.forward(&batch.edges, &batch.p_d)?;
    let i_cond = batch.cond.narrow(1, 0, 3)?;
    let mut xs = Vec::with_capacity(t.len());
    for (i, &ti) in t.iter().enumerate() {
        xs.push(forward_marginal(&batch.hq.get(i)?, &i_cond.get(i)?, ti, &noise.get(i)?, &model.schedule)?);
    }
    let x_t = Tensor::stack(&xs, 0)?;
    let pred = model.denoiser.forward(&DenoiserInputs {
        x_t: &x_t,
        cond: &batch.cond,
        t,
        p_p: &batch.p_p,
        p_e: &p_e,
    })?;
    let per_item = (pred - &batch.hq)?.sqr()?.mean((1, 2, 3))?;
    let weights: Vec<f64> = t.iter().map(|&ti| model.loss_weight(ti)).collect();
    let wt = Tensor::from_vec(weights, t.len(), &Device::Cpu)?.to_dtype(per_item.dtype())?;
    Ok((per_item * wt)?.mean_all()?)
}

/// Draws `t ~ U{1..T}` per item and Gaussian noise from `rng`.
pub fn draw_timesteps_and_noise(
    rng: &mut ChaCha8Rng,
    n: usize,
    hw: (usize, usize),
    sched: &DiffusionSchedule,
    dtype: DType,
) -> Result<(Vec<usize>, Tensor)> {
    let u = Uniform::new_inclusive(1, sched.steps);
    let t: Vec<usize> = (0..n).map(|_| u.sample(rng)).collect();
    let noise = gaussian_noise(&[n, 3, hw.0, hw.1], rng, dtype)?;
    Ok((t, noise))
}

/// Seeded loss on a batch (timesteps and noise drawn from `seed`).
pub fn diffusion_loss(model: &PDiffusion, batch: &DiffusionBatch, seed: u64) -> Result<Tensor> {
    let (n, _, h, w) = batch.hq.dims4()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, noise) = draw_timesteps_and_noise(&mut rng, n, (h, w), &model.schedule, model.vs.dtype())?;
    diffusion_loss_with(model, batch, &t, &noise)
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DiffusionHistory {
    /// `(step, loss)` for each optimizer step taken in this call.
    pub losses: Vec<(u64, f64)>,
}

/// Adam with linear warmup and cosine decay. Batches, timesteps and noise
/// are functions of `(seed, step)`, so a run resumed from a checkpoint
/// continues exactly. `on_step(step, loss)` returns `false` to stop early.
pub fn train_pdiffusion(
    model: &PDiffusion,
    data: &[DiffusionSample],
    fingerprint: &str,
    resume: Option<&Checkpoint>,
    mut on_step: impl FnMut(u64, f64) -> bool,
) -> Result<(Checkpoint, DiffusionHistory)> {
    if data.is_empty() {
        return Err(Error::Validation("diffusion training set is empty".into()));
    }
    let cfg = &model.config;
    let dt = model.vs.dtype();
    let mut opt = Adam::new(model.vs.trainable(), cfg.lr)?;
    if let Some(ck) = resume {
        ck.load_params(&model.vs)?;
        ck.load_optimizer(&mut opt)?;
    }
    let sched = WarmupCosine {
        peak: cfg.lr,
        warmup: cfg.warmup_steps,
        total: cfg.steps,
    };
    let bs = cfg.batch_size.max(1);
    let per_epoch = data.len().div_ceil(bs);
    let mut hist = DiffusionHistory::default();
    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;
    while opt.step < cfg.steps {
        let k = opt.step;
        let epoch = k as usize / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(data.len(), cfg.seed, epoch);
            order_epoch = epoch;
        }
        let chunk = order.chunks(bs).nth(k as usize % per_epoch).unwrap_or(&[]);
        let items: Vec<&DiffusionSample> = chunk.iter().map(|&i| &data[i]).collect();
        let batch = DiffusionBatch::new(&items, cfg.denoiser.raw_lq_channel, dt)?;
        let loss = diffusion_loss(model, &batch, step_seed(cfg.seed, k))?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        opt.lr = sched.lr(k + 1);
        opt.backward_step(&loss)?;
        hist.losses.push((opt.step, value));
        if !on_step(opt.step, value) {
            break;
        }
    }
    let mut ck = Checkpoint::new("pdiffusion", fingerprint)
        .with_params(&model.vs)
        .with_optimizer(&opt);
    ck.step = opt.step;
    ck.metadata = serde_json::json!({ "config": cfg });
    Ok((ck, hist))
}

/// Reverse chain for a batch: `x_T = cond + kappa sqrt(eta_T) noise`, then
/// `T` posterior steps with `predict(x_t, t)` as the x0 estimate. Item `i`
/// draws all its noise from its own stream seeded by `seeds[i]`, so results
/// do not depend on batch composition. `on_step(t, x_{t-1})` observes the
/// chain. Returns the clipped `x_0`.
pub fn sample_chain(
    predict: &dyn Fn(&Tensor, usize) -> Result<Tensor>,
    cond: &Tensor,
    sched: &DiffusionSchedule,
    seeds: &[u64],
    mut on_step: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    let (b, c, h, w) = cond.dims4()?;
    if seeds.len() != b {
        return Err(dim_err!("{} seeds for a batch of {b}", seeds.len()));
    }
    let dt = cond.dtype();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let draw = |rngs: &mut Vec<ChaCha8Rng>| -> Result<Tensor> {
        let parts = rngs
            .iter_mut()
            .map(|r| gaussian_noise(&[1, c, h, w], r, dt))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    };
    let t_max = sched.steps;
    let mut x = (cond + (draw(&mut rngs)? * sched.marginal_std(t_max))?)?;
    for t in (1..=t_max).rev() {
        let x0_hat = predict(&x, t)?;
        let noise = draw(&mut rngs)?;
        x = posterior_step(&x, &x0_hat, t, &noise, sched)?;
        on_step(t, &x);
    }
    Ok(x.clamp(0.0, 1.0)?)
}

impl PDiffusion {
    /// Fine-stage restoration of a batch of samples (the `hq` field is
    /// ignored).
    pub fn sample_batch(
        &self,
        items: &[&DiffusionSample],
        seeds: &[u64],
        on_step: impl FnMut(usize, &Tensor),
    ) -> Result<Tensor> {
        let batch = DiffusionBatch::new(items, self.config.denoiser.raw_lq_channel, self.vs.dtype())?;
        let p_e = self.edge.forward(&batch.edges, &batch.p_d)?;
        let i_cond = batch.cond.narrow(1, 0, 3)?;
        let predict = |x_t: &Tensor, t: usize| -> Result<Tensor> {
            let ts = vec![t; items.len()];
            Ok(self
                .denoiser
                .forward(&DenoiserInputs {
                    x_t,
                    cond: &batch.cond,
                    t: &ts,
                    p_p: &batch.p_p,
                    p_e: &p_e,
                })?
                .detach())
        };
        sample_chain(&predict, &i_cond, &self.schedule, seeds, on_step)
    }

    pub fn sample(&self, item: &DiffusionSample, seed: u64, on_step: impl FnMut(usize, &Tensor)) -> Result<ImagePatch> {
        let out = self.sample_batch(&[item], &[seed], on_step)?;
        ImagePatch::from_tensor(item.coarse.id.clone(), &out.squeeze(0)?)
    }
}

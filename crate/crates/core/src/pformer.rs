//! Coarse restoration stage: a U-shaped transformer with transposed
//! (channel) attention whose gated feed-forward blocks mix depth-wise
//! convolution experts under a router conditioned on the pathology prompt.

use candle_core::{DType, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::defocus::epoch_order;
use crate::encoders::PathologyPrompt;
use crate::error::{dim_err, Error, Result};
use crate::image::ImagePatch;
use crate::nn::depthwise::depthwise3x3_per_sample;
use crate::nn::{
    gap, gelu, l2_normalize, pixel_shuffle, pixel_unshuffle, softmax_last, Adam, ChannelNorm, Conv2d, DepthwiseBank,
    Init, Linear, StepLr, VarStore,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PFormerConfig {
    pub levels: usize,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub heads: Vec<usize>,
    pub refinement_blocks: usize,
    pub ffn_expansion: f64,
    pub n_experts: usize,
    pub d_p: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_gamma: f64,
    pub seed: u64,
}

impl Default for PFormerConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            widths: vec![48, 96, 192, 384],
            blocks: vec![2, 3, 3, 4],
            heads: vec![1, 2, 4, 8],
            refinement_blocks: 0,
            ffn_expansion: 2.66,
            n_experts: 3,
            d_p: 192,
            epochs: 300,
            batch_size: 8,
            lr: 1e-4,
            lr_gamma: 0.98,
            seed: 0,
        }
    }
}

impl PFormerConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.levels;
        if l == 0 || self.widths.len() != l || self.blocks.len() != l || self.heads.len() != l {
            return Err(Error::Parameter(format!(
                "p-former needs {l} widths, blocks and heads (got {}, {}, {})",
                self.widths.len(),
                self.blocks.len(),
                self.heads.len()
            )));
        }
        if self.n_experts == 0 {
            return Err(Error::Parameter("n_experts must be >= 1".into()));
        }
        for (w, h) in self.widths.iter().zip(&self.heads) {
            if *h == 0 || w % h != 0 {
                return Err(Error::Parameter(format!("width {w} not divisible by {h} heads")));
            }
        }
        for w in &self.widths[1..] {
            if w % 4 != 0 {
                return Err(Error::Parameter(format!("width {w} must be divisible by 4 for pixel unshuffle")));
            }
        }
        if self.ffn_expansion <= 0.0 {
            return Err(Error::Parameter("ffn_expansion must be > 0".into()));
        }
        Ok(())
    }

    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Router weights for one block, a probability vector over experts.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterOutput {
    pub weights: Vec<f64>,
}

/// `softmax(Linear(concat(GAP(F), pooled P_P)))`, batched: `(B, n)`.
#[derive(Debug, Clone)]
pub struct Router {
    pub linear: Linear,
    pub channels: usize,
}

impl Router {
    pub fn new(vs: &VarStore, channels: usize, d_p: usize, n: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(vs, channels + d_p, n, true)?,
            channels,
        })
    }

    pub fn logits(&self, f: &Tensor, p_pooled: &Tensor) -> Result<Tensor> {
        let c = f.dim(1)?;
        if c != self.channels {
            return Err(dim_err!("router expects {} channels, got {c}", self.channels));
        }
        let z = Tensor::cat(&[&gap(f)?, p_pooled], 1)?;
        Ok(self.linear.forward(&z)?)
    }

    pub fn forward(&self, f: &Tensor, p_pooled: &Tensor) -> Result<Tensor> {
        softmax_last(&self.logits(f, p_pooled)?)
    }
}

/// Single-sample router evaluation.
pub fn router_weights(router: &Router, f: &Tensor, p_p: &PathologyPrompt) -> Result<RouterOutput> {
    let f = if f.rank() == 3 { f.unsqueeze(0)? } else { f.clone() };
    let p = p_p.pooled.to_dtype(f.dtype())?.unsqueeze(0)?;
    let w = router.forward(&f, &p)?.squeeze(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(RouterOutput { weights: w })
}

/// `F_o = E_0(F) + GeLU(sum_i w_i E_i(F))` with `expert_out: (B, n, C, H, W)`
/// and `weights: (B, n)`.
pub fn moe_combine(main: &Tensor, expert_out: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (b, n) = weights.dims2()?;
    let w = weights.reshape((b, n, 1, 1, 1))?;
    let mixed = expert_out.broadcast_mul(&w)?.sum(1)?;
    Ok((main + gelu(&mixed)?)?)
}

/// Gated-Dconv feed-forward with the DConv replaced by the prompt-routed expert mixture.
#[derive(Debug, Clone)]
pub struct MoeGdfn {
    pub project_in: Conv2d,
    /// `E_0`, the always-on depth-wise conv.
    pub main: DepthwiseBank,
    /// `E_1..E_n`.
    pub experts: DepthwiseBank,
    pub project_out: Conv2d,
    pub router: Router,
}

impl MoeGdfn {
    pub fn new(vs: &VarStore, c: usize, hidden: usize, n: usize, d_p: usize) -> Result<Self> {
        Ok(Self {
            project_in: Conv2d::new(&vs.pp("project_in"), c, 2 * hidden, 1, 1, false)?,
            main: DepthwiseBank::new(&vs.pp("main"), 1, 2 * hidden)?,
            experts: DepthwiseBank::new(&vs.pp("experts"), n, 2 * hidden)?,
            project_out: Conv2d::new(&vs.pp("project_out"), hidden, c, 1, 1, false)?,
            router: Router::new(&vs.pp("router"), c, d_p, n)?,
        })
    }

    /// `F_o` for expanded features `f: (B, C, H, W)` and weights `(B, n)`.
    /// Depth-wise convolution is linear in its kernel, so `sum_i w_i E_i(F)`
    /// is evaluated as one convolution with the per-sample kernel
    /// `sum_i w_i K_i`.
    pub fn mixture(&self, f: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = f.dims4()?;
        let n = self.experts.experts();
        let k = w.matmul(&self.experts.weight.reshape((n, c * 9))?)?.reshape((b, c, 9))?;
        let mixed = depthwise3x3_per_sample(f, &k)?;
        Ok((self.main.forward_single(f)? + gelu(&mixed)?)?)
    }

    /// `x`: normalized block features; `route_src`: features the router
    /// pools; returns the block output and the router weights `(B, n)`.
    pub fn forward(&self, x: &Tensor, route_src: &Tensor, p_pooled: &Tensor) -> Result<(Tensor, Tensor)> {
        let w = self.router.forward(route_src, p_pooled)?;
        let f = self.project_in.forward(x)?;
        let fo = self.mixture(&f, &w)?;
        let hidden = fo.dim(1)? / 2;
        let x1 = fo.narrow(1, 0, hidden)?;
        let x2 = fo.narrow(1, hidden, hidden)?;
        let y = self.project_out.forward(&(gelu(&x1)? * x2)?)?;
        Ok((y, w))
    }
}

/// Multi-Dconv head transposed attention: attention across channels.
#[derive(Debug, Clone)]
pub struct Mdta {
    qkv: Conv2d,
    qkv_dw: DepthwiseBank,
    project_out: Conv2d,
    temperature: Tensor,
    heads: usize,
}

impl Mdta {
    pub fn new(vs: &VarStore, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Conv2d::new(&vs.pp("qkv"), c, 3 * c, 1, 1, false)?,
            qkv_dw: DepthwiseBank::new(&vs.pp("qkv_dw"), 1, 3 * c)?,
            project_out: Conv2d::new(&vs.pp("project_out"), c, c, 1, 1, false)?,
            temperature: vs.var("temperature", &[heads, 1, 1], Init::Const(1.0))?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let qkv = self.qkv_dw.forward_single(&self.qkv.forward(x)?)?;
        let ch = c / self.heads;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv.narrow(1, i * c, c)?.reshape((b, self.heads, ch, h * w))?)
        };
        let q = l2_normalize(&split(0)?, 3)?;
        let k = l2_normalize(&split(1)?, 3)?;
        let v = split(2)?;
        let attn = q.matmul(&k.transpose(2, 3)?.contiguous()?)?.broadcast_mul(&self.temperature.unsqueeze(0)?)?;
        let attn = softmax_last(&attn)?;
        let out = attn.matmul(&v.contiguous()?)?.reshape((b, c, h, w))?;
        Ok(self.project_out.forward(&out)?)
    }
}

#[derive(Debug, Clone)]
pub struct PFormerBlock {
    norm1: ChannelNorm,
    attn: Mdta,
    norm2: ChannelNorm,
    pub ffn: MoeGdfn,
}

impl PFormerBlock {
    pub fn new(vs: &VarStore, c: usize, heads: usize, expansion: f64, n: usize, d_p: usize) -> Result<Self> {
        let hidden = ((c as f64 * expansion).round() as usize).max(1);
        Ok(Self {
            norm1: ChannelNorm::new(&vs.pp("norm1"), c)?,
            attn: Mdta::new(&vs.pp("attn"), c, heads)?,
            norm2: ChannelNorm::new(&vs.pp("norm2"), c)?,
            ffn: MoeGdfn::new(&vs.pp("ffn"), c, hidden, n, d_p)?,
        })
    }

    /// The router pools the block input, before the first normalization.
    pub fn forward(&self, x: &Tensor, p_pooled: &Tensor) -> Result<(Tensor, Tensor)> {
        let route_src = x.clone();
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let (y, w) = self.ffn.forward(&self.norm2.forward(&x)?, &route_src, p_pooled)?;
        Ok(((x + y)?, w))
    }
}

struct Level {
    blocks: Vec<PFormerBlock>,
}

impl Level {
    fn forward(&self, mut x: Tensor, p: &Tensor, weights: &mut Vec<Tensor>) -> Result<Tensor> {
        for b in &self.blocks {
            let (y, w) = b.forward(&x, p)?;
            weights.push(w);
            x = y;
        }
        Ok(x)
    }
}

pub struct PFormer {
    pub vs: VarStore,
    pub config: PFormerConfig,
    embed: Conv2d,
    encoders: Vec<Level>,
    downs: Vec<Conv2d>,
    ups: Vec<Conv2d>,
    fuses: Vec<Conv2d>,
    decoders: Vec<Level>,
    refinement: Level,
    output: Conv2d,
}

impl PFormer {
    pub fn new(vs: VarStore, config: PFormerConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let level = |vs: &VarStore, i: usize, count: usize| -> Result<Level> {
            Ok(Level {
                blocks: (0..count)
                    .map(|j| {
                        PFormerBlock::new(
                            &vs.pp(format!("b{j}")),
                            c.widths[i],
                            c.heads[i],
                            c.ffn_expansion,
                            c.n_experts,
                            c.d_p,
                        )
                    })
                    .collect::<Result<_>>()?,
            })
        };
        let embed = Conv2d::new(&vs.pp("embed"), 3, c.widths[0], 3, 1, false)?;
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        let mut decoders = Vec::new();
        for i in 0..c.levels {
            encoders.push(level(&vs.pp(format!("enc{i}")), i, c.blocks[i])?);
            if i + 1 < c.levels {
                downs.push(Conv2d::new(&vs.pp(format!("down{i}")), c.widths[i], c.widths[i + 1] / 4, 3, 1, false)?);
                ups.push(Conv2d::new(&vs.pp(format!("up{i}")), c.widths[i + 1], 4 * c.widths[i], 3, 1, false)?);
                fuses.push(Conv2d::new(&vs.pp(format!("fuse{i}")), 2 * c.widths[i], c.widths[i], 1, 1, false)?);
                decoders.push(level(&vs.pp(format!("dec{i}")), i, c.blocks[i])?);
            }
        }
        let refinement = level(&vs.pp("refine"), 0, c.refinement_blocks)?;
        let output = Conv2d::zeros(&vs.pp("output"), c.widths[0], 3, 3, false)?;
        Ok(Self {
            vs,
            config,
            embed,
            encoders,
            downs,
            ups,
            fuses,
            decoders,
            refinement,
            output,
        })
    }

    pub fn num_blocks(&self) -> usize {
        let c = &self.config;
        c.blocks.iter().sum::<usize>() + c.blocks[..c.levels - 1].iter().sum::<usize>() + c.refinement_blocks
    }

    /// `i_lq: (B, 3, H, W)`, `p_pooled: (B, D_p)` -> (`clip(i_lq + residual)`,
    /// router weights per block in execution order).
    pub fn forward(&self, i_lq: &Tensor, p_pooled: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (_, _, h, w) = i_lq.dims4()?;
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(dim_err!("p-former needs dims divisible by {m}, got {h}x{w}"));
        }
        if p_pooled.dim(1)? != self.config.d_p {
            return Err(dim_err!("prompt dim {}, p-former expects {}", p_pooled.dim(1)?, self.config.d_p));
        }
        let mut weights = Vec::with_capacity(self.num_blocks());
        let mut x = self.embed.forward(i_lq)?;
        let mut skips = Vec::new();
        let last = self.config.levels - 1;
        for i in 0..last {
            x = self.encoders[i].forward(x, p_pooled, &mut weights)?;
            skips.push(x.clone());
            x = pixel_unshuffle(&self.downs[i].forward(&x)?, 2)?;
        }
        x = self.encoders[last].forward(x, p_pooled, &mut weights)?;
        for i in (0..last).rev() {
            let up = pixel_shuffle(&self.ups[i].forward(&x)?, 2)?;
            x = self.fuses[i].forward(&Tensor::cat(&[&up, &skips[i]], 1)?)?;
            x = self.decoders[i].forward(x, p_pooled, &mut weights)?;
        }
        x = self.refinement.forward(x, p_pooled, &mut weights)?;
        let residual = self.output.forward(&x)?;
        Ok(((i_lq + residual)?.clamp(0.0, 1.0)?, weights))
    }

    /// Restores one patch (`I'`).
    pub fn restore(&self, i_lq: &ImagePatch, p_p: &PathologyPrompt) -> Result<ImagePatch> {
        let dt = self.vs.dtype();
        let x = i_lq.to_tensor(dt)?;
        let p = p_p.pooled.to_dtype(dt)?.unsqueeze(0)?;
        let (y, _) = self.forward(&x, &p)?;
        ImagePatch::from_tensor(i_lq.id.clone(), &y.squeeze(0)?)
    }
}

#[derive(Debug, Clone)]
pub struct PFormerSample {
    pub lq: ImagePatch,
    pub hq: ImagePatch,
    pub p_p: PathologyPrompt,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PFormerHistory {
    pub epoch_loss: Vec<f64>,
    /// `[epoch][block][expert]` mean router weight.
    pub utilization: Vec<Vec<Vec<f64>>>,
    pub steps: u64,
}

/// Pixel-L1 training with Adam and per-epoch step decay. `on_epoch` receives
/// `(epoch, mean loss, per-block expert utilization)` and returns `false` to
/// stop early.
pub fn train_pformer(
    model: &PFormer,
    data: &[PFormerSample],
    fingerprint: &str,
    mut on_epoch: impl FnMut(usize, f64, &[Vec<f64>]) -> bool,
) -> Result<(Checkpoint, PFormerHistory)> {
    if data.is_empty() {
        return Err(Error::Validation("p-former training set is empty".into()));
    }
    let cfg = &model.config;
    let dt = model.vs.dtype();
    let sched = StepLr {
        base: cfg.lr,
        gamma: cfg.lr_gamma,
        step_size: 1,
    };
    let mut opt = Adam::new(model.vs.trainable(), cfg.lr)?;
    let mut hist = PFormerHistory::default();
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        opt.lr = sched.lr(epoch);
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut total = 0.0;
        let mut util: Vec<Vec<f64>> = vec![vec![0.0; cfg.n_experts]; model.num_blocks()];
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let lq: Vec<&ImagePatch> = chunk.iter().map(|&i| &data[i].lq).collect();
            let hq: Vec<&ImagePatch> = chunk.iter().map(|&i| &data[i].hq).collect();
            let pooled: Vec<Tensor> = chunk.iter().map(|&i| data[i].p_p.pooled.to_dtype(dt)).collect::<candle_core::Result<_>>()?;
            let x = ImagePatch::batch_to_tensor(&lq, dt)?;
            let y = ImagePatch::batch_to_tensor(&hq, dt)?;
            let p = Tensor::stack(&pooled, 0)?;
            let (pred, weights) = model.forward(&x, &p)?;
            let loss = (pred - y)?.abs()?.mean_all()?;
            total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
            for (u, w) in util.iter_mut().zip(&weights) {
                let s = w.detach().to_dtype(DType::F64)?.sum(0)?.to_vec1::<f64>()?;
                u.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            }
            opt.backward_step(&loss)?;
        }
        for u in util.iter_mut() {
            u.iter_mut().for_each(|v| *v /= data.len() as f64);
        }
        let mean = total / data.len() as f64;
        hist.epoch_loss.push(mean);
        let go_on = on_epoch(epoch, mean, &util);
        hist.utilization.push(util);
        epochs_run = epoch + 1;
        if !go_on {
            break;
        }
    }
    hist.steps = opt.step;
    let mut ck = Checkpoint::new("pformer", fingerprint)
        .with_params(&model.vs)
        .with_optimizer(&opt);
    ck.epoch = epochs_run as u64;
    ck.step = opt.step;
    ck.metadata = serde_json::json!({
        "config": cfg,
        "epoch_loss": hist.epoch_loss,
        "utilization": hist.utilization,
    });
    Ok((ck, hist))
}

/// Mean router weight per expert of the last block for a set of inputs.
pub fn mean_router_weights(weights: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    weights
        .iter()
        .map(|w| Ok(w.to_dtype(DType::F64)?.mean(0)?.to_vec1::<f64>()?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use candle_core::Device;

    pub(crate) fn small() -> PFormerConfig {
        PFormerConfig {
            widths: vec![8, 16, 16, 32],
            blocks: vec![1, 1, 1, 1],
            heads: vec![1, 2, 2, 4],
            ffn_expansion: 2.0,
            d_p: 8,
            epochs: 2,
            batch_size: 2,
            lr: 1e-3,
            ..Default::default()
        }
    }

    fn prompt(d: usize, seed: u64) -> PathologyPrompt {
        let vs = VarStore::new(DType::F32, seed);
        PathologyPrompt::from_tokens(vs.var("t", &[4, d], Init::Normal(1.0)).unwrap().detach()).unwrap()
    }

    #[test]
    fn zero_router_is_uniform() {
        let vs = VarStore::new(DType::F64, 0);
        let r = Router {
            linear: Linear::zeros(&vs, 4 + 3, 3, true).unwrap(),
            channels: 4,
        };
        let f = Tensor::randn(0f64, 1.0, (4, 5, 5), &Device::Cpu).unwrap();
        let p = PathologyPrompt::from_tokens(Tensor::randn(0f64, 1.0, (2, 3), &Device::Cpu).unwrap()).unwrap();
        let w = router_weights(&r, &f, &p).unwrap();
        assert_eq!(w.weights, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn single_expert_weight_is_one() {
        let vs = VarStore::new(DType::F64, 0);
        let r = Router::new(&vs, 4, 3, 1).unwrap();
        let f = Tensor::randn(0f64, 1.0, (4, 5, 5), &Device::Cpu).unwrap();
        let p = PathologyPrompt::from_tokens(Tensor::randn(0f64, 1.0, (2, 3), &Device::Cpu).unwrap()).unwrap();
        assert_eq!(router_weights(&r, &f, &p).unwrap().weights, vec![1.0]);
    }

    #[test]
    fn logit_shift_leaves_weights_unchanged() {
        let vs = VarStore::new(DType::F64, 1);
        let r = Router::new(&vs, 4, 3, 3).unwrap();
        let f = Tensor::randn(0f64, 1.0, (2, 4, 5, 5), &Device::Cpu).unwrap();
        let p = Tensor::randn(0f64, 1.0, (2, 3), &Device::Cpu).unwrap();
        let l = r.logits(&f, &p).unwrap();
        let a = softmax_last(&l).unwrap().to_vec2::<f64>().unwrap();
        let b = softmax_last(&(l + 7.5).unwrap()).unwrap().to_vec2::<f64>().unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn router_rejects_wrong_width() {
        let vs = VarStore::new(DType::F64, 1);
        let r = Router::new(&vs, 4, 3, 3).unwrap();
        let f = Tensor::randn(0f64, 1.0, (5, 5, 5), &Device::Cpu).unwrap();
        let p = PathologyPrompt::from_tokens(Tensor::randn(0f64, 1.0, (2, 3), &Device::Cpu).unwrap()).unwrap();
        assert!(matches!(router_weights(&r, &f, &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn combine_examples() {
        let main = Tensor::randn(0f64, 1.0, (1, 2, 3, 3), &Device::Cpu).unwrap();
        let zeros = Tensor::zeros((1, 3, 2, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let w = Tensor::new(&[[0.2f64, 0.3, 0.5]], &Device::Cpu).unwrap();
        let out = moe_combine(&main, &zeros, &w).unwrap();
        assert_eq!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap(), main.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        // scalar probe: weighted sum is exactly 1 everywhere
        let ones = Tensor::ones((1, 3, 2, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let zero_main = main.zeros_like().unwrap();
        let probe = moe_combine(&zero_main, &ones, &w).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(probe.iter().all(|v| (v - 0.841_345).abs() < 1e-6));
        // one-hot on expert 1
        let e = Tensor::randn(0f64, 1.0, (1, 3, 2, 3, 3), &Device::Cpu).unwrap();
        let onehot = Tensor::new(&[[0.0f64, 1.0, 0.0]], &Device::Cpu).unwrap();
        let got = moe_combine(&zero_main, &e, &onehot).unwrap();
        let expect = gelu(&e.get(0).unwrap().get(1).unwrap().unsqueeze(0).unwrap()).unwrap();
        let d = (got - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-15);
    }

    #[test]
    fn folded_mixture_matches_reference() {
        let vs = VarStore::new(DType::F64, 5);
        let blk = MoeGdfn::new(&vs, 4, 6, 3, 5).unwrap();
        let f = Tensor::randn(0f64, 1.0, (2, 12, 6, 7), &Device::Cpu).unwrap();
        let logits = Tensor::randn(0f64, 2.0, (2, 3), &Device::Cpu).unwrap();
        let w = softmax_last(&logits).unwrap();
        let reference = moe_combine(&blk.main.forward_single(&f).unwrap(), &blk.experts.forward(&f).unwrap(), &w).unwrap();
        let d = (blk.mixture(&f, &w).unwrap() - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn moe_gdfn_gradients() {
        let vs = VarStore::new(DType::F64, 2);
        let blk = MoeGdfn::new(&vs.pp("ffn"), 4, 6, 3, 5).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 4, 5, 5), &Device::Cpu).unwrap();
        let p = Tensor::randn(0f64, 1.0, (2, 5), &Device::Cpu).unwrap();
        let w = Tensor::randn(0f64, 1.0, (2, 4, 5, 5), &Device::Cpu).unwrap();
        let r = check_gradients(&vs.vars(), || Ok((blk.forward(&x, &x, &p)?.0 * &w)?.sum_all()?), 6, 1e-6, 1).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn output_is_clipped_input_at_init() {
        let m = PFormer::new(VarStore::new(DType::F32, 0), small()).unwrap();
        let im = crate::degrade::procedural_tissue("a", 32, 48, 1).unwrap();
        let out = m.restore(&im, &prompt(8, 1)).unwrap();
        assert_eq!(out.dims(), im.dims());
        assert_eq!(out.pixels(), im.pixels());
    }

    #[test]
    fn bad_dims_rejected() {
        let m = PFormer::new(VarStore::new(DType::F32, 0), small()).unwrap();
        let im = crate::degrade::procedural_tissue("a", 36, 48, 1).unwrap();
        assert!(matches!(m.restore(&im, &prompt(8, 1)), Err(Error::Dimension(_))));
    }

    #[test]
    fn config_validation() {
        let bad = PFormerConfig { heads: vec![3, 2, 2, 4], ..small() };
        assert!(PFormer::new(VarStore::new(DType::F32, 0), bad).is_err());
        let bad = PFormerConfig { n_experts: 0, ..small() };
        assert!(PFormer::new(VarStore::new(DType::F32, 0), bad).is_err());
        let bad = PFormerConfig { blocks: vec![1, 1], ..small() };
        assert!(PFormer::new(VarStore::new(DType::F32, 0), bad).is_err());
    }

    #[test]
    fn training_is_seeded_and_logs_utilization() {
        let params = crate::degrade::OpticsParams::default();
        let data: Vec<PFormerSample> = (0..3)
            .map(|i| {
                let hq = crate::degrade::procedural_tissue("s", 32, 32, i).unwrap();
                PFormerSample {
                    lq: crate::degrade::defocus_blur(&hq, 2.0, &params),
                    hq,
                    p_p: prompt(8, i),
                }
            })
            .collect();
        let run = || {
            let m = PFormer::new(VarStore::new(DType::F32, 3), small()).unwrap();
            train_pformer(&m, &data, "fp", |_, _, _| true).unwrap().1
        };
        let a = run();
        let b = run();
        assert_eq!(a.epoch_loss, b.epoch_loss);
        assert_eq!(a.steps, 4);
        for epoch in &a.utilization {
            assert_eq!(epoch.len(), 7);
            for block in epoch {
                assert!((block.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let m = PFormer::new(VarStore::new(DType::F32, 3), small()).unwrap();
        assert!(matches!(train_pformer(&m, &[], "fp", |_, _, _| true), Err(Error::Validation(_))));
    }
}

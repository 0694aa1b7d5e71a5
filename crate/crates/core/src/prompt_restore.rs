//! Prompt restoration: a stack of transformer blocks that moves the
//! low-quality pathology prompt towards the high-quality one, conditioned on
//! the defocus prompt through cross-attention.

use candle_core::{DType, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::defocus::{epoch_order, DefocusPrompt};
use crate::encoders::PathologyPrompt;
use crate::error::{dim_err, Error, Result};
use crate::nn::{gelu, sincos_2d, to_tokens, Adam, Attention, LayerNorm, Linear, StepLr, VarStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptRestorerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_p: usize,
    /// Channels of the defocus prompt before projection to `d_p`.
    pub c_d: usize,
    pub mlp_ratio: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_gamma: f64,
    pub seed: u64,
}

impl Default for PromptRestorerConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            d_p: 192,
            c_d: 64,
            mlp_ratio: 2,
            epochs: 500,
            batch_size: 16,
            lr: 1e-4,
            lr_gamma: 0.98,
            seed: 0,
        }
    }
}

impl PromptRestorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Parameter("prompt restorer needs at least one block".into()));
        }
        if self.heads == 0 || self.d_p % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "prompt dim {} not divisible by {} heads",
                self.d_p, self.heads
            )));
        }
        if self.d_p % 4 != 0 {
            return Err(Error::Parameter("prompt dim must be divisible by 4".into()));
        }
        Ok(())
    }
}

/// Self-attention over the prompt tokens, cross-attention to the defocus
/// tokens, feed-forward; pre-norm residual form.
#[derive(Debug, Clone)]
pub struct PromptBlock {
    norm1: LayerNorm,
    self_attn: Attention,
    norm2: LayerNorm,
    cross_attn: Attention,
    norm3: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl PromptBlock {
    pub fn new(vs: &VarStore, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&vs.pp("norm1"), dim)?,
            self_attn: Attention::new(&vs.pp("self_attn"), dim, dim, heads)?,
            norm2: LayerNorm::new(&vs.pp("norm2"), dim)?,
            cross_attn: Attention::new(&vs.pp("cross_attn"), dim, dim, heads)?,
            norm3: LayerNorm::new(&vs.pp("norm3"), dim)?,
            fc1: Linear::new(&vs.pp("fc1"), dim, hidden, true)?,
            fc2: Linear::new(&vs.pp("fc2"), hidden, dim, true)?,
        })
    }

    /// `x: (B, N, D)`, `ctx: (B, M, D)`.
    pub fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h)?)?;
        let h = self.norm2.forward(&x)?;
        let x = (&x + self.cross_attn.forward(&h, ctx)?)?;
        let h = self.norm3.forward(&x)?;
        let h = self.fc2.forward(&gelu(&self.fc1.forward(&h)?)?)?;
        Ok((x + h)?)
    }
}

pub struct PromptRestorer {
    pub vs: VarStore,
    pub config: PromptRestorerConfig,
    defocus_proj: Linear,
    blocks: Vec<PromptBlock>,
    out: Linear,
}

impl PromptRestorer {
    pub fn new(vs: VarStore, config: PromptRestorerConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_p;
        let defocus_proj = Linear::new(&vs.pp("defocus_proj"), config.c_d, d, true)?;
        let blocks = (0..config.layers)
            .map(|i| PromptBlock::new(&vs.pp(format!("block{i}")), d, config.heads, d * config.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let out = Linear::zeros(&vs.pp("out"), d, d, true)?;
        Ok(Self {
            vs,
            config,
            defocus_proj,
            blocks,
            out,
        })
    }

    /// Defocus map `(B, C_d, H_d, W_d)` -> tokens `(B, H_d*W_d, D_p)` with
    /// 2-D position code.
    pub fn defocus_tokens(&self, p_d: &Tensor) -> Result<Tensor> {
        let (_, c, hd, wd) = p_d.dims4()?;
        if c != self.config.c_d {
            return Err(dim_err!("defocus prompt has {c} channels, restorer expects {}", self.config.c_d));
        }
        let t = self.defocus_proj.forward(&to_tokens(p_d)?)?;
        let pos = sincos_2d(hd, wd, self.config.d_p, t.dtype())?;
        Ok(t.broadcast_add(&pos)?)
    }

    /// `p_lp: (B, N, D_p)`, `p_d: (B, C_d, H_d, W_d)` -> `(B, N, D_p)`.
    pub fn forward(&self, p_lp: &Tensor, p_d: &Tensor) -> Result<Tensor> {
        let (b, _, d) = p_lp.dims3()?;
        if d != self.config.d_p {
            return Err(dim_err!("prompt dim {d}, restorer expects {}", self.config.d_p));
        }
        if p_d.dims()[0] != b {
            return Err(dim_err!("batch mismatch between prompts ({b}) and defocus maps ({})", p_d.dims()[0]));
        }
        let ctx = self.defocus_tokens(p_d)?;
        let mut h = p_lp.clone();
        for blk in &self.blocks {
            h = blk.forward(&h, &ctx)?;
        }
        Ok((p_lp + self.out.forward(&h)?)?)
    }

    pub fn restore_prompt(&self, p_lp: &PathologyPrompt, p_d: &DefocusPrompt) -> Result<PathologyPrompt> {
        let dt = self.vs.dtype();
        let x = p_lp.tokens.to_dtype(dt)?.unsqueeze(0)?;
        let f = p_d.features.to_dtype(dt)?.unsqueeze(0)?;
        let y = self.forward(&x, &f)?.squeeze(0)?.detach();
        PathologyPrompt::from_tokens(y.to_dtype(p_lp.tokens.dtype())?)
    }
}

fn same_shape(a: &PathologyPrompt, b: &PathologyPrompt) -> Result<()> {
    if a.tokens.dims() != b.tokens.dims() {
        return Err(dim_err!("prompt shapes differ: {:?} vs {:?}", a.tokens.dims(), b.tokens.dims()));
    }
    Ok(())
}

/// Mean absolute difference over all token entries.
pub fn prompt_loss(p_p: &PathologyPrompt, p_hp: &PathologyPrompt) -> Result<f64> {
    same_shape(p_p, p_hp)?;
    let d = (p_p.tokens.to_dtype(DType::F64)? - p_hp.tokens.to_dtype(DType::F64)?)?;
    Ok(d.abs()?.mean_all()?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptDistance {
    pub mse_lp: f64,
    pub mse_p: f64,
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = (a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?;
    Ok(d.sqr()?.mean_all()?.to_scalar::<f64>()?)
}

pub fn prompt_distance_report(p_lp: &PathologyPrompt, p_p: &PathologyPrompt, p_hp: &PathologyPrompt) -> Result<PromptDistance> {
    same_shape(p_lp, p_hp)?;
    same_shape(p_p, p_hp)?;
    Ok(PromptDistance {
        mse_lp: mse(&p_lp.tokens, &p_hp.tokens)?,
        mse_p: mse(&p_p.tokens, &p_hp.tokens)?,
    })
}

/// One training example: degraded prompt, defocus prompt, sharp prompt.
#[derive(Debug, Clone)]
pub struct PromptTriple {
    pub p_lp: PathologyPrompt,
    pub p_d: DefocusPrompt,
    pub p_hp: PathologyPrompt,
}

/// Minimizes the L1 prompt loss with Adam and per-epoch step decay.
/// `on_epoch` receives `(epoch, mean loss)`.
pub fn train_prompt_restorer(
    model: &PromptRestorer,
    data: &[PromptTriple],
    fingerprint: &str,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(Checkpoint, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Validation("prompt restorer training set is empty".into()));
    }
    let cfg = &model.config;
    let dt = model.vs.dtype();
    let sched = StepLr {
        base: cfg.lr,
        gamma: cfg.lr_gamma,
        step_size: 1,
    };
    let mut opt = Adam::new(model.vs.trainable(), cfg.lr)?;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = sched.lr(epoch);
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let lp: Vec<&PathologyPrompt> = chunk.iter().map(|&i| &data[i].p_lp).collect();
            let hp: Vec<&PathologyPrompt> = chunk.iter().map(|&i| &data[i].p_hp).collect();
            let pd: Vec<&Tensor> = chunk.iter().map(|&i| &data[i].p_d.features).collect();
            let x = PathologyPrompt::stack(&lp)?.to_dtype(dt)?;
            let y = PathologyPrompt::stack(&hp)?.to_dtype(dt)?;
            let f = Tensor::stack(&pd, 0)?.to_dtype(dt)?;
            let pred = model.forward(&x, &f)?;
            let loss = (pred - y)?.abs()?.mean_all()?;
            total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
            opt.backward_step(&loss)?;
        }
        let mean = total / data.len() as f64;
        losses.push(mean);
        on_epoch(epoch, mean);
    }
    let mut ck = Checkpoint::new("prompt_restorer", fingerprint)
        .with_params(&model.vs)
        .with_optimizer(&opt);
    ck.epoch = cfg.epochs as u64;
    ck.step = opt.step;
    ck.metadata = serde_json::json!({ "config": cfg, "epoch_loss": losses });
    Ok((ck, losses))
}

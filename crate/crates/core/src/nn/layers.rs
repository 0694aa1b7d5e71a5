//! Building blocks on `(B, C, H, W)` feature maps and `(B, N, D)` token sets.

use candle_core::{DType, Device, Module, Tensor, D};

use super::store::{Init, VarStore};
use crate::error::{dim_err, Result};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(vs: &VarStore, c_in: usize, c_out: usize, k: usize, stride: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let weight = vs.var("weight", &[c_out, c_in, k, k], Init::Uniform(bound))?;
        let bias = if bias {
            Some(vs.var("bias", &[c_out], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }

    /// Weight and bias start at zero.
    pub fn zeros(vs: &VarStore, c_in: usize, c_out: usize, k: usize, bias: bool) -> Result<Self> {
        let weight = vs.var("weight", &[c_out, c_in, k, k], Init::Zeros)?;
        let bias = if bias {
            Some(vs.var("bias", &[c_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding: k / 2,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(vs: &VarStore, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self::with_init(vs, d_in, d_out, bias, Init::Uniform(bound), Init::Uniform(bound))
    }

    pub fn zeros(vs: &VarStore, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        Self::with_init(vs, d_in, d_out, bias, Init::Zeros, Init::Zeros)
    }

    pub fn with_init(vs: &VarStore, d_in: usize, d_out: usize, bias: bool, w: Init, b: Init) -> Result<Self> {
        let weight = vs.var("weight", &[d_out, d_in], w)?;
        let bias = if bias {
            Some(vs.var("bias", &[d_out], b)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }
}

/// Bank of `E` depth-wise 3x3 convolutions sharing one input.
/// Forward maps `(B, C, H, W)` to `(B, E, C, H, W)`.
#[derive(Debug, Clone)]
pub struct DepthwiseBank {
    /// `(E, C, 9)`, taps row-major.
    pub weight: Tensor,
}

impl DepthwiseBank {
    pub fn new(vs: &VarStore, experts: usize, channels: usize) -> Result<Self> {
        let bound = 1.0 / 3.0;
        Ok(Self {
            weight: vs.var("weight", &[experts, channels, 9], Init::Uniform(bound))?,
        })
    }

    pub fn experts(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        super::depthwise::depthwise3x3(x, &self.weight)
    }

    /// Single-expert convenience returning `(B, C, H, W)`.
    pub fn forward_single(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.squeeze(1)?)
    }
}

/// Layer norm over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(vs: &VarStore, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: vs.var("weight", &[dim], Init::Const(1.0))?,
            bias: vs.var("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Layer norm across channels at every pixel of a `(B, C, H, W)` map.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ChannelNorm {
    pub fn new(vs: &VarStore, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: vs.var("weight", &[channels], Init::Const(1.0))?,
            bias: vs.var("bias", &[channels], Init::Zeros)?,
        })
    }
}

impl Module for ChannelNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let c = x.dim(1)?;
        let mean = x.mean_keepdim(1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(1)?;
        let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        xn.broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(vs: &VarStore, groups: usize, channels: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(dim_err!("{channels} channels not divisible into {groups} groups"));
        }
        Ok(Self {
            weight: vs.var("weight", &[channels], Init::Const(1.0))?,
            bias: vs.var("bias", &[channels], Init::Zeros)?,
            groups,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(2)?;
        let gc = g.broadcast_sub(&mean)?;
        let var = gc.sqr()?.mean_keepdim(2)?;
        let xn = gc.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, c, h, w))?;
        xn.broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

/// Numerically stable softmax built from differentiable primitives.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    softmax(x, x.rank() - 1)
}

pub use super::gelu::gelu;

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // 1 / (1 + exp(-x))
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// L2-normalize along `dim`.
pub fn l2_normalize(x: &Tensor, dim: usize) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(dim)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Global average pooling `(B, C, H, W) -> (B, C)`.
pub fn gap(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(3)?.mean(2)?)
}

/// `(B, C*r*r, H, W) -> (B, C, H*r, W*r)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let oc = c / (r * r);
    Ok(x.reshape((b, oc, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, oc, h * r, w * r))?)
}

/// `(B, C, H, W) -> (B, C*r*r, H/r, W/r)`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % r != 0 || w % r != 0 {
        return Err(dim_err!("{h}x{w} not divisible by {r}"));
    }
    Ok(x.reshape((b, c, h / r, r, w / r, r))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((b, c * r * r, h / r, w / r))?)
}

/// Row-interpolation matrix for bilinear resampling with half-pixel centers
/// (`align_corners = false`), shape `(n_out, n_in)`.
pub fn bilinear_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0f64; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let t = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - t;
        m[o * n_in + i1] += t;
    }
    m
}

/// Bilinear resize of `(B, C, H, W)` to `(B, C, out_h, out_w)` as two
/// matrix products, so it is differentiable end to end.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dt = x.dtype();
    let ry = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), &Device::Cpu)?.to_dtype(dt)?;
    let rx = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), &Device::Cpu)?.to_dtype(dt)?;
    let flat = x.reshape((b * c, h, w))?;
    let y = ry.broadcast_matmul(&flat)?.broadcast_matmul(&rx.t()?)?;
    Ok(y.reshape((b, c, out_h, out_w))?)
}

/// Fixed 2-D sinusoidal position code, `(rows*cols, dim)`; `dim % 4 == 0`.
pub fn sincos_2d(rows: usize, cols: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(dim_err!("2-D sincos code needs dim divisible by 4, got {dim}"));
    }
    let q = dim / 4;
    let mut out = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for (pos, _) in [(r as f64, 0), (c as f64, 1)] {
                for i in 0..q {
                    let freq = 1.0 / 10000f64.powf(i as f64 / q as f64);
                    out.push((pos * freq).sin());
                }
                for i in 0..q {
                    let freq = 1.0 / 10000f64.powf(i as f64 / q as f64);
                    out.push((pos * freq).cos());
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (rows * cols, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Sinusoidal embedding of scalar timesteps, `(B,) -> (B, dim)`.
pub fn timestep_embedding(t: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push((tv * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push((tv * freq).sin());
        }
        if dim % 2 == 1 {
            out.push(0.0);
        }
    }
    Ok(Tensor::from_vec(out, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Multi-head attention of `x` (queries) over `ctx` (keys/values).
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(vs: &VarStore, dim: usize, ctx_dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(dim_err!("attention dim {dim} not divisible by {heads} heads"));
        }
        Ok(Self {
            q: Linear::new(&vs.pp("q"), dim, dim, false)?,
            k: Linear::new(&vs.pp("k"), ctx_dim, dim, false)?,
            v: Linear::new(&vs.pp("v"), ctx_dim, dim, false)?,
            out: Linear::new(&vs.pp("out"), dim, dim, true)?,
            heads,
        })
    }

    /// `x: (B, N, dim)`, `ctx: (B, M, ctx_dim)` -> `(B, N, dim)`.
    pub fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let (b, n, dim) = x.dims3()?;
        let (_, m, cd) = ctx.dims3()?;
        if cd != self.k.in_dim() {
            return Err(dim_err!("context dim {cd}, attention expects {}", self.k.in_dim()));
        }
        let hd = dim / self.heads;
        let split = |t: Tensor, len: usize| -> candle_core::Result<Tensor> {
            t.reshape((b, len, self.heads, hd))?.transpose(1, 2)?.contiguous()
        };
        let q = split(self.q.forward(x)?, n)?;
        let k = split(self.k.forward(ctx)?, m)?;
        let v = split(self.v.forward(ctx)?, m)?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let attn = softmax_last(&scores)?;
        let o = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, dim))?;
        Ok(self.out.forward(&o)?)
    }
}

/// `(B, C, H, W) -> (B, H*W, C)`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `(B, H*W, C) -> (B, C, H, W)`.
pub fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = t.dims3()?;
    if n != h * w {
        return Err(dim_err!("{n} tokens cannot form a {h}x{w} map"));
    }
    Ok(t.transpose(1, 2)?.reshape((b, c, h, w))?)
}

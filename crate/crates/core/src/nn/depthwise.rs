//! Depth-wise 3x3 convolution bank (zero padding, stride 1) as a CPU custom
//! op with hand-written gradients. Generic grouped convolution on the CPU
//! backend loops over groups; this kernel runs one pass per tap instead.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};

use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy)]
struct Dims {
    b: usize,
    e: usize,
    c: usize,
    h: usize,
    w: usize,
    /// Weights are `(B, E, C, 9)` (one bank per sample) instead of `(E, C, 9)`.
    per_sample: bool,
}

impl Dims {
    fn weight_index(&self, bi: usize, ei: usize, ci: usize) -> usize {
        let g = if self.per_sample { bi } else { 0 };
        ((g * self.e + ei) * self.c + ci) * 9
    }

    fn weight_shape(&self) -> Shape {
        if self.per_sample {
            Shape::from((self.b, self.e, self.c, 9))
        } else {
            Shape::from((self.e, self.c, 9))
        }
    }
}

/// Index ranges of output rows/cols whose tap `d` (0..3) lands in bounds.
fn valid(n: usize, d: usize) -> (usize, usize) {
    match d {
        0 => (1.min(n), n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

fn slice<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<Slice<'a>> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("depthwise op needs contiguous inputs".into()))?;
    Ok(match s {
        CpuStorage::F32(v) => Slice::F32(&v[start..end]),
        CpuStorage::F64(v) => Slice::F64(&v[start..end]),
        _ => return Err(candle_core::Error::Msg("depthwise op supports f32 and f64".into())),
    })
}

enum Slice<'a> {
    F32(&'a [f32]),
    F64(&'a [f64]),
}

fn dispatch(
    a: Slice,
    b: Slice,
    f32_fn: impl Fn(&[f32], &[f32]) -> Vec<f32>,
    f64_fn: impl Fn(&[f64], &[f64]) -> Vec<f64>,
) -> candle_core::Result<CpuStorage> {
    match (a, b) {
        (Slice::F32(a), Slice::F32(b)) => Ok(CpuStorage::F32(f32_fn(a, b))),
        (Slice::F64(a), Slice::F64(b)) => Ok(CpuStorage::F64(f64_fn(a, b))),
        _ => Err(candle_core::Error::Msg("depthwise op dtype mismatch".into())),
    }
}

/// `y[b,e,c] += w[e,c,k] * shift_k(x[b,c])`.
fn forward<T: WithDType>(x: &[T], wt: &[T], d: Dims) -> Vec<T> {
    let hw = d.h * d.w;
    let mut y = vec![T::zero(); d.b * d.e * d.c * hw];
    for bi in 0..d.b {
        for ei in 0..d.e {
            for ci in 0..d.c {
                let xp = &x[(bi * d.c + ci) * hw..][..hw];
                let yp = &mut y[((bi * d.e + ei) * d.c + ci) * hw..][..hw];
                for k in 0..9 {
                    let wk = wt[d.weight_index(bi, ei, ci) + k];
                    let (dy, dx) = (k / 3, k % 3);
                    let (r0, r1) = valid(d.h, dy);
                    let (c0, c1) = valid(d.w, dx);
                    for i in r0..r1 {
                        let src = &xp[(i + dy - 1) * d.w + c0 + dx - 1..][..c1 - c0];
                        let dst = &mut yp[i * d.w + c0..][..c1 - c0];
                        for (o, v) in dst.iter_mut().zip(src) {
                            *o += wk * *v;
                        }
                    }
                }
            }
        }
    }
    y
}

/// `gx[b,c](shifted by k) += w[e,c,k] * gy[b,e,c]`.
fn grad_x<T: WithDType>(gy: &[T], wt: &[T], d: Dims) -> Vec<T> {
    let hw = d.h * d.w;
    let mut gx = vec![T::zero(); d.b * d.c * hw];
    for bi in 0..d.b {
        for ci in 0..d.c {
            let gxp = &mut gx[(bi * d.c + ci) * hw..][..hw];
            for ei in 0..d.e {
                let gyp = &gy[((bi * d.e + ei) * d.c + ci) * hw..][..hw];
                for k in 0..9 {
                    let wk = wt[d.weight_index(bi, ei, ci) + k];
                    let (dy, dx) = (k / 3, k % 3);
                    let (r0, r1) = valid(d.h, dy);
                    let (c0, c1) = valid(d.w, dx);
                    for i in r0..r1 {
                        let src = &gyp[i * d.w + c0..][..c1 - c0];
                        let dst = &mut gxp[(i + dy - 1) * d.w + c0 + dx - 1..][..c1 - c0];
                        for (o, v) in dst.iter_mut().zip(src) {
                            *o += wk * *v;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// `gw[e,c,k] = sum gy[b,e,c] * shift_k(x[b,c])`.
fn grad_w<T: WithDType>(gy: &[T], x: &[T], d: Dims) -> Vec<T> {
    let hw = d.h * d.w;
    let groups = if d.per_sample { d.b } else { 1 };
    let mut gw = vec![T::zero(); groups * d.e * d.c * 9];
    for bi in 0..d.b {
        for ei in 0..d.e {
            for ci in 0..d.c {
                let xp = &x[(bi * d.c + ci) * hw..][..hw];
                let gyp = &gy[((bi * d.e + ei) * d.c + ci) * hw..][..hw];
                for k in 0..9 {
                    let (dy, dx) = (k / 3, k % 3);
                    let (r0, r1) = valid(d.h, dy);
                    let (c0, c1) = valid(d.w, dx);
                    let mut acc = T::zero();
                    for i in r0..r1 {
                        let a = &gyp[i * d.w + c0..][..c1 - c0];
                        let b = &xp[(i + dy - 1) * d.w + c0 + dx - 1..][..c1 - c0];
                        for (u, v) in a.iter().zip(b) {
                            acc += *u * *v;
                        }
                    }
                    gw[d.weight_index(bi, ei, ci) + k] += acc;
                }
            }
        }
    }
    gw
}

struct DwForward(Dims);
struct DwGradX(Dims);
struct DwGradW(Dims);

impl CustomOp2 for DwForward {
    fn name(&self) -> &'static str {
        "depthwise3x3"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.0;
        let out = dispatch(slice(s1, l1)?, slice(s2, l2)?, |x, w| forward(x, w, d), |x, w| forward(x, w, d))?;
        Ok((out, Shape::from((d.b, d.e, d.c, d.h, d.w))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, gy: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let gy = gy.contiguous()?;
        let gx = gy.apply_op2_no_bwd(&w.contiguous()?, &DwGradX(self.0))?;
        let gw = gy.apply_op2_no_bwd(&x.contiguous()?, &DwGradW(self.0))?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for DwGradX {
    fn name(&self) -> &'static str {
        "depthwise3x3-grad-x"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.0;
        let out = dispatch(slice(s1, l1)?, slice(s2, l2)?, |g, w| grad_x(g, w, d), |g, w| grad_x(g, w, d))?;
        Ok((out, Shape::from((d.b, d.c, d.h, d.w))))
    }
}

impl CustomOp2 for DwGradW {
    fn name(&self) -> &'static str {
        "depthwise3x3-grad-w"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.0;
        let out = dispatch(slice(s1, l1)?, slice(s2, l2)?, |g, x| grad_w(g, x, d), |g, x| grad_w(g, x, d))?;
        Ok((out, d.weight_shape()))
    }
}

/// `x: (B, C, H, W)`, `weight: (E, C, 9)` -> `(B, E, C, H, W)`.
pub fn depthwise3x3(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (e, wc, taps) = weight.dims3()?;
    if wc != c || taps != 9 {
        return Err(dim_err!("depthwise bank {:?} does not match {c} input channels", weight.dims()));
    }
    let d = Dims {
        b,
        e,
        c,
        h,
        w,
        per_sample: false,
    };
    Ok(x.contiguous()?.apply_op2(&weight.contiguous()?, DwForward(d))?)
}

/// Per-sample kernels: `x: (B, C, H, W)`, `weight: (B, C, 9)` -> `(B, C, H, W)`.
pub fn depthwise3x3_per_sample(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if weight.dims() != [b, c, 9] {
        return Err(dim_err!("per-sample kernels {:?} do not match input {:?}", weight.dims(), x.dims()));
    }
    let d = Dims {
        b,
        e: 1,
        c,
        h,
        w,
        per_sample: true,
    };
    let wt = weight.reshape((b, 1, c, 9))?.contiguous()?;
    Ok(x.contiguous()?.apply_op2(&wt, DwForward(d))?.squeeze(1)?)
}

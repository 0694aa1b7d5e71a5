//! Exact GELU `x * Phi(x)` as a fused CPU op; the generic tensor path builds
//! several temporaries per call in both directions.

use candle_core::cpu::erf::{erf_f32, erf_f64};
use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

use crate::error::Result;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// `1 / sqrt(2 pi)`.
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("gelu needs contiguous input".into()))?;
    Ok(&v[start..end])
}

struct Gelu;
struct GeluGrad;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-exact"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(
                contiguous(v, l)?
                    .iter()
                    .map(|&x| 0.5 * x * (1.0 + erf_f32(x * FRAC_1_SQRT_2 as f32)))
                    .collect(),
            ),
            CpuStorage::F64(v) => CpuStorage::F64(
                contiguous(v, l)?
                    .iter()
                    .map(|&x| 0.5 * x * (1.0 + erf_f64(x * FRAC_1_SQRT_2)))
                    .collect(),
            ),
            _ => return Err(candle_core::Error::Msg("gelu supports f32 and f64".into())),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &GeluGrad)?))
    }
}

/// `grad * (Phi(x) + x phi(x))`.
impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu-exact-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                let (x, g) = (contiguous(x, l1)?, contiguous(g, l2)?);
                CpuStorage::F32(
                    x.iter()
                        .zip(g)
                        .map(|(&x, &g)| {
                            let cdf = 0.5 * (1.0 + erf_f32(x * FRAC_1_SQRT_2 as f32));
                            g * (cdf + x * INV_SQRT_2PI as f32 * (-0.5 * x * x).exp())
                        })
                        .collect(),
                )
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                let (x, g) = (contiguous(x, l1)?, contiguous(g, l2)?);
                CpuStorage::F64(
                    x.iter()
                        .zip(g)
                        .map(|(&x, &g)| {
                            let cdf = 0.5 * (1.0 + erf_f64(x * FRAC_1_SQRT_2));
                            g * (cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp())
                        })
                        .collect(),
                )
            }
            _ => return Err(candle_core::Error::Msg("gelu grad dtype mismatch".into())),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}

//! Edge prompt: Canny edges expanded to `C_e` channels and weighted by a
//! per-pixel confidence derived from the defocus prompt.

use candle_core::{DType, Device, Module, Tensor};

use crate::canny::EdgeMap;
use crate::defocus::DefocusPrompt;
use crate::error::{dim_err, Result};
use crate::nn::{resize_bilinear, sigmoid, Conv2d, Init, VarStore};

pub const EDGE_CHANNELS: usize = 16;
/// Gain applied to the estimator's CTF row when seeding the confidence conv.
pub const CONFIDENCE_GAIN: f64 = 6.0;

/// `(1, 1, H, W)` tensor of 0/1 values.
pub fn edge_tensor(edges: &EdgeMap, dtype: DType) -> Result<Tensor> {
    let v: Vec<f32> = edges.mask.iter().map(|&m| m as f32).collect();
    Ok(Tensor::from_vec(v, (1, 1, edges.height, edges.width), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `features ⊙ confidence`, broadcast over channels.
/// `features: (B, C_e, H, W)`, `confidence: (B, 1, H, W)`.
pub fn weighted_edge_prompt(features: &Tensor, confidence: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = features.dims4()?;
    let (cb, cc, ch, cw) = confidence.dims4()?;
    if (cb, cc, ch, cw) != (b, 1, h, w) {
        return Err(dim_err!(
            "confidence {:?} does not match edge features {:?}",
            confidence.dims(),
            features.dims()
        ));
    }
    Ok(features.broadcast_mul(confidence)?)
}

/// Learned parts of the edge prompt, trained together with the denoiser.
#[derive(Debug, Clone)]
pub struct EdgePromptNet {
    /// 3x3 conv `1 -> C_e`.
    pub embed: Conv2d,
    /// 1x1 conv `C_d -> 1`.
    pub confidence: Conv2d,
}

impl EdgePromptNet {
    pub fn new(vs: &VarStore, c_d: usize, c_e: usize) -> Result<Self> {
        Ok(Self {
            embed: Conv2d::new(&vs.pp("embed"), 1, c_e, 3, 1, true)?,
            confidence: Conv2d::new(&vs.pp("confidence"), c_d, 1, 1, 1, true)?,
        })
    }

    /// Confidence conv seeded from the estimator's CTF row:
    /// `k * (w_c . f + b_c - 0.5)`, so sharp regions (CTF near 1) start
    /// confident and blurred ones (CTF near 0) do not.
    pub fn with_ctf_prior(vs: &VarStore, c_e: usize, ctf_head: &(Vec<f64>, f64)) -> Result<Self> {
        let c_d = ctf_head.0.len();
        let embed = Conv2d::new(&vs.pp("embed"), 1, c_e, 3, 1, true)?;
        let cvs = vs.pp("confidence");
        let w: Vec<f64> = ctf_head.0.iter().map(|v| v * CONFIDENCE_GAIN).collect();
        let weight = cvs.var("weight", &[1, c_d, 1, 1], Init::Values(w))?;
        let bias = cvs.var("bias", &[1], Init::Values(vec![CONFIDENCE_GAIN * (ctf_head.1 - 0.5)]))?;
        Ok(Self {
            embed,
            confidence: Conv2d {
                weight,
                bias: Some(bias),
                stride: 1,
                padding: 0,
            },
        })
    }

    pub fn channels(&self) -> usize {
        self.embed.out_channels()
    }

    /// `(B, 1, H, W)` edge masks -> `(B, C_e, H, W)`.
    pub fn edge_embed(&self, edges: &Tensor) -> Result<Tensor> {
        Ok(self.embed.forward(edges)?)
    }

    /// `(B, C_d, H_d, W_d)` -> `(B, 1, H, W)` in `(0, 1)`.
    pub fn defocus_confidence(&self, p_d: &Tensor, target_hw: (usize, usize)) -> Result<Tensor> {
        let logits = self.confidence.forward(p_d)?;
        resize_bilinear(&sigmoid(&logits)?, target_hw.0, target_hw.1)
    }

    /// `P_E` for a batch.
    pub fn forward(&self, edges: &Tensor, p_d: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = edges.dims4()?;
        let f = self.edge_embed(edges)?;
        let c = self.defocus_confidence(p_d, (h, w))?;
        weighted_edge_prompt(&f, &c)
    }

    /// Single-image confidence map, row-major `H x W`.
    pub fn confidence_map(&self, p_d: &DefocusPrompt, dtype: DType) -> Result<Vec<f32>> {
        let f = p_d.features.to_dtype(dtype)?.unsqueeze(0)?;
        let c = self.defocus_confidence(&f, p_d.source_hw)?;
        Ok(c.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> EdgeMap {
        let mut e = EdgeMap::empty(h, w);
        for &(y, x) in on {
            e.mask[y * w + x] = 1;
        }
        e
    }

    fn zero_bias_net(vs: &VarStore) -> EdgePromptNet {
        let mut net = EdgePromptNet::new(vs, 4, EDGE_CHANNELS).unwrap();
        net.embed.bias = None;
        net
    }

    #[test]
    fn empty_edges_give_zero_features() {
        let vs = VarStore::new(DType::F64, 0);
        let net = zero_bias_net(&vs);
        let f = net.edge_embed(&edge_tensor(&EdgeMap::empty(16, 24), DType::F64).unwrap()).unwrap();
        assert_eq!(f.dims(), &[1, EDGE_CHANNELS, 16, 24]);
        assert_eq!(f.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn embedding_is_linear_over_disjoint_masks() {
        let vs = VarStore::new(DType::F64, 1);
        let net = zero_bias_net(&vs);
        let a = mask(16, 16, &[(3, 3), (3, 4), (10, 12)]);
        let b = mask(16, 16, &[(7, 7), (0, 15)]);
        let mut u = a.clone();
        for (i, v) in b.mask.iter().enumerate() {
            u.mask[i] |= v;
        }
        let e = |m: &EdgeMap| net.edge_embed(&edge_tensor(m, DType::F64).unwrap()).unwrap();
        let lhs = ((e(&a) + e(&b)).unwrap() - e(&EdgeMap::empty(16, 16))).unwrap();
        let diff = (lhs - e(&u)).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn zero_prompt_zero_bias_gives_half_confidence() {
        let vs = VarStore::new(DType::F64, 2);
        let mut net = EdgePromptNet::new(&vs, 4, EDGE_CHANNELS).unwrap();
        net.confidence.bias = Some(Tensor::zeros(1, DType::F64, &Device::Cpu).unwrap());
        let p = Tensor::zeros((1, 4, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let c = net.defocus_confidence(&p, (64, 64)).unwrap();
        assert_eq!(c.dims(), &[1, 1, 64, 64]);
        let v = c.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| *x == 0.5));
    }

    #[test]
    fn confidence_in_open_unit_interval() {
        let vs = VarStore::new(DType::F64, 3);
        let net = EdgePromptNet::new(&vs, 4, EDGE_CHANNELS).unwrap();
        let p = Tensor::randn(0f64, 3.0, (2, 4, 3, 3), &Device::Cpu).unwrap();
        let v = net.defocus_confidence(&p, (96, 96)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| *x > 0.0 && *x < 1.0));
    }

    #[test]
    fn weighting_examples() {
        let f = Tensor::randn(0f64, 1.0, (1, 4, 8, 8), &Device::Cpu).unwrap();
        let ones = Tensor::ones((1, 1, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        let half = (&ones * 0.5).unwrap();
        let same = weighted_edge_prompt(&f, &ones).unwrap();
        assert_eq!(same.flatten_all().unwrap().to_vec1::<f64>().unwrap(), f.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let z = weighted_edge_prompt(&f, &zeros).unwrap();
        assert_eq!(z.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let h = weighted_edge_prompt(&f, &half).unwrap();
        let expect = (&f * 0.5).unwrap();
        assert_eq!(h.flatten_all().unwrap().to_vec1::<f64>().unwrap(), expect.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        assert!(weighted_edge_prompt(&f, &Tensor::ones((1, 1, 8, 7), DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn raising_confidence_never_shrinks_magnitude() {
        let f = Tensor::randn(0f64, 1.0, (1, 4, 6, 6), &Device::Cpu).unwrap();
        let c = Tensor::rand(0f64, 1.0, (1, 1, 6, 6), &Device::Cpu).unwrap();
        let c2 = (&c + Tensor::rand(0f64, 0.5, (1, 1, 6, 6), &Device::Cpu).unwrap()).unwrap();
        let a = weighted_edge_prompt(&f, &c).unwrap().abs().unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = weighted_edge_prompt(&f, &c2).unwrap().abs().unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| y >= x));
    }

    #[test]
    fn ctf_prior_ranks_sharp_above_blurred() {
        let vs = VarStore::new(DType::F64, 4);
        // a 2-channel "estimator" whose CTF row reads channel 0
        let net = EdgePromptNet::with_ctf_prior(&vs, EDGE_CHANNELS, &(vec![1.0, 0.0], 0.0)).unwrap();
        let sharp = Tensor::new(&[1.0f64, 0.3], &Device::Cpu).unwrap().reshape((1, 2, 1, 1)).unwrap();
        let blurred = Tensor::new(&[0.05f64, 0.3], &Device::Cpu).unwrap().reshape((1, 2, 1, 1)).unwrap();
        let cs = net.defocus_confidence(&sharp, (4, 4)).unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap();
        let cb = net.defocus_confidence(&blurred, (4, 4)).unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(cs > 0.9 && cb < 0.1, "{cs} {cb}");
    }

    #[test]
    fn edge_prompt_gradients_match_finite_differences() {
        let vs = VarStore::new(DType::F64, 5);
        let net = EdgePromptNet::new(&vs, 3, 4).unwrap();
        let edges = edge_tensor(&mask(8, 8, &[(2, 2), (2, 3), (5, 6)]), DType::F64).unwrap();
        let p = Tensor::randn(0f64, 1.0, (1, 3, 2, 2), &Device::Cpu).unwrap();
        let w = Tensor::randn(0f64, 1.0, (1, 4, 8, 8), &Device::Cpu).unwrap();
        let r = check_gradients(&vs.vars(), || Ok((net.forward(&edges, &p)? * &w)?.sum_all()?), 8, 1e-6, 0).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}

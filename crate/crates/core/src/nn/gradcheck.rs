//! Central finite-difference gradient checking.

use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error of one entry; near-zero pairs are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs() / 1e-7
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares backprop gradients of the scalar `loss` against central
/// differences for up to `per_var` entries of each variable.
pub fn check_gradients<F>(vars: &[(String, Var)], loss: F, per_var: usize, h: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    let l = loss()?;
    let grads = l.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (name, var) in vars {
        let shape = var.shape().clone();
        let dtype = var.dtype();
        let base = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
            None => vec![0.0; base.len()],
        };
        let mut idx: Vec<usize> = (0..base.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_var);
        let eval_at = |i: usize, delta: f64| -> Result<f64> {
            let mut vals = base.clone();
            vals[i] += delta;
            let t = Tensor::from_vec(vals, shape.clone(), var.device())?.to_dtype(dtype)?;
            var.set(&t)?;
            let v = loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            Ok(v)
        };
        for i in idx {
            let plus = eval_at(i, h)?;
            let minus = eval_at(i, -h)?;
            let numeric = (plus - minus) / (2.0 * h);
            let e = rel_err(analytic[i], numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((name.clone(), i, analytic[i], numeric));
            }
        }
        let t = Tensor::from_vec(base, shape, var.device())?.to_dtype(dtype)?;
        var.set(&t)?;
    }
    Ok(report)
}

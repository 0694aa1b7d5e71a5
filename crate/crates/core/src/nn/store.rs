use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
    Normal(f64),
    /// Explicit values in row-major order.
    Values(Vec<f64>),
}

struct Inner {
    vars: Vec<(String, Var)>,
    index: HashMap<String, usize>,
    dtype: DType,
    rng: ChaCha8Rng,
}

/// Named, seeded parameter registry. Cloned handles share storage; `pp`
/// scopes names with a dotted prefix.
#[derive(Clone)]
pub struct VarStore {
    inner: Arc<Mutex<Inner>>,
    prefix: String,
}

impl VarStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: Vec::new(),
                index: HashMap::new(),
                dtype,
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            inner: self.inner.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.lock().unwrap().dtype
    }

    pub fn device(&self) -> Device {
        Device::Cpu
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Creates (or returns the existing) parameter `name`.
    pub fn var(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let mut inner = self.inner.lock().unwrap();
        if let Some(&i) = inner.index.get(&full) {
            let v = &inner.vars[i].1;
            if v.dims() != shape {
                return Err(Error::Dimension(format!(
                    "parameter {full} exists with shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| inner.rng.gen_range(-b..=b)).collect(),
            Init::Normal(s) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut inner.rng);
                    z * s
                })
                .collect(),
            Init::Values(v) => {
                if v.len() != n {
                    return Err(Error::Dimension(format!(
                        "parameter {full}: {} initial values for shape {shape:?}",
                        v.len()
                    )));
                }
                v
            }
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        let idx = inner.vars.len();
        inner.vars.push((full.clone(), var));
        inner.index.insert(full, idx);
        Ok(out)
    }

    /// All parameters under this handle's prefix, in creation order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .iter()
            .filter(|(n, _)| self.prefix.is_empty() || n.starts_with(&format!("{}.", self.prefix)))
            .cloned()
            .collect()
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Copies values from `tensors` into existing parameters; every
    /// parameter under this prefix must be present with matching shape.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let dtype = self.dtype();
        for (name, var) in self.vars() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?} in checkpoint, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(dtype)?)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.vars()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().detach()))
            .collect()
    }

    /// SHA-256 over names and f64 values of every parameter.
    pub fn param_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.vars() {
            h.update(name.as_bytes());
            let vals = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in vals {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

//! Versioned binary checkpoint container.
//!
//! Layout (little endian): magic `MOPCKPT\0`, `u32` format version,
//! component name, config fingerprint, `u64` step, `u64` epoch, JSON
//! metadata, then `u32` tensor count followed by
//! `(name, dtype tag, rank, dims, raw values)` records. Strings are
//! `u32` length + UTF-8.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Adam, VarStore};

pub const MAGIC: &[u8; 8] = b"MOPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u32,
    pub component: String,
    pub config_fingerprint: String,
    pub step: u64,
    pub epoch: u64,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
    if n > 1 << 28 {
        return Err(Error::Checkpoint(format!("string length {n} is implausible")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(fmt_err)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn fmt_err(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated or corrupt checkpoint: {e}"))
}

impl Checkpoint {
    pub fn new(component: impl Into<String>, config_fingerprint: impl Into<String>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            component: component.into(),
            config_fingerprint: config_fingerprint.into(),
            step: 0,
            epoch: 0,
            metadata: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    pub fn with_params(mut self, vs: &VarStore) -> Self {
        self.tensors.extend(vs.snapshot());
        self
    }

    pub fn with_optimizer(mut self, opt: &Adam) -> Self {
        let (m, v) = opt.moments();
        for (i, t) in m.iter().enumerate() {
            self.tensors.push((format!("__adam.m.{i}"), t.clone()));
        }
        for (i, t) in v.iter().enumerate() {
            self.tensors.push((format!("__adam.v.{i}"), t.clone()));
        }
        self
    }

    pub fn tensor_map(&self) -> HashMap<String, Tensor> {
        self.tensors.iter().cloned().collect()
    }

    /// Restores parameters under `vs` (by name).
    pub fn load_params(&self, vs: &VarStore) -> Result<()> {
        vs.load(&self.tensor_map())
    }

    /// Restores Adam moments and step counter if present.
    pub fn load_optimizer(&self, opt: &mut Adam) -> Result<()> {
        let map = self.tensor_map();
        let collect = |prefix: &str| -> Vec<Tensor> {
            (0..)
                .map_while(|i| map.get(&format!("{prefix}.{i}")).cloned())
                .collect()
        };
        let m = collect("__adam.m");
        let v = collect("__adam.v");
        opt.set_moments(m, v);
        opt.step = self.step;
        Ok(())
    }

    pub fn check_fingerprint(&self, expected: &str, allow_mismatch: bool) -> Result<()> {
        if self.config_fingerprint != expected && !allow_mismatch {
            return Err(Error::Checkpoint(format!(
                "{} checkpoint was trained with config {}, current config is {} (pass --allow-mismatch to override)",
                self.component, self.config_fingerprint, expected
            )));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(self.format_version).map_err(io)?;
        write_str(w, &self.component).map_err(io)?;
        write_str(w, &self.config_fingerprint).map_err(io)?;
        w.write_u64::<LittleEndian>(self.step).map_err(io)?;
        w.write_u64::<LittleEndian>(self.epoch).map_err(io)?;
        let meta = serde_json::to_string(&self.metadata).map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_str(w, &meta).map_err(io)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32).map_err(io)?;
        for (name, t) in &self.tensors {
            write_str(w, name).map_err(io)?;
            let tag = match t.dtype() {
                DType::F64 => 1u8,
                _ => 0u8,
            };
            w.write_u8(tag).map_err(io)?;
            w.write_u32::<LittleEndian>(t.rank() as u32).map_err(io)?;
            for &d in t.dims() {
                w.write_u64::<LittleEndian>(d as u64).map_err(io)?;
            }
            let flat = t.flatten_all()?;
            if tag == 1 {
                for v in flat.to_vec1::<f64>()? {
                    w.write_f64::<LittleEndian>(v).map_err(io)?;
                }
            } else {
                for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    w.write_f32::<LittleEndian>(v).map_err(io)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(fmt_err)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a mop checkpoint (bad magic)".into()));
        }
        let format_version = r.read_u32::<LittleEndian>().map_err(fmt_err)?;
        if format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {format_version}"
            )));
        }
        let component = read_str(r)?;
        let config_fingerprint = read_str(r)?;
        let step = r.read_u64::<LittleEndian>().map_err(fmt_err)?;
        let epoch = r.read_u64::<LittleEndian>().map_err(fmt_err)?;
        let metadata = serde_json::from_str(&read_str(r)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = read_str(r)?;
            let tag = r.read_u8().map_err(fmt_err)?;
            let rank = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
            let dims = (0..rank)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(fmt_err)?;
            let count: usize = dims.iter().product();
            let t = match tag {
                1 => {
                    let mut v = vec![0f64; count];
                    r.read_f64_into::<LittleEndian>(&mut v).map_err(fmt_err)?;
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                0 => {
                    let mut v = vec![0f32; count];
                    r.read_f32_into::<LittleEndian>(&mut v).map_err(fmt_err)?;
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                other => return Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
            };
            tensors.push((name, t));
        }
        Ok(Self {
            format_version,
            component,
            config_fingerprint,
            step,
            epoch,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::image::ensure_parent(path)?;
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    #[test]
    fn round_trip_preserves_everything() {
        let vs = VarStore::new(DType::F32, 3);
        vs.pp("a").var("w", &[2, 3], Init::Normal(1.0)).unwrap();
        vs.pp("b").var("w", &[4], Init::Uniform(0.5)).unwrap();
        let mut ck = Checkpoint::new("defocus", "abc123").with_params(&vs);
        ck.step = 17;
        ck.epoch = 2;
        ck.metadata = serde_json::json!({"losses": [1.0, 0.5]});
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.component, "defocus");
        assert_eq!(back.config_fingerprint, "abc123");
        assert_eq!((back.step, back.epoch), (17, 2));
        assert_eq!(back.metadata, ck.metadata);

        let fresh = VarStore::new(DType::F32, 99);
        fresh.pp("a").var("w", &[2, 3], Init::Zeros).unwrap();
        fresh.pp("b").var("w", &[4], Init::Zeros).unwrap();
        back.load_params(&fresh).unwrap();
        assert_eq!(fresh.param_hash().unwrap(), vs.param_hash().unwrap());
    }

    #[test]
    fn fingerprint_mismatch_is_rejected_unless_allowed() {
        let ck = Checkpoint::new("pformer", "aaa");
        assert!(ck.check_fingerprint("bbb", false).is_err());
        assert!(ck.check_fingerprint("bbb", true).is_ok());
        assert!(ck.check_fingerprint("aaa", false).is_ok());
    }

    #[test]
    fn bad_magic() {
        let bytes = b"NOTACKPT\x01\x00\x00\x00".to_vec();
        assert!(matches!(
            Checkpoint::read_from(&mut bytes.as_slice()),
            Err(Error::Checkpoint(_))
        ));
    }
}

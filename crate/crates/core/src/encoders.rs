//! Pluggable image encoders producing pathology prompts (patch tokens plus
//! their mean). The built-in `tiny-vit` is a small vision transformer
//! pretrained on a blur-bucket proxy task and then frozen; a sidecar adapter
//! serves tokens computed offline by any external model.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{DType, Device, Module, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::defocus::epoch_order;
use crate::degrade::{defocus_blur, procedural_tissue, OpticsParams};
use crate::error::{dim_err, Error, Result};
use crate::image::ImagePatch;
use crate::nn::{gelu, sincos_2d, Adam, Attention, LayerNorm, Linear, VarStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: String,
    pub patch: usize,
    pub d_p: usize,
    pub frozen: bool,
}

/// Patch tokens `(N_t, D_p)` and their mean `(D_p,)`.
#[derive(Debug, Clone)]
pub struct PathologyPrompt {
    pub tokens: Tensor,
    pub pooled: Tensor,
}

impl PathologyPrompt {
    pub fn from_tokens(tokens: Tensor) -> Result<Self> {
        let (_, _) = tokens.dims2()?;
        let pooled = tokens.mean(0)?;
        Ok(Self { tokens, pooled })
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[1]
    }

    pub fn token_values(&self) -> Result<Vec<f32>> {
        Ok(self.tokens.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            tokens: self.tokens.to_dtype(dtype)?,
            pooled: self.pooled.to_dtype(dtype)?,
        })
    }

    /// Stacks prompts of equal shape into `(B, N_t, D_p)`.
    pub fn stack(prompts: &[&PathologyPrompt]) -> Result<Tensor> {
        let t: Vec<&Tensor> = prompts.iter().map(|p| &p.tokens).collect();
        Ok(Tensor::stack(&t, 0)?)
    }
}

pub trait Encoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;
    fn encode(&self, image: &ImagePatch) -> Result<PathologyPrompt>;
    /// Hash of the parameters; constant for frozen encoders.
    fn param_hash(&self) -> Result<String>;
}

/// Checks that `patch` tiles the image.
pub fn check_patch_dims(spec: &EncoderSpec, h: usize, w: usize) -> Result<(usize, usize)> {
    if h % spec.patch != 0 || w % spec.patch != 0 {
        return Err(dim_err!(
            "encoder '{}' needs dims divisible by {}, got {h}x{w}",
            spec.name,
            spec.patch
        ));
    }
    Ok((h / spec.patch, w / spec.patch))
}

/// Built-in encoder specs.
pub fn list_encoders() -> Vec<EncoderSpec> {
    vec![TinyVitConfig::default().spec()]
}

#[derive(Default, Clone)]
pub struct EncoderRegistry {
    encoders: Vec<Arc<dyn Encoder>>,
}

impl EncoderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, encoder: Arc<dyn Encoder>) -> Result<()> {
        let name = &encoder.spec().name;
        if self.encoders.iter().any(|e| &e.spec().name == name) {
            return Err(Error::Registry(format!("encoder '{name}' is already registered")));
        }
        self.encoders.push(encoder);
        Ok(())
    }

    pub fn specs(&self) -> Vec<EncoderSpec> {
        self.encoders.iter().map(|e| e.spec().clone()).collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Encoder>> {
        self.encoders
            .iter()
            .find(|e| e.spec().name == name)
            .cloned()
            .ok_or_else(|| {
                let names: Vec<String> = self.encoders.iter().map(|e| e.spec().name.clone()).collect();
                Error::Registry(format!("unknown encoder '{name}'; available: {}", names.join(", ")))
            })
    }

    pub fn encode(&self, image: &ImagePatch, spec: &EncoderSpec) -> Result<PathologyPrompt> {
        let enc = self.get(&spec.name)?;
        if enc.spec() != spec {
            return Err(Error::Registry(format!(
                "encoder '{}' is registered as {:?}, requested {:?}",
                spec.name,
                enc.spec(),
                spec
            )));
        }
        enc.encode(image)
    }
}

// ---------------------------------------------------------------------------
// tiny-vit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinyVitConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pretrain: PretrainConfig,
}

impl Default for TinyVitConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            dim: 192,
            depth: 4,
            heads: 3,
            mlp_ratio: 2,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl TinyVitConfig {
    pub fn spec(&self) -> EncoderSpec {
        EncoderSpec {
            name: "tiny-vit".into(),
            patch: self.patch,
            d_p: self.dim,
            frozen: true,
        }
    }
}

/// Proxy task: classify the blur bucket of a patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub patches: usize,
    pub patch_size: usize,
    pub max_offset: i64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            patches: 512,
            patch_size: 64,
            max_offset: 6,
            epochs: 3,
            batch_size: 16,
            lr: 3e-4,
            seed: 0,
        }
    }
}

pub const BLUR_BUCKETS: usize = 4;

/// `|d| = 0`, `1..=2`, `3..=4`, `>= 5`.
pub fn blur_bucket(d: f64) -> usize {
    let a = d.abs().round() as usize;
    ((a + 1) / 2).min(BLUR_BUCKETS - 1)
}

#[derive(Debug, Clone)]
struct VitBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl VitBlock {
    fn new(vs: &VarStore, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&vs.pp("norm1"), dim)?,
            attn: Attention::new(&vs.pp("attn"), dim, dim, heads)?,
            norm2: LayerNorm::new(&vs.pp("norm2"), dim)?,
            fc1: Linear::new(&vs.pp("fc1"), dim, hidden, true)?,
            fc2: Linear::new(&vs.pp("fc2"), hidden, dim, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?)?;
        let h = self.norm2.forward(&x)?;
        let h = self.fc2.forward(&gelu(&self.fc1.forward(&h)?)?)?;
        Ok((x + h)?)
    }
}

pub struct TinyVit {
    pub vs: VarStore,
    pub config: TinyVitConfig,
    spec: EncoderSpec,
    embed: Linear,
    blocks: Vec<VitBlock>,
    norm: LayerNorm,
    /// Proxy-task classifier, unused by `encode`.
    head: Linear,
}

impl TinyVit {
    pub fn new(vs: VarStore, config: TinyVitConfig) -> Result<Self> {
        if config.dim % 4 != 0 {
            return Err(Error::Parameter("tiny-vit dim must be divisible by 4".into()));
        }
        let p = config.patch;
        let embed = Linear::new(&vs.pp("embed"), 3 * p * p, config.dim, true)?;
        let blocks = (0..config.depth)
            .map(|i| VitBlock::new(&vs.pp(format!("block{i}")), config.dim, config.heads, config.dim * config.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&vs.pp("norm"), config.dim)?;
        let head = Linear::new(&vs.pp("head"), config.dim, BLUR_BUCKETS, true)?;
        Ok(Self {
            spec: config.spec(),
            vs,
            config,
            embed,
            blocks,
            norm,
            head,
        })
    }

    /// `(B, 3, H, W)` -> `(B, N_t, D_p)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (rows, cols) = check_patch_dims(&self.spec, h, w)?;
        let p = self.config.patch;
        let patches = ((x - 0.5)? * 4.0)?
            .reshape((b, c, rows, p, cols, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .reshape((b, rows * cols, c * p * p))?;
        let pos = sincos_2d(rows, cols, self.config.dim, x.dtype())?;
        let mut t = self.embed.forward(&patches)?.broadcast_add(&pos)?;
        for blk in &self.blocks {
            t = blk.forward(&t)?;
        }
        Ok(self.norm.forward(&t)?)
    }

    pub fn encode_batch(&self, images: &[&ImagePatch]) -> Result<Vec<PathologyPrompt>> {
        let x = ImagePatch::batch_to_tensor(images, self.vs.dtype())?;
        let t = self.forward(&x)?.detach();
        (0..images.len()).map(|i| PathologyPrompt::from_tokens(t.get(i)?)).collect()
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let t = self.forward(x)?;
        Ok(self.head.forward(&t.mean(1)?)?)
    }

    /// Trains on the proxy task from a fresh initialization and returns the
    /// frozen encoder plus its checkpoint.
    pub fn pretrain(config: TinyVitConfig, dtype: DType, fingerprint: &str) -> Result<(Self, Checkpoint)> {
        let pc = config.pretrain.clone();
        let model = Self::new(VarStore::new(dtype, pc.seed), config)?;
        let params = OpticsParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(pc.seed ^ 0x7_1e4);
        let mut images = Vec::with_capacity(pc.patches);
        let mut labels = Vec::with_capacity(pc.patches);
        for i in 0..pc.patches {
            let d = rng.gen_range(-pc.max_offset..=pc.max_offset) as f64;
            let sharp = procedural_tissue(format!("vit{i}"), pc.patch_size, pc.patch_size, rng.gen())?;
            images.push(defocus_blur(&sharp, d, &params));
            labels.push(blur_bucket(d) as u32);
        }
        let mut opt = Adam::new(model.vs.trainable(), pc.lr)?;
        let mut losses = Vec::with_capacity(pc.epochs);
        for epoch in 0..pc.epochs {
            let order = epoch_order(images.len(), pc.seed, epoch);
            let mut total = 0.0;
            for chunk in order.chunks(pc.batch_size.max(1)) {
                let refs: Vec<&ImagePatch> = chunk.iter().map(|&i| &images[i]).collect();
                let x = ImagePatch::batch_to_tensor(&refs, dtype)?;
                let y: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
                let y = Tensor::new(y.as_slice(), &Device::Cpu)?;
                let logits = model.logits(&x)?;
                let loss = cross_entropy(&logits, &y)?;
                total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
                opt.backward_step(&loss)?;
            }
            losses.push(total / images.len() as f64);
            log::info!("tiny-vit pretrain epoch {epoch}: loss {:.4}", losses[epoch]);
        }
        let mut ck = Checkpoint::new("tiny-vit", fingerprint).with_params(&model.vs);
        ck.epoch = pc.epochs as u64;
        ck.step = opt.step;
        ck.metadata = serde_json::json!({ "config": model.config, "epoch_loss": losses });
        Ok((model, ck))
    }

    pub fn from_checkpoint(config: TinyVitConfig, dtype: DType, ck: &Checkpoint) -> Result<Self> {
        let model = Self::new(VarStore::new(dtype, config.pretrain.seed), config)?;
        ck.load_params(&model.vs)?;
        Ok(model)
    }
}

/// Mean negative log-likelihood of integer `targets` under `logits (B, K)`.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let logp = shifted.broadcast_sub(&lse)?;
    let picked = logp.gather(&targets.unsqueeze(1)?, 1)?;
    Ok(picked.neg()?.mean_all()?)
}

impl Encoder for TinyVit {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, image: &ImagePatch) -> Result<PathologyPrompt> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    fn param_hash(&self) -> Result<String> {
        self.vs.param_hash()
    }
}

// ---------------------------------------------------------------------------
// sidecar tokens

/// Writes `N_t`, `D_p` (little-endian `u32`) then the tokens as `f32`.
pub fn write_tokens(path: impl AsRef<Path>, prompt: &PathologyPrompt) -> Result<()> {
    let path = path.as_ref();
    crate::image::ensure_parent(path)?;
    let mut buf = Vec::new();
    write_tokens_to(&mut buf, prompt).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn write_tokens_to(w: &mut impl Write, prompt: &PathologyPrompt) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(prompt.num_tokens() as u32)?;
    w.write_u32::<LittleEndian>(prompt.dim() as u32)?;
    let vals = prompt
        .token_values()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    for v in vals {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_tokens(path: impl AsRef<Path>) -> Result<PathologyPrompt> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = bytes.as_slice();
    let bad = |m: String| Error::Format(format!("{}: {m}", path.display()));
    let n = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))? as usize;
    let d = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))? as usize;
    if r.len() != n * d * 4 {
        return Err(bad(format!("header says {n}x{d} tokens but payload has {} bytes", r.len())));
    }
    let mut vals = vec![0f32; n * d];
    r.read_f32_into::<LittleEndian>(&mut vals).map_err(|e| bad(e.to_string()))?;
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite token value".into()));
    }
    PathologyPrompt::from_tokens(Tensor::from_vec(vals, (n, d), &Device::Cpu)?)
}

/// Serves tokens from `<dir>/<image-id>.tok`.
pub struct SidecarEncoder {
    spec: EncoderSpec,
    dir: PathBuf,
}

impl SidecarEncoder {
    pub fn new(name: impl Into<String>, patch: usize, d_p: usize, dir: impl Into<PathBuf>) -> Self {
        Self {
            spec: EncoderSpec {
                name: name.into(),
                patch,
                d_p,
                frozen: true,
            },
            dir: dir.into(),
        }
    }
}

impl Encoder for SidecarEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, image: &ImagePatch) -> Result<PathologyPrompt> {
        let (h, w) = image.dims();
        let (rows, cols) = check_patch_dims(&self.spec, h, w)?;
        let path = self.dir.join(format!("{}.tok", image.id));
        let p = read_tokens(&path)?;
        if p.num_tokens() != rows * cols || p.dim() != self.spec.d_p {
            return Err(dim_err!(
                "{}: {}x{} tokens, expected {}x{} for a {h}x{w} image",
                path.display(),
                p.num_tokens(),
                p.dim(),
                rows * cols,
                self.spec.d_p
            ));
        }
        Ok(p)
    }

    fn param_hash(&self) -> Result<String> {
        Ok(format!("sidecar:{}", self.dir.display()))
    }
}

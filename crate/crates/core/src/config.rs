//! The pipeline configuration document and its fingerprint.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canny::{DEFAULT_HIGH, DEFAULT_LOW};
use crate::defocus::{DefocusConfig, DefocusDataConfig};
use crate::degrade::{OpticsParams, StainRanges};
use crate::diffusion::PDiffusionConfig;
use crate::encoders::TinyVitConfig;
use crate::error::{Error, Result};
use crate::pformer::PFormerConfig;
use crate::prompt_restore::PromptRestorerConfig;

/// Synthetic data generation and the restoration training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of sharp source PNGs; procedural tissue when unset.
    pub sources: Option<PathBuf>,
    /// Number of procedural stacks (ignored when `sources` is set).
    pub stacks: usize,
    /// Side of procedural source images.
    pub image_size: usize,
    /// Plane offsets of each simulated stack, in plane-index units.
    pub offsets: Vec<f64>,
    pub spacing_um: f64,
    /// Defocus change across each image; 0 gives uniform planes.
    pub tilt: f64,
    pub stain_augment: bool,
    pub stain: StainRanges,
    /// Side of the training crops.
    pub patch_size: usize,
    /// Number of (degraded, sharp) training crops drawn from the stacks.
    pub pairs: usize,
    /// Planes with `min_offset <= |offset| <= max_offset` supply training crops.
    pub min_offset: f64,
    pub max_offset: f64,
    /// Inference tiling.
    pub tile_size: usize,
    pub tile_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sources: None,
            stacks: 8,
            image_size: 256,
            offsets: (-6..=6).map(f64::from).collect(),
            spacing_um: 0.8,
            tilt: 0.0,
            stain_augment: false,
            stain: StainRanges::default(),
            patch_size: 64,
            pairs: 256,
            min_offset: 1.0,
            max_offset: 4.0,
            tile_size: 256,
            tile_stride: 224,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefocusSection {
    /// Labelled synthetic patches used for training.
    pub train_patches: usize,
    /// Stain-normalize patches before estimation at inference time.
    pub apply_stain_norm: bool,
    pub data: DefocusDataConfig,
    pub model: DefocusConfig,
}

impl Default for DefocusSection {
    fn default() -> Self {
        Self {
            train_patches: 2000,
            apply_stain_norm: false,
            data: DefocusDataConfig::default(),
            model: DefocusConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    /// `tiny-vit`, or the name under which sidecar tokens are served.
    pub name: String,
    /// Directory of `<image-id>.tok` files for an external encoder.
    pub sidecar_dir: Option<PathBuf>,
    pub tiny_vit: TinyVitConfig,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            name: "tiny-vit".into(),
            sidecar_dir: None,
            tiny_vit: TinyVitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgesConfig {
    pub low: f64,
    pub high: f64,
}

impl Default for EdgesConfig {
    fn default() -> Self {
        Self {
            low: DEFAULT_LOW,
            high: DEFAULT_HIGH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub group_by_slide: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { group_by_slide: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub optics: OpticsParams,
    pub defocus: DefocusSection,
    pub encoder: EncoderSection,
    pub prompt_restorer: PromptRestorerConfig,
    pub edges: EdgesConfig,
    pub pformer: PFormerConfig,
    pub pdiffusion: PDiffusionConfig,
    pub metrics: MetricsConfig,
    pub run: RunConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Validation(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Canonical form: JSON with keys sorted at every level.
    pub fn canonical(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }

    /// SHA-256 of the canonical form, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn dtype(&self) -> DType {
        self.run.precision.dtype()
    }

    /// Sets the run seed and every component seed to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.run.seed = seed;
        self.defocus.model.seed = seed;
        self.encoder.tiny_vit.pretrain.seed = seed;
        self.prompt_restorer.seed = seed;
        self.pformer.seed = seed;
        self.pdiffusion.seed = seed;
        self
    }

    /// Cross-section consistency checks on top of each section's own.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        self.optics.validate().map_err(|e| Error::Validation(e.to_string()))?;
        self.prompt_restorer.validate().map_err(|e| Error::Validation(e.to_string()))?;
        self.pformer.validate().map_err(|e| Error::Validation(e.to_string()))?;
        self.pdiffusion.denoiser.validate().map_err(|e| Error::Validation(e.to_string()))?;
        let d = &self.data;
        if d.offsets.is_empty() || d.offsets.windows(2).any(|w| w[0] >= w[1]) {
            return bad("data.offsets must be non-empty and strictly increasing".into());
        }
        if !(d.min_offset >= 0.0 && d.min_offset <= d.max_offset) {
            return bad("data.min_offset must lie in [0, data.max_offset]".into());
        }
        if !d.offsets.iter().any(|o| o.abs() >= d.min_offset && o.abs() <= d.max_offset) {
            return bad("no offset in data.offsets lies within [min_offset, max_offset]".into());
        }
        if d.sources.is_none() && d.stacks == 0 {
            return bad("data.stacks must be >= 1".into());
        }
        if d.tile_stride == 0 || d.tile_stride > d.tile_size {
            return bad("data.tile_stride must lie in [1, tile_size]".into());
        }
        let multiple = self.size_multiple();
        for (name, v) in [
            ("data.patch_size", d.patch_size),
            ("data.tile_size", d.tile_size),
            ("data.image_size", d.image_size),
            ("defocus.data.patch_size", self.defocus.data.patch_size),
        ] {
            if v == 0 || v % multiple != 0 {
                return bad(format!("{name} = {v} must be a positive multiple of {multiple}"));
            }
        }
        if d.patch_size > d.image_size {
            return bad("data.patch_size exceeds data.image_size".into());
        }
        let d_p = self.encoder.tiny_vit.dim;
        for (name, v) in [
            ("prompt_restorer.d_p", self.prompt_restorer.d_p),
            ("pformer.d_p", self.pformer.d_p),
            ("pdiffusion.denoiser.d_p", self.pdiffusion.denoiser.d_p),
        ] {
            if self.encoder.name == "tiny-vit" && v != d_p {
                return bad(format!("{name} = {v} differs from the encoder dim {d_p}"));
            }
        }
        let c_d = self.defocus.model.widths[3];
        if self.prompt_restorer.c_d != c_d {
            return bad(format!(
                "prompt_restorer.c_d = {} differs from the defocus prompt channels {c_d}",
                self.prompt_restorer.c_d
            ));
        }
        if !(0.0 <= self.edges.low && self.edges.low < self.edges.high && self.edges.high <= 1.0) {
            return bad("edges thresholds need 0 <= low < high <= 1".into());
        }
        if self.encoder.name != "tiny-vit" && self.encoder.sidecar_dir.is_none() {
            return bad(format!("encoder '{}' needs encoder.sidecar_dir", self.encoder.name));
        }
        Ok(())
    }

    /// Every image fed to the models must be a multiple of this.
    pub fn size_multiple(&self) -> usize {
        let m = [
            crate::defocus::STRIDE,
            self.encoder.tiny_vit.patch,
            self.pformer.size_multiple(),
            self.pdiffusion.denoiser.size_multiple(),
        ];
        m.into_iter().fold(1, lcm)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

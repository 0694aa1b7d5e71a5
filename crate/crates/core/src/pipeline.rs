//! Orchestration of the whole workflow over one working directory:
//! simulate -> train (defocus, prompt, pformer, pdiffusion) -> restore ->
//! evaluate -> diagnose.
//!
//! Layout of a working directory:
//!
//! ```text
//! stacks/manifest.txt        focal stacks (+ per-stack labels)
//! stacks/planes.txt          every plane as an image-set manifest
//! stacks/references.txt      the sharp image for every plane id
//! checkpoints/<name>.ckpt    defocus, encoder, prompt, pformer, pdiffusion
//! prompts/<pair-id>.tok      restored pathology prompts of the training crops
//! restored/                  restore outputs and their manifest
//! report/                    evaluation table and records
//! diagnostics/               prompt distances, heatmap grid, router use
//! runs/<command>.json        run records
//! ```

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canny::{canny, EdgeMap};
use crate::checkpoint::Checkpoint;
use crate::config::PipelineConfig;
use crate::defocus::{defocus_heatmap, synth_defocus_dataset, train_defocus, DefocusEstimator, DefocusPrompt};
use crate::degrade::{procedural_tissue, stain_augment, synth_focal_stack};
use crate::diffusion::{train_pdiffusion, DiffusionSample, PDiffusion};
use crate::edge::EdgePromptNet;
use crate::encoders::{read_tokens, write_tokens, Encoder, PathologyPrompt, SidecarEncoder, TinyVit};
use crate::error::{dim_err, Error, Result};
use crate::image::{colormap, hconcat, load_image, save_png, ImagePatch};
use crate::manifest::{
    load_manifest, read_image_records, write_image_manifest, write_labels, write_manifest, FocalStack, ImageRecord,
    StackRecord,
};
use crate::metrics::{evaluate_dataset, perceptual_proxy, psnr, write_report, EncoderProxy, MetricReport};
use crate::nn::VarStore;
use crate::pformer::{mean_router_weights, train_pformer, PFormer, PFormerSample};
use crate::prompt_restore::{prompt_distance_report, train_prompt_restorer, PromptDistance, PromptRestorer, PromptTriple};
use crate::tiling::{stitch_tiles, tile_image, TileIndex};

/// Trainable stages, in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Defocus,
    Prompt,
    PFormer,
    PDiffusion,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Defocus, Component::Prompt, Component::PFormer, Component::PDiffusion];

    pub fn name(self) -> &'static str {
        match self {
            Component::Defocus => "defocus",
            Component::Prompt => "prompt",
            Component::PFormer => "pformer",
            Component::PDiffusion => "pdiffusion",
        }
    }
}

impl std::str::FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown component `{s}` (defocus, prompt, pformer, pdiffusion)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
    Both,
}

impl Stage {
    fn runs_coarse(self) -> bool {
        self != Stage::Fine
    }

    fn runs_fine(self) -> bool {
        self != Stage::Coarse
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Stage::Coarse),
            "fine" => Ok(Stage::Fine),
            "both" => Ok(Stage::Both),
            _ => Err(Error::Usage(format!("unknown stage `{s}` (coarse, fine, both)"))),
        }
    }
}

// ---------------------------------------------------------------------------
// working directory, lock, run record

#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stacks_manifest(&self) -> PathBuf {
        self.root.join("stacks/manifest.txt")
    }

    pub fn planes_manifest(&self) -> PathBuf {
        self.root.join("stacks/planes.txt")
    }

    pub fn references_manifest(&self) -> PathBuf {
        self.root.join("stacks/references.txt")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn prompts_dir(&self) -> PathBuf {
        self.root.join("prompts")
    }

    pub fn restored_dir(&self) -> PathBuf {
        self.root.join("restored")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn diagnostics_dir(&self) -> PathBuf {
        self.root.join("diagnostics")
    }

    pub fn lock_path(&self) -> PathBuf {
        self.root.join(".mop.lock")
    }

    pub fn run_record(&self, command: &str) -> PathBuf {
        self.root.join("runs").join(format!("{command}.json"))
    }
}

/// Exclusive ownership of a working directory for the duration of a run.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(ws: &Workspace) -> Result<Self> {
        std::fs::create_dir_all(&ws.root).map_err(|e| Error::io(&ws.root, e))?;
        let path = ws.lock_path();
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Usage(format!(
                    "{} is owned by another run (lock file {}; remove it if that run is gone)",
                    ws.root.display(),
                    path.display()
                ))
            } else {
                Error::io(&path, e)
            }
        })?;
        let _ = writeln!(f, "pid={}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_fingerprint: String,
    pub seed: u64,
    pub git_describe: String,
    pub started_unix_s: u64,
    pub duration_s: f64,
    pub status: String,
    pub outputs: Vec<String>,
}

/// `git describe` of the working tree, or the package version outside git.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .stderr(std::process::Stdio::null())
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

/// Runs `f` while holding the directory lock and writes the run record,
/// whether or not `f` succeeds.
pub fn with_run_record<T>(
    ws: &Workspace,
    command: &str,
    fingerprint: &str,
    seed: u64,
    f: impl FnOnce() -> Result<(T, Vec<PathBuf>)>,
) -> Result<T> {
    let _lock = RunLock::acquire(ws)?;
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let clock = Instant::now();
    let result = f();
    let (status, outputs) = match &result {
        Ok((_, paths)) => ("ok".to_string(), paths.iter().map(|p| p.display().to_string()).collect()),
        Err(e) => (format!("error: {e}"), Vec::new()),
    };
    let record = RunRecord {
        command: command.to_string(),
        config_fingerprint: fingerprint.to_string(),
        seed,
        git_describe: git_describe(),
        started_unix_s: started,
        duration_s: clock.elapsed().as_secs_f64(),
        status,
        outputs,
    };
    let path = ws.run_record(command);
    crate::image::ensure_parent(&path)?;
    let text = serde_json::to_string_pretty(&record).expect("record serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    result.map(|(v, _)| v)
}

// ---------------------------------------------------------------------------
// training data

/// A (degraded, sharp) crop from a simulated stack.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub lq: ImagePatch,
    pub hq: ImagePatch,
    /// Plane offset the crop was taken from.
    pub offset: f64,
}

/// Draws `n` crops of side `patch` from planes whose `|offset|` lies in
/// `[min_offset, max_offset]`. A pure function of its arguments.
pub fn draw_pairs(
    stacks: &[FocalStack],
    n: usize,
    patch: usize,
    min_offset: f64,
    max_offset: f64,
    seed: u64,
    prefix: &str,
) -> Result<Vec<TrainingPair>> {
    let eligible: Vec<(usize, usize)> = stacks
        .iter()
        .enumerate()
        .flat_map(|(s, st)| {
            st.planes
                .iter()
                .enumerate()
                .filter(|(_, (o, _))| o.abs() >= min_offset && o.abs() <= max_offset)
                .map(move |(k, _)| (s, k))
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::Validation(format!(
            "no plane with |offset| in [{min_offset}, {max_offset}] to draw training crops from"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (s, k) = eligible[rng.gen_range(0..eligible.len())];
            let st = &stacks[s];
            let (h, w) = st.fused.dims();
            if h < patch || w < patch {
                return Err(dim_err!("stack {} ({h}x{w}) is smaller than the {patch} crop", st.id));
            }
            let r = rng.gen_range(0..=h - patch);
            let c = rng.gen_range(0..=w - patch);
            let id = format!("{prefix}{i:05}");
            let (offset, plane) = &st.planes[k];
            Ok(TrainingPair {
                lq: plane.crop(r, c, patch, patch)?.with_id(id.clone()),
                hq: st.fused.crop(r, c, patch, patch)?.with_id(id),
                offset: *offset,
            })
        })
        .collect()
}

/// Prompts of one degraded patch.
#[derive(Debug, Clone)]
pub struct PatchPrompts {
    pub p_d: DefocusPrompt,
    pub p_lp: PathologyPrompt,
}

/// `P_D` and `P_LP` for a batch of patches.
pub fn extract_prompts(
    defocus: &DefocusEstimator,
    encoder: &dyn Encoder,
    images: &[&ImagePatch],
    apply_stain_norm: bool,
) -> Result<Vec<PatchPrompts>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let est = defocus.estimate_batch(chunk, apply_stain_norm)?;
        for (im, (_, p_d)) in chunk.iter().zip(est) {
            out.push(PatchPrompts {
                p_d,
                p_lp: encoder.encode(im)?,
            });
        }
    }
    Ok(out)
}

fn mix_seed(seed: u64, key: &str, index: u64) -> u64 {
    // FNV-1a over the key, folded with the seed and index
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

// ---------------------------------------------------------------------------
// inference

/// The trained models needed for a restoration stage.
pub struct StageModels {
    pub defocus: DefocusEstimator,
    pub encoder: Arc<dyn Encoder>,
    pub prompt: PromptRestorer,
    pub pformer: Option<PFormer>,
    pub pdiffusion: Option<PDiffusion>,
    pub low: f64,
    pub high: f64,
    pub apply_stain_norm: bool,
}

/// Outputs for one tile.
#[derive(Debug, Clone)]
pub struct TileOutput {
    pub coarse: ImagePatch,
    pub output: ImagePatch,
    pub p_d: DefocusPrompt,
    pub edges: EdgeMap,
}

impl StageModels {
    /// Restores one model-sized patch. `coarse` supplies `I'` when the
    /// coarse stage is skipped; `seed` drives the fine-stage sampler.
    pub fn restore_patch(
        &self,
        lq: &ImagePatch,
        coarse: Option<&ImagePatch>,
        stage: Stage,
        seed: u64,
        on_step: impl FnMut(usize, &Tensor),
    ) -> Result<TileOutput> {
        let (_, p_d) = self.defocus.estimate(lq, self.apply_stain_norm)?;
        let p_lp = self.encoder.encode(lq)?;
        let p_p = self.prompt.restore_prompt(&p_lp, &p_d)?;
        let coarse = if stage.runs_coarse() {
            let m = self
                .pformer
                .as_ref()
                .ok_or_else(|| Error::Dependency("the coarse stage needs a p-former checkpoint".into()))?;
            m.restore(lq, &p_p)?
        } else {
            coarse
                .cloned()
                .ok_or_else(|| Error::Usage("the fine stage needs a coarse input".into()))?
        };
        if coarse.dims() != lq.dims() {
            return Err(dim_err!("coarse input {:?} does not match the image {:?}", coarse.dims(), lq.dims()));
        }
        let edges = canny(lq, self.low, self.high)?;
        let output = if stage.runs_fine() {
            let m = self
                .pdiffusion
                .as_ref()
                .ok_or_else(|| Error::Dependency("the fine stage needs a p-diffusion checkpoint".into()))?;
            let item = DiffusionSample {
                hq: coarse.clone(),
                coarse: coarse.clone(),
                lq: lq.clone(),
                edges: edges.clone(),
                p_d: p_d.clone(),
                p_p,
            };
            m.sample(&item, seed, on_step)?.with_id(lq.id.clone())
        } else {
            coarse.clone()
        };
        Ok(TileOutput {
            coarse,
            output,
            p_d,
            edges,
        })
    }
}

/// Tile side used for an image: the configured size, or the largest
/// allowed multiple that fits a smaller image.
pub fn tile_side(h: usize, w: usize, tile_size: usize, multiple: usize) -> Result<usize> {
    let side = tile_size.min(h.min(w) / multiple * multiple);
    if side == 0 {
        return Err(dim_err!("image {h}x{w} is smaller than the model granularity {multiple}"));
    }
    Ok(side)
}

#[derive(Debug, Clone, Default)]
pub struct RestoreOptions {
    /// Coarse images (single PNG or image-set manifest) for `stage = fine`.
    pub fine_input: Option<PathBuf>,
    /// Write defocus heatmap and edge PNGs next to the outputs.
    pub debug: bool,
    /// Write every intermediate state of the sampler.
    pub debug_steps: bool,
}

/// Restored image plus its coarse stage output.
pub struct Restored {
    pub coarse: ImagePatch,
    pub output: ImagePatch,
}

fn read_inputs(path: &Path) -> Result<Vec<(ImageRecord, ImagePatch)>> {
    let is_png = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("png"))
        .unwrap_or(false);
    if is_png {
        let im = load_image(path)?;
        let rec = ImageRecord {
            id: im.id.clone(),
            path: path.to_path_buf(),
            slide: None,
            row: 0,
            col: 0,
        };
        return Ok(vec![(rec, im)]);
    }
    read_image_records(path)?
        .into_iter()
        .map(|r| {
            let im = load_image(&r.path)?.with_id(r.id.clone());
            Ok((r, im))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// the pipeline

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub prompt_distance: Vec<(String, PromptDistance)>,
    /// Fraction of patches with `mse_p < mse_lp`.
    pub restored_closer: f64,
    pub heatmap_panels: usize,
    /// `[block][expert]` mean router weight.
    pub utilization: Vec<Vec<f64>>,
}

/// A configured pipeline bound to a working directory.
pub struct Pipeline {
    /// Effective configuration (after command line overrides).
    pub config: PipelineConfig,
    /// Fingerprint of the configuration document.
    pub fingerprint: String,
    pub ws: Workspace,
    pub allow_mismatch: bool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, fingerprint: impl Into<String>, root: impl Into<PathBuf>) -> Self {
        Self {
            config,
            fingerprint: fingerprint.into(),
            ws: Workspace::new(root),
            allow_mismatch: false,
        }
    }

    fn dtype(&self) -> DType {
        self.config.dtype()
    }

    fn seed(&self) -> u64 {
        self.config.run.seed
    }

    fn load_checkpoint(&self, name: &str, stage: &str) -> Result<Checkpoint> {
        let path = self.ws.checkpoint(name);
        if !path.exists() {
            return Err(Error::Dependency(format!(
                "{} not found; run `mop train {stage}` first",
                path.display()
            )));
        }
        let ck = Checkpoint::load(&path)?;
        ck.check_fingerprint(&self.fingerprint, self.allow_mismatch)?;
        Ok(ck)
    }

    fn save_checkpoint(&self, name: &str, mut ck: Checkpoint) -> Result<PathBuf> {
        if let serde_json::Value::Object(m) = &mut ck.metadata {
            m.insert("seed".into(), self.seed().into());
        }
        let path = self.ws.checkpoint(name);
        ck.save(&path)?;
        Ok(path)
    }

    pub fn stacks(&self) -> Result<Vec<FocalStack>> {
        let path = self.ws.stacks_manifest();
        if !path.exists() {
            return Err(Error::Dependency(format!("{} not found; run `mop simulate` first", path.display())));
        }
        load_manifest(&path)
    }

    pub fn defocus_model(&self) -> Result<DefocusEstimator> {
        let ck = self.load_checkpoint("defocus", "defocus")?;
        let m = DefocusEstimator::new(VarStore::new(self.dtype(), 0), self.config.defocus.model.clone())?;
        ck.load_params(&m.vs)?;
        Ok(m)
    }

    pub fn encoder(&self) -> Result<Arc<dyn Encoder>> {
        let e = &self.config.encoder;
        if e.name == "tiny-vit" {
            let ck = self.load_checkpoint("encoder", "prompt")?;
            Ok(Arc::new(TinyVit::from_checkpoint(e.tiny_vit.clone(), self.dtype(), &ck)?))
        } else {
            let dir = e.sidecar_dir.clone().expect("validated");
            Ok(Arc::new(SidecarEncoder::new(e.name.clone(), e.tiny_vit.patch, e.tiny_vit.dim, dir)))
        }
    }

    pub fn prompt_model(&self) -> Result<PromptRestorer> {
        let ck = self.load_checkpoint("prompt", "prompt")?;
        let m = PromptRestorer::new(VarStore::new(self.dtype(), 0), self.config.prompt_restorer.clone())?;
        ck.load_params(&m.vs)?;
        Ok(m)
    }

    pub fn pformer_model(&self) -> Result<PFormer> {
        let ck = self.load_checkpoint("pformer", "pformer")?;
        let m = PFormer::new(VarStore::new(self.dtype(), 0), self.config.pformer.clone())?;
        ck.load_params(&m.vs)?;
        Ok(m)
    }

    pub fn pdiffusion_model(&self) -> Result<PDiffusion> {
        let ck = self.load_checkpoint("pdiffusion", "pdiffusion")?;
        let c_d = self.config.defocus.model.widths[3];
        let m = PDiffusion::new(VarStore::new(self.dtype(), 0), self.config.pdiffusion.clone(), c_d, None)?;
        ck.load_params(&m.vs)?;
        Ok(m)
    }

    /// Models for `stage`, failing with a dependency error naming the first
    /// missing checkpoint.
    pub fn stage_models(&self, stage: Stage) -> Result<StageModels> {
        Ok(StageModels {
            defocus: self.defocus_model()?,
            encoder: self.encoder()?,
            prompt: self.prompt_model()?,
            pformer: if stage.runs_coarse() { Some(self.pformer_model()?) } else { None },
            pdiffusion: if stage.runs_fine() { Some(self.pdiffusion_model()?) } else { None },
            low: self.config.edges.low,
            high: self.config.edges.high,
            apply_stain_norm: self.config.defocus.apply_stain_norm,
        })
    }

    /// The restoration training crops.
    pub fn training_pairs(&self) -> Result<Vec<TrainingPair>> {
        let d = &self.config.data;
        draw_pairs(&self.stacks()?, d.pairs, d.patch_size, d.min_offset, d.max_offset, self.seed(), "pair")
    }

    // -- simulate ----------------------------------------------------------

    fn source_images(&self) -> Result<Vec<ImagePatch>> {
        let d = &self.config.data;
        match &d.sources {
            Some(dir) => {
                let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
                let mut paths: Vec<PathBuf> = entries
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().map(|x| x.eq_ignore_ascii_case("png")).unwrap_or(false))
                    .collect();
                paths.sort();
                if paths.is_empty() {
                    return Err(Error::io(
                        dir,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "no PNG source images"),
                    ));
                }
                paths.iter().map(load_image).collect()
            }
            None => (0..d.stacks)
                .map(|i| procedural_tissue(format!("s{i:03}"), d.image_size, d.image_size, mix_seed(self.seed(), "source", i as u64)))
                .collect(),
        }
    }

    /// Generates focal stacks, label sidecars and manifests; returns the
    /// stack manifest path.
    pub fn run_simulate(&self) -> Result<PathBuf> {
        let d = &self.config.data;
        let stacks_dir = self.ws.root.join("stacks");
        let tilt = (d.tilt != 0.0).then_some(d.tilt);
        let mut records = Vec::new();
        let mut planes = Vec::new();
        let mut references = Vec::new();
        for (i, sharp) in self.source_images()?.into_iter().enumerate() {
            let sharp = if d.stain_augment {
                stain_augment(&sharp, mix_seed(self.seed(), "stain", i as u64), &d.stain)
            } else {
                sharp
            };
            let (stack, labels) = synth_focal_stack(&sharp, &d.offsets, &self.config.optics, tilt, d.spacing_um)?;
            let dir = stacks_dir.join(&stack.id);
            let fused = dir.join("fused.png");
            save_png(&stack.fused, &fused)?;
            let mut plane_paths = Vec::with_capacity(stack.planes.len());
            for (k, (offset, plane)) in stack.planes.iter().enumerate() {
                let p = dir.join(format!("p{k:02}.png"));
                save_png(plane, &p)?;
                plane_paths.push((*offset, p.clone()));
                planes.push(ImageRecord {
                    id: plane.id.clone(),
                    path: p,
                    slide: None,
                    row: 0,
                    col: 0,
                });
                references.push(ImageRecord {
                    id: plane.id.clone(),
                    path: fused.clone(),
                    slide: None,
                    row: 0,
                    col: 0,
                });
            }
            let label_path = dir.join("labels.txt");
            write_labels(&label_path, &labels)?;
            records.push(StackRecord {
                id: stack.id.clone(),
                fused,
                spacing_um: d.spacing_um,
                planes: plane_paths,
                labels: Some(label_path),
            });
            log::info!("simulated stack {} ({} planes)", stack.id, stack.planes.len());
        }
        let manifest = self.ws.stacks_manifest();
        write_manifest(&manifest, &records)?;
        write_image_manifest(self.ws.planes_manifest(), &planes)?;
        write_image_manifest(self.ws.references_manifest(), &references)?;
        Ok(manifest)
    }

    // -- train -------------------------------------------------------------

    /// Trains one component; returns its checkpoint path.
    pub fn run_train(&self, component: Component) -> Result<PathBuf> {
        match component {
            Component::Defocus => self.train_defocus(),
            Component::Prompt => self.train_prompt(),
            Component::PFormer => self.train_pformer(),
            Component::PDiffusion => self.train_pdiffusion(),
        }
    }

    fn train_defocus(&self) -> Result<PathBuf> {
        let s = &self.config.defocus;
        let mut model_cfg = s.model.clone();
        model_cfg.seed = self.seed();
        let data = synth_defocus_dataset(s.train_patches, &s.data, &self.config.optics, mix_seed(self.seed(), "defocus", 0))?;
        let model = DefocusEstimator::new(VarStore::new(self.dtype(), self.seed()), model_cfg)?;
        let (ck, _) = train_defocus(&model, &data, &self.fingerprint, |e, l| {
            log::info!("defocus epoch {e}: loss {l:.5}");
        })?;
        self.save_checkpoint("defocus", ck)
    }

    fn train_prompt(&self) -> Result<PathBuf> {
        let pairs = self.training_pairs()?;
        let defocus = self.defocus_model()?;
        let encoder: Arc<dyn Encoder> = if self.config.encoder.name == "tiny-vit" {
            let (vit, ck) = TinyVit::pretrain(self.config.encoder.tiny_vit.clone(), self.dtype(), &self.fingerprint)?;
            self.save_checkpoint("encoder", ck)?;
            Arc::new(vit)
        } else {
            self.encoder()?
        };
        let lq: Vec<&ImagePatch> = pairs.iter().map(|p| &p.lq).collect();
        let prompts = extract_prompts(&defocus, encoder.as_ref(), &lq, self.config.defocus.apply_stain_norm)?;
        let triples = pairs
            .iter()
            .zip(prompts)
            .map(|(p, pr)| {
                Ok(PromptTriple {
                    p_lp: pr.p_lp,
                    p_d: pr.p_d,
                    p_hp: encoder.encode(&p.hq)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = PromptRestorer::new(VarStore::new(self.dtype(), self.seed()), self.config.prompt_restorer.clone())?;
        let (ck, _) = train_prompt_restorer(&model, &triples, &self.fingerprint, |e, l| {
            log::info!("prompt restorer epoch {e}: loss {l:.5}");
        })?;
        let path = self.save_checkpoint("prompt", ck)?;
        // precomputed sidecars decouple the encoder from downstream training
        let dir = self.ws.prompts_dir();
        for (pair, t) in pairs.iter().zip(&triples) {
            let p_p = model.restore_prompt(&t.p_lp, &t.p_d)?;
            write_tokens(dir.join(format!("{}.tok", pair.lq.id)), &p_p)?;
        }
        Ok(path)
    }

    /// Restored prompts of the training crops, read from the sidecars.
    pub fn prompt_sidecars(&self, pairs: &[TrainingPair]) -> Result<Vec<PathologyPrompt>> {
        let dir = self.ws.prompts_dir();
        pairs
            .iter()
            .map(|p| {
                let path = dir.join(format!("{}.tok", p.lq.id));
                if !path.exists() {
                    return Err(Error::Dependency(format!(
                        "prompt sidecar {} not found; run `mop train prompt` first",
                        path.display()
                    )));
                }
                read_tokens(&path)
            })
            .collect()
    }

    fn train_pformer(&self) -> Result<PathBuf> {
        let pairs = self.training_pairs()?;
        let prompts = self.prompt_sidecars(&pairs)?;
        let data: Vec<PFormerSample> = pairs
            .into_iter()
            .zip(prompts)
            .map(|(p, p_p)| PFormerSample { lq: p.lq, hq: p.hq, p_p })
            .collect();
        let mut cfg = self.config.pformer.clone();
        cfg.seed = self.seed();
        let model = PFormer::new(VarStore::new(self.dtype(), self.seed()), cfg)?;
        let (ck, _) = train_pformer(&model, &data, &self.fingerprint, |e, l, util| {
            let last: Vec<String> = util.last().map(|u| u.iter().map(|w| format!("{w:.3}")).collect()).unwrap_or_default();
            log::info!("p-former epoch {e}: loss {l:.5}, last-block experts [{}]", last.join(", "));
            true
        })?;
        self.save_checkpoint("pformer", ck)
    }

    /// Diffusion training items: coarse outputs from the trained p-former,
    /// edges and defocus prompts of the degraded crops.
    pub fn diffusion_samples(&self, pairs: Vec<TrainingPair>, prompts: Vec<PathologyPrompt>) -> Result<Vec<DiffusionSample>> {
        let pformer = self.pformer_model()?;
        let defocus = self.defocus_model()?;
        let e = &self.config.edges;
        pairs
            .into_iter()
            .zip(prompts)
            .map(|(p, p_p)| {
                let coarse = pformer.restore(&p.lq, &p_p)?;
                let (_, p_d) = defocus.estimate(&p.lq, self.config.defocus.apply_stain_norm)?;
                Ok(DiffusionSample {
                    edges: canny(&p.lq, e.low, e.high)?,
                    hq: p.hq,
                    coarse,
                    lq: p.lq,
                    p_d,
                    p_p,
                })
            })
            .collect()
    }

    fn train_pdiffusion(&self) -> Result<PathBuf> {
        let pairs = self.training_pairs()?;
        let prompts = self.prompt_sidecars(&pairs)?;
        let data = self.diffusion_samples(pairs, prompts)?;
        let defocus = self.defocus_model()?;
        let mut cfg = self.config.pdiffusion.clone();
        cfg.seed = self.seed();
        let head = defocus.ctf_head()?;
        let model = PDiffusion::new(VarStore::new(self.dtype(), self.seed()), cfg, defocus.prompt_channels(), Some(&head))?;
        let every = (self.config.pdiffusion.steps / 20).max(1);
        let (ck, _) = train_pdiffusion(&model, &data, &self.fingerprint, None, |step, loss| {
            if step % every == 0 {
                log::info!("p-diffusion step {step}: loss {loss:.6}");
            }
            true
        })?;
        self.save_checkpoint("pdiffusion", ck)
    }

    // -- restore -----------------------------------------------------------

    /// Tiles, restores and stitches one image.
    pub fn restore_image(
        &self,
        models: &StageModels,
        image: &ImagePatch,
        coarse: Option<&ImagePatch>,
        stage: Stage,
        debug_dir: Option<&Path>,
        debug_steps: bool,
    ) -> Result<Restored> {
        let (h, w) = image.dims();
        let side = tile_side(h, w, self.config.data.tile_size, self.config.size_multiple())?;
        let stride = self.config.data.tile_stride.min(side);
        let tiles = tile_image(image, side, stride)?;
        let coarse_tiles = match coarse {
            Some(c) => {
                if c.dims() != (h, w) {
                    return Err(dim_err!("coarse input for {} is {:?}, image is {h}x{w}", image.id, c.dims()));
                }
                Some(tile_image(c, side, stride)?)
            }
            None => None,
        };
        let mut out_tiles: Vec<(TileIndex, ImagePatch)> = Vec::with_capacity(tiles.len());
        let mut coarse_out: Vec<(TileIndex, ImagePatch)> = Vec::with_capacity(tiles.len());
        let mut heat_tiles = Vec::new();
        let mut edge_tiles = Vec::new();
        let head = models.defocus.distance_head()?;
        for (k, (idx, tile)) in tiles.iter().enumerate() {
            let c = coarse_tiles.as_ref().map(|ct| &ct[k].1);
            let seed = mix_seed(self.seed(), &image.id, k as u64);
            let step_dir = debug_dir.filter(|_| debug_steps).map(|d| d.to_path_buf());
            let tile_id = tile.id.clone();
            let r = models.restore_patch(tile, c, stage, seed, |t, x| {
                if let Some(dir) = &step_dir {
                    let saved = x
                        .squeeze(0)
                        .map_err(Error::from)
                        .and_then(|x| ImagePatch::from_tensor(format!("{tile_id}_t{t}"), &x))
                        .and_then(|im| save_png(&im, dir.join(format!("{tile_id}_t{t}.png"))));
                    if let Err(e) = saved {
                        log::warn!("could not write sampler step {t} of {tile_id}: {e}");
                    }
                }
            })?;
            if debug_dir.is_some() {
                let heat = defocus_heatmap(&r.p_d, &head)?;
                let max = self.config.data.max_offset.max(1.0) as f32;
                heat_tiles.push((*idx, colormap(&heat, side, side, max)?));
                let mask: Vec<f32> = r.edges.mask.iter().flat_map(|&m| [m as f32; 3]).collect();
                edge_tiles.push((*idx, ImagePatch::new("edges", side, side, mask)?));
            }
            coarse_out.push((*idx, r.coarse));
            out_tiles.push((*idx, r.output));
        }
        if let Some(dir) = debug_dir {
            save_png(&stitch_tiles(&heat_tiles, h, w)?, dir.join(format!("{}_heat.png", image.id)))?;
            save_png(&stitch_tiles(&edge_tiles, h, w)?, dir.join(format!("{}_edges.png", image.id)))?;
        }
        Ok(Restored {
            coarse: stitch_tiles(&coarse_out, h, w)?.with_id(image.id.clone()),
            output: stitch_tiles(&out_tiles, h, w)?.with_id(image.id.clone()),
        })
    }

    /// Restores a PNG or every image of an image-set manifest; writes the
    /// outputs and `restored/manifest.txt` (plus `restored/coarse/` for
    /// `stage = both`). Returns the manifest path.
    pub fn run_restore(&self, input: &Path, stage: Stage, opts: &RestoreOptions) -> Result<PathBuf> {
        if stage == Stage::Fine && opts.fine_input.is_none() {
            return Err(Error::Usage(
                "stage `fine` needs the coarse output: pass --fine-input, or use --stage both".into(),
            ));
        }
        let inputs = read_inputs(input)?;
        let coarse_inputs = match &opts.fine_input {
            Some(p) if stage == Stage::Fine => Some(read_inputs(p)?),
            _ => None,
        };
        let models = self.stage_models(stage)?;
        let out_dir = self.ws.restored_dir();
        let debug_dir = (opts.debug || opts.debug_steps).then(|| out_dir.join("debug"));
        let mut records = Vec::with_capacity(inputs.len());
        let mut coarse_records = Vec::new();
        for (rec, image) in &inputs {
            let coarse = match &coarse_inputs {
                Some(list) => Some(
                    list.iter()
                        .find(|(r, _)| r.id == rec.id || list.len() == 1 && inputs.len() == 1)
                        .map(|(_, im)| im)
                        .ok_or_else(|| Error::Validation(format!("no coarse input for `{}`", rec.id)))?,
                ),
                None => None,
            };
            let r = self.restore_image(&models, image, coarse, stage, debug_dir.as_deref(), opts.debug_steps)?;
            let path = out_dir.join(format!("{}.png", rec.id));
            save_png(&r.output, &path)?;
            records.push(ImageRecord { path, ..rec.clone() });
            if stage == Stage::Both {
                let cpath = out_dir.join("coarse").join(format!("{}.png", rec.id));
                save_png(&r.coarse, &cpath)?;
                coarse_records.push(ImageRecord { path: cpath, ..rec.clone() });
            }
            log::info!("restored {}", rec.id);
        }
        let manifest = out_dir.join("manifest.txt");
        write_image_manifest(&manifest, &records)?;
        if stage == Stage::Both {
            write_image_manifest(out_dir.join("coarse/manifest.txt"), &coarse_records)?;
        }
        Ok(manifest)
    }

    // -- evaluate ----------------------------------------------------------

    /// Scores predictions against references; writes `report/metrics.txt`
    /// and `report/metrics.jsonl`.
    pub fn run_evaluate(&self, predictions: &Path, references: &Path) -> Result<MetricReport> {
        let scorer = EncoderProxy { encoder: self.encoder()? };
        let report = evaluate_dataset(predictions, references, self.config.metrics.group_by_slide, &scorer)?;
        let dir = self.ws.report_dir();
        write_report(&report, dir.join("metrics.txt"), dir.join("metrics.jsonl"))?;
        Ok(report)
    }

    // -- diagnostics -------------------------------------------------------

    /// Prompt distances on crops drawn apart from the training crops, a
    /// defocus heatmap grid over the first stack, and router utilization.
    pub fn run_diagnostics(&self) -> Result<DiagnosticsReport> {
        let defocus = self.defocus_model()?;
        let encoder = self.encoder()?;
        let prompt = self.prompt_model()?;
        let pformer = self.pformer_model()?;
        let stacks = self.stacks()?;
        let d = &self.config.data;
        let n = d.pairs.clamp(1, 64);
        let pairs = draw_pairs(&stacks, n, d.patch_size, d.min_offset, d.max_offset, mix_seed(self.seed(), "diagnose", 0), "diag")?;
        let lq: Vec<&ImagePatch> = pairs.iter().map(|p| &p.lq).collect();
        let prompts = extract_prompts(&defocus, encoder.as_ref(), &lq, self.config.defocus.apply_stain_norm)?;
        let mut distances = Vec::with_capacity(pairs.len());
        let mut restored = Vec::with_capacity(pairs.len());
        for (p, pr) in pairs.iter().zip(&prompts) {
            let p_p = prompt.restore_prompt(&pr.p_lp, &pr.p_d)?;
            let p_hp = encoder.encode(&p.hq)?;
            distances.push((p.lq.id.clone(), prompt_distance_report(&pr.p_lp, &p_p, &p_hp)?));
            restored.push(p_p);
        }
        let closer = distances.iter().filter(|(_, r)| r.mse_p < r.mse_lp).count() as f64 / distances.len() as f64;

        // router utilization over the same crops
        let dt = self.dtype();
        let mut sums: Vec<Vec<f64>> = Vec::new();
        for (chunk, pp) in pairs.chunks(8).zip(restored.chunks(8)) {
            let imgs: Vec<&ImagePatch> = chunk.iter().map(|p| &p.lq).collect();
            let x = ImagePatch::batch_to_tensor(&imgs, dt)?;
            let pooled: Vec<Tensor> = pp.iter().map(|p| p.pooled.to_dtype(dt)).collect::<candle_core::Result<_>>()?;
            let (_, weights) = pformer.forward(&x, &Tensor::stack(&pooled, 0)?)?;
            let means = mean_router_weights(&weights)?;
            if sums.is_empty() {
                sums = vec![vec![0.0; means.first().map(|m| m.len()).unwrap_or(0)]; means.len()];
            }
            for (s, m) in sums.iter_mut().zip(means) {
                s.iter_mut().zip(m).for_each(|(a, b)| *a += b * chunk.len() as f64);
            }
        }
        let utilization: Vec<Vec<f64>> = sums
            .into_iter()
            .map(|row| row.into_iter().map(|v| v / pairs.len() as f64).collect())
            .collect();

        // heatmap grid: one panel per plane of the first stack
        let stack = &stacks[0];
        let head = defocus.distance_head()?;
        let max = stack.planes.iter().map(|(o, _)| o.abs()).fold(1.0, f64::max) as f32;
        let mut panels = Vec::with_capacity(stack.planes.len());
        for (_, plane) in &stack.planes {
            let (h, w) = plane.dims();
            let m = crate::defocus::STRIDE;
            let crop = plane.crop(0, 0, h / m * m, w / m * m)?;
            let (_, p_d) = defocus.estimate(&crop, self.config.defocus.apply_stain_norm)?;
            let heat = defocus_heatmap(&p_d, &head)?;
            panels.push(colormap(&heat, crop.height(), crop.width(), max)?);
        }
        let refs: Vec<&ImagePatch> = panels.iter().collect();
        let dir = self.ws.diagnostics_dir();
        save_png(&hconcat(&refs)?, dir.join("heatmap_grid.png"))?;

        let mut table = format!("{:<12} {:>12} {:>12}\n", "id", "mse_lp", "mse_p");
        for (id, r) in &distances {
            let _ = writeln!(table, "{id:<12} {:>12.6} {:>12.6}", r.mse_lp, r.mse_p);
        }
        let _ = writeln!(table, "# fraction with mse_p < mse_lp: {closer:.4}");
        write_text(&dir.join("prompt_distance.txt"), &table)?;
        let mut util = String::from("block");
        for e in 0..utilization.first().map(|u| u.len()).unwrap_or(0) {
            let _ = write!(util, " {:>8}", format!("expert{e}"));
        }
        util.push('\n');
        for (b, row) in utilization.iter().enumerate() {
            let _ = write!(util, "{b:<5}");
            for w in row {
                let _ = write!(util, " {w:>8.4}");
            }
            util.push('\n');
        }
        write_text(&dir.join("router_utilization.txt"), &util)?;
        let report = DiagnosticsReport {
            prompt_distance: distances,
            restored_closer: closer,
            heatmap_panels: panels.len(),
            utilization,
        };
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_text(&dir.join("diagnostics.json"), &(json + "\n"))?;
        Ok(report)
    }

    // -- inspection --------------------------------------------------------

    fn estimator_input(&self, input: &Path) -> Result<ImagePatch> {
        let im = load_image(input)?;
        let (h, w) = im.dims();
        let m = crate::defocus::STRIDE;
        if h % m != 0 || w % m != 0 {
            return Err(dim_err!("{}: {h}x{w} is not a multiple of {m}", input.display()));
        }
        Ok(im)
    }

    /// Binary Canny edges and the defocus confidence of an image. The
    /// confidence comes from the trained p-diffusion edge branch when
    /// available, otherwise from the estimator's CTF row.
    pub fn run_edges(&self, input: &Path) -> Result<Vec<PathBuf>> {
        let im = self.estimator_input(input)?;
        let defocus = self.defocus_model()?;
        let (_, p_d) = defocus.estimate(&im, self.config.defocus.apply_stain_norm)?;
        let edges = canny(&im, self.config.edges.low, self.config.edges.high)?;
        let conf = if self.ws.checkpoint("pdiffusion").exists() {
            self.pdiffusion_model()?.edge.confidence_map(&p_d, self.dtype())?
        } else {
            let vs = VarStore::new(self.dtype(), self.seed());
            let net = EdgePromptNet::with_ctf_prior(&vs, self.config.pdiffusion.denoiser.c_e, &defocus.ctf_head()?)?;
            net.confidence_map(&p_d, self.dtype())?
        };
        let (h, w) = im.dims();
        let mask: Vec<f32> = edges.mask.iter().flat_map(|&m| [m as f32; 3]).collect();
        let dir = self.ws.root.join("edges");
        let edge_path = dir.join(format!("{}_edges.png", im.id));
        let conf_path = dir.join(format!("{}_confidence.png", im.id));
        save_png(&ImagePatch::new("edges", h, w, mask)?, &edge_path)?;
        save_png(&colormap(&conf, h, w, 1.0)?, &conf_path)?;
        Ok(vec![edge_path, conf_path])
    }

    /// Input and its `|d|` heatmap side by side.
    pub fn run_defocus_heatmap(&self, input: &Path) -> Result<PathBuf> {
        let im = self.estimator_input(input)?;
        let defocus = self.defocus_model()?;
        let (_, p_d) = defocus.estimate(&im, self.config.defocus.apply_stain_norm)?;
        let heat = defocus_heatmap(&p_d, &defocus.distance_head()?)?;
        let (h, w) = im.dims();
        let max = self.config.data.offsets.iter().map(|o| o.abs()).fold(1.0, f64::max) as f32;
        let panel = hconcat(&[&im, &colormap(&heat, h, w, max)?])?;
        let path = self.ws.root.join("heatmaps").join(format!("{}.png", im.id));
        save_png(&panel, &path)?;
        Ok(path)
    }
}

/// Held-out comparison of the degraded input, the coarse stage and the
/// two-stage output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub patches: usize,
    pub input_psnr: f64,
    pub coarse_psnr: f64,
    pub both_psnr: f64,
    /// Fraction of patches whose two-stage output has a lower perceptual
    /// distance to the reference than the coarse output.
    pub perceptual_wins: f64,
}

impl Pipeline {
    /// `n` crops from freshly simulated stacks whose tissue never appears in
    /// training; offsets follow the training range.
    pub fn heldout_pairs(&self, n: usize, seed: u64) -> Result<Vec<TrainingPair>> {
        let d = &self.config.data;
        let tilt = (d.tilt != 0.0).then_some(d.tilt);
        let stacks = (0..d.stacks.max(1))
            .map(|i| {
                let sharp = procedural_tissue(format!("h{i:03}"), d.image_size, d.image_size, mix_seed(seed, "heldout", i as u64))?;
                Ok(synth_focal_stack(&sharp, &d.offsets, &self.config.optics, tilt, d.spacing_um)?.0)
            })
            .collect::<Result<Vec<_>>>()?;
        draw_pairs(&stacks, n, d.patch_size, d.min_offset, d.max_offset, mix_seed(seed, "heldout", u64::MAX), "heldout")
    }

    /// Restores `n` held-out crops with both stages and scores every
    /// intermediate.
    pub fn benchmark(&self, n: usize, seed: u64) -> Result<BenchmarkReport> {
        let pairs = self.heldout_pairs(n, seed)?;
        let models = self.stage_models(Stage::Both)?;
        let (mut input, mut coarse, mut both, mut wins) = (0.0, 0.0, 0.0, 0usize);
        for (i, p) in pairs.iter().enumerate() {
            let out = models.restore_patch(&p.lq, None, Stage::Both, mix_seed(seed, "bench-sample", i as u64), |_, _| {})?;
            input += psnr(&p.lq, &p.hq)?;
            coarse += psnr(&out.coarse, &p.hq)?;
            both += psnr(&out.output, &p.hq)?;
            let fine_dist = perceptual_proxy(&out.output, &p.hq, models.encoder.clone())?;
            let coarse_dist = perceptual_proxy(&out.coarse, &p.hq, models.encoder.clone())?;
            if fine_dist < coarse_dist {
                wins += 1;
            }
        }
        let n = pairs.len() as f64;
        Ok(BenchmarkReport {
            patches: pairs.len(),
            input_psnr: input / n,
            coarse_psnr: coarse / n,
            both_psnr: both / n,
            perceptual_wins: wins as f64 / n,
        })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::image::ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

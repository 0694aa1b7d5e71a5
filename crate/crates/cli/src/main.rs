//! `mop`: simulate, train, restore, evaluate and inspect.
//!
//! Every subcommand takes `--config`, `--seed` and `--out`; `--out` is the
//! working directory shared by the stages. Exit codes: 0 success,
//! 2 validation or usage error, 3 missing upstream artifact, 1 other.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mop_core::config::PipelineConfig;
use mop_core::pipeline::{with_run_record, Component, Pipeline, RestoreOptions, Stage};
use mop_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mop", version, about = "Prompt-guided restoration of defocused microscopy images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Pipeline configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run; the config's `run.seed` when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Working directory shared by all stages.
    #[arg(long)]
    out: PathBuf,
    /// Load checkpoints trained under a different config.
    #[arg(long)]
    allow_mismatch: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic focal stacks, labels and manifests.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Train one component (upstream stages must exist).
    Train {
        #[arg(value_enum)]
        component: ComponentArg,
        /// Override the training length: epochs, or optimizer steps for
        /// pdiffusion (warmup keeps its configured fraction).
        #[arg(long)]
        epochs: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Restore a PNG or every image of an image-set manifest.
    Restore {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Coarse outputs (PNG or manifest) for `--stage fine`.
        #[arg(long)]
        fine_input: Option<PathBuf>,
        /// Write defocus heatmap and edge PNGs.
        #[arg(long)]
        debug: bool,
        /// Write every intermediate sampler state.
        #[arg(long)]
        debug_steps: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score predictions against references.
    Evaluate {
        /// Image-set manifest of predictions.
        #[arg(long)]
        pred: PathBuf,
        /// Image-set manifest of references with matching ids.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Prompt distances, defocus heatmap grid and router utilization.
    Diagnose {
        #[command(flatten)]
        common: Common,
    },
    /// Binary edges and defocus confidence of an image.
    Edges {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Image with its defocus-distance heatmap.
    DefocusHeatmap {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ComponentArg {
    Defocus,
    Prompt,
    Pformer,
    Pdiffusion,
}

impl From<ComponentArg> for Component {
    fn from(c: ComponentArg) -> Self {
        match c {
            ComponentArg::Defocus => Component::Defocus,
            ComponentArg::Prompt => Component::Prompt,
            ComponentArg::Pformer => Component::PFormer,
            ComponentArg::Pdiffusion => Component::PDiffusion,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum StageArg {
    Coarse,
    Fine,
    Both,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Coarse => Stage::Coarse,
            StageArg::Fine => Stage::Fine,
            StageArg::Both => Stage::Both,
        }
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Simulate { common }
            | Command::Train { common, .. }
            | Command::Restore { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Diagnose { common }
            | Command::Edges { common, .. }
            | Command::DefocusHeatmap { common, .. } => common,
        }
    }

    fn name(&self) -> String {
        match self {
            Command::Simulate { .. } => "simulate".into(),
            Command::Train { component, .. } => format!("train-{}", Component::from(*component).name()),
            Command::Restore { .. } => "restore".into(),
            Command::Evaluate { .. } => "evaluate".into(),
            Command::Diagnose { .. } => "diagnose".into(),
            Command::Edges { .. } => "edges".into(),
            Command::DefocusHeatmap { .. } => "defocus-heatmap".into(),
        }
    }
}

fn apply_epochs(cfg: &mut PipelineConfig, component: Component, n: u64) -> Result<()> {
    if n == 0 {
        return Err(Error::Validation("--epochs must be >= 1".into()));
    }
    match component {
        Component::Defocus => cfg.defocus.model.epochs = n as usize,
        Component::Prompt => cfg.prompt_restorer.epochs = n as usize,
        Component::PFormer => cfg.pformer.epochs = n as usize,
        Component::PDiffusion => {
            let d = &mut cfg.pdiffusion;
            let ratio = d.warmup_steps as f64 / d.steps.max(1) as f64;
            d.warmup_steps = (n as f64 * ratio).round() as u64;
            d.steps = n;
        }
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

/// User-supplied input paths must exist; a typo is a usage error, not an
/// I/O failure halfway through a run.
fn check_inputs(command: &Command) -> Result<()> {
    let mut paths: Vec<&PathBuf> = match command {
        Command::Restore { input, fine_input, .. } => std::iter::once(input).chain(fine_input.as_ref()).collect(),
        Command::Evaluate { pred, reference, .. } => vec![pred, reference],
        Command::Edges { input, .. } | Command::DefocusHeatmap { input, .. } => vec![input],
        Command::Simulate { .. } | Command::Train { .. } | Command::Diagnose { .. } => Vec::new(),
    };
    paths.extend(command.common().config.as_ref());
    match paths.into_iter().find(|p| !p.exists()) {
        Some(p) => Err(Error::Usage(format!("input {} does not exist", p.display()))),
        None => Ok(()),
    }
}

fn run(command: Command) -> Result<()> {
    check_inputs(&command)?;
    let common = command.common().clone();
    let file_config = load_config(common.config.as_deref())?;
    let fingerprint = file_config.fingerprint();
    let seed = common.seed.unwrap_or(file_config.run.seed);
    let mut config = file_config.with_seed(seed);
    if let Command::Train {
        component,
        epochs: Some(n),
        ..
    } = &command
    {
        apply_epochs(&mut config, (*component).into(), *n)?;
    }
    let mut pipeline = Pipeline::new(config, fingerprint.clone(), &common.out);
    pipeline.allow_mismatch = common.allow_mismatch;
    let name = command.name();
    let ws = pipeline.ws.clone();
    let outputs = with_run_record(&ws, &name, &fingerprint, seed, || {
        let paths: Vec<PathBuf> = match command {
            Command::Simulate { .. } => vec![pipeline.run_simulate()?],
            Command::Train { component, .. } => vec![pipeline.run_train(component.into())?],
            Command::Restore {
                input,
                stage,
                fine_input,
                debug,
                debug_steps,
                ..
            } => {
                let opts = RestoreOptions {
                    fine_input,
                    debug,
                    debug_steps,
                };
                vec![pipeline.run_restore(&input, stage.into(), &opts)?]
            }
            Command::Evaluate { pred, reference, .. } => {
                let report = pipeline.run_evaluate(&pred, &reference)?;
                println!(
                    "psnr {:.3} dB  ssim {:.4}  perceptual {:.5} ({}, {} slides)",
                    report.psnr,
                    report.ssim,
                    report.perceptual,
                    report.scorer,
                    report.per_slide.len()
                );
                vec![ws.report_dir().join("metrics.txt"), ws.report_dir().join("metrics.jsonl")]
            }
            Command::Diagnose { .. } => {
                let report = pipeline.run_diagnostics()?;
                println!(
                    "restored prompt closer to the sharp prompt on {:.1}% of {} patches; {} heatmap panels; {} routed blocks",
                    100.0 * report.restored_closer,
                    report.prompt_distance.len(),
                    report.heatmap_panels,
                    report.utilization.len()
                );
                let dir = ws.diagnostics_dir();
                vec![
                    dir.join("prompt_distance.txt"),
                    dir.join("heatmap_grid.png"),
                    dir.join("router_utilization.txt"),
                ]
            }
            Command::Edges { input, .. } => pipeline.run_edges(&input)?,
            Command::DefocusHeatmap { input, .. } => vec![pipeline.run_defocus_heatmap(&input)?],
        };
        Ok(((), paths.clone()))
    });
    outputs.map(|_| {
        if let Ok(text) = std::fs::read_to_string(ws.run_record(&name)) {
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
                if let Some(list) = v.get("outputs").and_then(|o| o.as_array()) {
                    for p in list.iter().filter_map(|p| p.as_str()) {
                        println!("{p}");
                    }
                }
            }
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mop: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

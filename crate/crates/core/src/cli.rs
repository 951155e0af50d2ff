//! The `crrn` command: synth, train, eval and infer.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{CrrnError, Result};
use crate::evaluation::{evaluate, infer, EvalConfig};
use crate::image_model::Resolution;
use crate::io_util::write_atomic;
use crate::model::Ablation;
use crate::synthesis::procedural::{write_pool, PoolKind};
use crate::synthesis::{generate_dataset, DatasetManifest, SynthesisConfig};
use crate::training::{train_all, train_joint, train_stage1, Checkpoint, Stage, TrainConfig, TrainOptions};

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

/// Settings for every subcommand; each section is optional in the file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub synthesis: SynthesisConfig,
    pub pools: PoolConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub background_pool: Option<PathBuf>,
    pub reflection_pool: Option<PathBuf>,
    /// Write this many procedural images per pool under `<out>/pools` first.
    pub generate_pools: Option<usize>,
    pub pool_resolution: Resolution,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            background_pool: None,
            reflection_pool: None,
            generate_pools: None,
            pool_resolution: Resolution { height: 256, width: 256 },
        }
    }
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CrrnError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CrrnError::Config(format!("{}: {e}", path.display())))
    }

    fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map(Self::load).transpose().map(Option::unwrap_or_default)
    }
}

#[derive(Debug, Parser)]
#[command(name = "crrn", version, about = "Concurrent reflection removal")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic mixture dataset and its manifest.
    Synth(SynthArgs),
    /// Train the gradient network, then both networks jointly.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Separate one image.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Output resolution as HxW; repeat for several.
    #[arg(long = "resolution")]
    pub resolutions: Vec<Resolution>,
    #[arg(long)]
    pub mask_threshold: Option<f64>,
    #[arg(long)]
    pub background_pool: Option<PathBuf>,
    #[arg(long)]
    pub reflection_pool: Option<PathBuf>,
    #[arg(long)]
    pub generate_pools: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Run directory for the checkpoint, log and config echo.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this checkpoint; its recorded config is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `1`, `joint`, or both when omitted.
    #[arg(long)]
    pub stage: Option<Stage>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub stage1_lr: Option<f64>,
    #[arg(long)]
    pub joint_epochs_a: Option<usize>,
    #[arg(long)]
    pub lr_a: Option<f64>,
    #[arg(long)]
    pub joint_epochs_b: Option<usize>,
    #[arg(long)]
    pub lr_b: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training size as HxW; repeat for several.
    #[arg(long = "size")]
    pub sizes: Vec<Resolution>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Validate and echo the effective config, then stop.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    /// Report directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub emit_predictions: bool,
    /// Score the ground-truth background instead of a model.
    #[arg(long)]
    pub oracle_stub: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub auto_resize: bool,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn echo(value: &impl Serialize, out: &Path) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value).expect("config serialises");
    json.push('\n');
    print!("{json}");
    write_atomic(&out.join(EFFECTIVE_CONFIG_FILE), json.as_bytes())
}

pub fn cmd_synth(args: SynthArgs) -> Result<()> {
    let file = CliConfig::load_or_default(args.config.as_deref())?;
    let mut cfg = file.synthesis;
    let mut pools = file.pools;
    set(&mut cfg.seed, args.seed);
    set(&mut cfg.count, args.count);
    set(&mut cfg.mask_threshold, args.mask_threshold);
    if !args.resolutions.is_empty() {
        cfg.resolutions = args.resolutions;
    }
    if args.background_pool.is_some() {
        pools.background_pool = args.background_pool;
    }
    if args.reflection_pool.is_some() {
        pools.reflection_pool = args.reflection_pool;
    }
    if args.generate_pools.is_some() {
        pools.generate_pools = args.generate_pools;
    }
    cfg.validate()?;

    let (bg, rf) = match (pools.generate_pools, &pools.background_pool, &pools.reflection_pool) {
        (Some(0), ..) => return Err(CrrnError::Config("generate_pools must be >= 1".into())),
        (Some(n), None, None) => {
            let root = args.out.join("pools");
            let (bg, rf) = (root.join("background"), root.join("reflection"));
            write_pool(&bg, PoolKind::Background, n, pools.pool_resolution, cfg.seed)?;
            write_pool(&rf, PoolKind::Reflection, n, pools.pool_resolution, cfg.seed.wrapping_add(1))?;
            (bg, rf)
        }
        (Some(_), ..) => {
            return Err(CrrnError::Config(
                "generate_pools cannot be combined with explicit pool directories".into(),
            ))
        }
        (None, Some(bg), Some(rf)) => (bg.clone(), rf.clone()),
        (None, ..) => {
            return Err(CrrnError::Config(
                "need --background-pool and --reflection-pool (or --generate-pools)".into(),
            ))
        }
    };
    for dir in [&bg, &rf] {
        if !dir.is_dir() {
            return Err(CrrnError::NotFound(dir.clone()));
        }
    }
    echo(&CliConfig { synthesis: cfg.clone(), pools, ..Default::default() }, &args.out)?;
    let manifest = generate_dataset(&cfg, &bg, &rf, &args.out)?;
    eprintln!("wrote {} triplets to {}", manifest.len(), args.out.display());
    Ok(())
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut state = match &args.checkpoint {
        Some(path) => {
            let mut state = Checkpoint::load(path)?;
            if args.config.is_some() || args.seed.is_some() || args.base_channels.is_some() {
                log::warn!("resuming: the checkpoint's recorded config takes precedence");
            }
            // Epoch counts may grow to extend a run; everything else is fixed.
            let cfg = &mut state.config;
            set(&mut cfg.stage1_epochs, args.stage1_epochs);
            set(&mut cfg.joint_epochs_a, args.joint_epochs_a);
            set(&mut cfg.joint_epochs_b, args.joint_epochs_b);
            cfg.validate()?;
            if state.epoch > state.config.epochs(state.stage) {
                return Err(CrrnError::Config(format!(
                    "checkpoint is at {} epoch {}, past the requested {}",
                    state.stage,
                    state.epoch,
                    state.config.epochs(state.stage)
                )));
            }
            state
        }
        None => {
            let mut cfg = CliConfig::load_or_default(args.config.as_deref())?.train;
            set(&mut cfg.seed, args.seed);
            set(&mut cfg.ablation, args.ablation);
            set(&mut cfg.stage1_epochs, args.stage1_epochs);
            set(&mut cfg.stage1_lr, args.stage1_lr);
            set(&mut cfg.joint_epochs_a, args.joint_epochs_a);
            set(&mut cfg.lr_a, args.lr_a);
            set(&mut cfg.joint_epochs_b, args.joint_epochs_b);
            set(&mut cfg.lr_b, args.lr_b);
            set(&mut cfg.batch_size, args.batch_size);
            if let Some(b) = args.base_channels {
                cfg.gin.base_channels = b;
                cfg.iin.base_channels = b;
            }
            if !args.sizes.is_empty() {
                cfg.sizes = args.sizes;
            }
            cfg.validate()?;
            Checkpoint::fresh(cfg)?
        }
    };
    if args.ablation.is_some_and(|a| a != state.config.ablation) {
        return Err(CrrnError::Config(format!(
            "checkpoint was trained as {}; --ablation cannot change it",
            state.config.ablation
        )));
    }
    let manifest = DatasetManifest::load(&args.manifest)?;
    echo(&state.config, &args.out)?;
    if args.dry_run {
        return Ok(());
    }
    let dataset = manifest.load_all()?;
    let opts = TrainOptions {
        checkpoint: Some(args.out.join(CHECKPOINT_FILE)),
        log: Some(args.out.join(TRAIN_LOG_FILE)),
        deterministic: TrainOptions::determinism_from_env(),
    };
    eprintln!("resuming at {} epoch {}", state.stage, state.epoch + 1);
    let log = match args.stage {
        Some(Stage::Stage1) => train_stage1(&mut state, &dataset, &opts)?,
        Some(Stage::Joint) => train_joint(&mut state, &dataset, &opts)?,
        None => train_all(&mut state, &dataset, &opts)?,
    };
    if log.is_empty() {
        // Nothing left to run; still leave a checkpoint in the run directory.
        state.save(opts.checkpoint.as_deref().expect("set above"))?;
    }
    eprintln!("{} steps; checkpoint {}", log.len(), args.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = CliConfig::load_or_default(args.config.as_deref())?.eval;
    set(&mut cfg.manifest, args.manifest);
    if args.checkpoint.is_some() {
        cfg.checkpoint = args.checkpoint;
    }
    set(&mut cfg.ablation, args.ablation);
    set(&mut cfg.out, args.out);
    cfg.emit_predictions |= args.emit_predictions;
    cfg.oracle_stub |= args.oracle_stub;
    cfg.validate()?;
    echo(&cfg, &cfg.out)?;
    let report = evaluate(&cfg)?;
    let json = serde_json::to_string_pretty(&report.aggregate_json()).expect("aggregate serialises");
    println!("{json}");
    Ok(())
}

pub fn cmd_infer(args: InferArgs) -> Result<()> {
    let out = infer(&args.checkpoint, &args.image, &args.out, args.auto_resize)?;
    for p in [out.background, out.reflection, out.gradient] {
        println!("{}", p.display());
    }
    Ok(())
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! `blenda`: benchmark generation, translation, blending, training,
//! evaluation and the ablation grid behind one entry point.
//!
//! Every command writes into a fresh run directory under `--out`, starting
//! with `resolved_config.json`, and prints that directory on success. On
//! failure a single JSON line `{"error": <kind>, "message": <text>}` goes to
//! stderr and the exit code identifies the kind.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use blenda::ablation::{run_ablation, workers_from_env, AblationConfig};
use blenda::adaptation::{
    evaluate, finetune, pretrain, AdaptationConfig, AdaptationError, Learner, RunOptions,
};
use blenda::autodiff::{Checkpoint, CheckpointError};
use blenda::dataset::{
    generate_benchmark, materialize_blends, read_manifest, write_manifest, Benchmark, DatasetError,
    MANIFEST_NAME,
};
use blenda::imaging::ImageError;
use blenda::schedule::{curve_to_csv, emit_schedule_curve, ScheduleError};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Parser)]
#[command(
    name = "blenda",
    version,
    about = "Intermediate-domain blending for domain-adaptive training"
)]
struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent of the run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the mixing-weight curve as CSV.
    Schedule,
    /// Builds the synthetic benchmark.
    Generate,
    /// Re-renders the translated images of a dataset with the configured translator.
    Translate {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Materializes fixed-delta blends of a dataset with a manifest.
    Blend {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Source-only pretraining.
    Pretrain {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Adaptive fine-tuning from a checkpoint.
    Finetune {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Target mAP of a checkpoint.
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// The mixing-weight by adversarial-loss grid plus a source-only baseline.
    Ablate,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Schedule => "schedule",
            Command::Generate => "generate",
            Command::Translate { .. } => "translate",
            Command::Blend { .. } => "blend",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Ablate => "ablate",
        }
    }
}

/// One run's complete definition. Flags override the file; the resolved
/// result is echoed into the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    adaptation: AdaptationConfig,
    ablation: AblationConfig,
    /// Dataset root written by `generate`; without it training commands
    /// generate the benchmark in memory.
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out_dir: PathBuf,
    /// Points on the `schedule` curve.
    schedule_samples: usize,
    /// Mixing weight for `blend`.
    delta: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            adaptation: AdaptationConfig::default(),
            ablation: AblationConfig::default(),
            dataset: None,
            checkpoint: None,
            out_dir: PathBuf::from("runs"),
            schedule_samples: 101,
            delta: None,
        }
    }
}

/// Failure categories surfaced in the error line and exit code.
#[derive(Debug, Clone, Copy)]
enum Kind {
    Other = 1,
    InvalidConfig = 2,
    MissingFile = 3,
    NonFinite = 4,
}

impl Kind {
    fn tag(self) -> &'static str {
        match self {
            Kind::Other => "failure",
            Kind::InvalidConfig => "invalid_config",
            Kind::MissingFile => "missing_file",
            Kind::NonFinite => "non_finite",
        }
    }
}

/// An error raised by the CLI itself, already classified.
#[derive(Debug)]
struct CliError {
    kind: Kind,
    message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn classify(err: &anyhow::Error) -> Kind {
    err.chain().find_map(classify_cause).unwrap_or(Kind::Other)
}

fn classify_cause(cause: &(dyn std::error::Error + 'static)) -> Option<Kind> {
    if let Some(e) = cause.downcast_ref::<CliError>() {
        return Some(e.kind);
    }
    if cause.is::<serde_json::Error>() || cause.is::<ScheduleError>() {
        return Some(Kind::InvalidConfig);
    }
    if let Some(e) = cause.downcast_ref::<AdaptationError>() {
        return match e {
            AdaptationError::NonFiniteLoss { .. } => Some(Kind::NonFinite),
            AdaptationError::Config(_) | AdaptationError::Schedule(_) => Some(Kind::InvalidConfig),
            AdaptationError::Dataset(d) => classify_cause(d),
            AdaptationError::Image(i) => classify_cause(i),
            AdaptationError::Checkpoint(c) => classify_cause(c),
            _ => None,
        };
    }
    if let Some(e) = cause.downcast_ref::<DatasetError>() {
        return match e {
            DatasetError::MissingFile(_) => Some(Kind::MissingFile),
            DatasetError::InvalidLayout(_) | DatasetError::DeltaOutOfRange(_) => {
                Some(Kind::InvalidConfig)
            }
            DatasetError::Image(i) => classify_cause(i),
            _ => None,
        };
    }
    if let Some(ImageError::InvalidFog(_)) = cause.downcast_ref::<ImageError>() {
        return Some(Kind::InvalidConfig);
    }
    let not_found = |e: &std::io::Error| {
        (e.kind() == std::io::ErrorKind::NotFound).then_some(Kind::MissingFile)
    };
    if let Some(CheckpointError::Io { source, .. }) = cause.downcast_ref::<CheckpointError>() {
        return not_found(source);
    }
    cause.downcast_ref::<std::io::Error>().and_then(not_found)
}

fn missing(what: &str, path: &Path) -> anyhow::Error {
    anyhow!(CliError {
        kind: Kind::MissingFile,
        message: format!("{what} not found: {}", path.display()),
    })
}

fn invalid(message: String) -> anyhow::Error {
    anyhow!(CliError {
        kind: Kind::InvalidConfig,
        message,
    })
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.is_file() {
                return Err(missing("config", path));
            }
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.adaptation.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    match &cli.command {
        Command::Translate { dataset } | Command::Pretrain { dataset } => {
            override_path(&mut cfg.dataset, dataset)
        }
        Command::Blend { dataset, delta } => {
            override_path(&mut cfg.dataset, dataset);
            if delta.is_some() {
                cfg.delta = *delta;
            }
        }
        Command::Finetune {
            dataset,
            checkpoint,
        }
        | Command::Eval {
            dataset,
            checkpoint,
        } => {
            override_path(&mut cfg.dataset, dataset);
            override_path(&mut cfg.checkpoint, checkpoint);
        }
        Command::Schedule | Command::Generate | Command::Ablate => {}
    }
    // absolute paths keep the echoed config valid from any directory
    for p in [&mut cfg.dataset, &mut cfg.checkpoint]
        .into_iter()
        .flatten()
    {
        if p.exists() {
            *p =
                std::fs::canonicalize(&*p).with_context(|| format!("resolving {}", p.display()))?;
        }
    }
    cfg.adaptation.validate()?;
    cfg.ablation.validate()?;
    if cfg.schedule_samples < 2 {
        return Err(invalid(format!(
            "schedule_samples must be at least 2, got {}",
            cfg.schedule_samples
        )));
    }
    Ok(cfg)
}

fn override_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

/// Creates `<out>/<command>-<unix millis>`, adding a suffix on collision.
fn create_run_dir(out: &Path, command: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis());
    for n in 0.. {
        let name = if n == 0 {
            format!("{command}-{stamp}")
        } else {
            format!("{command}-{stamp}-{n}")
        };
        let dir = out.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!("unbounded loop returns")
}

fn required<'a>(slot: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let path = slot
        .as_deref()
        .ok_or_else(|| invalid(format!("{what} is required (config key or --{what} flag)")))?;
    if !path.exists() {
        return Err(missing(what, path));
    }
    Ok(path)
}

fn benchmark(cfg: &RunConfig) -> Result<Benchmark> {
    match &cfg.dataset {
        Some(_) => {
            let root = required(&cfg.dataset, "dataset")?;
            Ok(Benchmark::load(root, cfg.adaptation.benchmark.layout)?)
        }
        None => Ok(generate_benchmark(
            &cfg.adaptation.benchmark,
            cfg.adaptation.seed,
        )?),
    }
}

fn checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = required(&cfg.checkpoint, "checkpoint")?;
    Ok(Checkpoint::load(path)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: &Cli) -> Result<PathBuf> {
    let cfg = load_config(cli)?;
    let dir = create_run_dir(&cfg.out_dir, cli.command.name())?;
    write_text(
        &dir.join(RESOLVED_CONFIG),
        &(serde_json::to_string_pretty(&cfg)? + "\n"),
    )?;
    let ad = &cfg.adaptation;
    match &cli.command {
        Command::Schedule => {
            let curve = emit_schedule_curve(&ad.schedule, cfg.schedule_samples)?;
            write_text(&dir.join("schedule.csv"), &curve_to_csv(&curve))?;
        }
        Command::Generate => {
            generate_benchmark(&ad.benchmark, ad.seed)?.write(dir.join("dataset"))?;
        }
        Command::Translate { .. } => {
            let root = required(&cfg.dataset, "dataset")?;
            let mut bench = Benchmark::load(root, ad.benchmark.layout)?;
            bench.retranslate(&ad.benchmark.translator_fog, ad.seed)?;
            bench.write(dir.join("dataset"))?;
        }
        Command::Blend { .. } => {
            let root = required(&cfg.dataset, "dataset")?;
            let delta = cfg
                .delta
                .ok_or_else(|| invalid("delta is required (config key or --delta flag)".into()))?;
            let records = read_manifest(root.join(MANIFEST_NAME))?;
            let out = dir.join("blended");
            let blends = materialize_blends(root, &records, delta, &out)?;
            if blends.is_empty() {
                bail!("no source records with a translation in {}", root.display());
            }
            write_manifest(out.join(MANIFEST_NAME), &blends)?;
        }
        Command::Pretrain { .. } => {
            let bench = benchmark(&cfg)?;
            pretrain(
                &bench,
                ad,
                RunOptions {
                    out_dir: Some(&dir),
                    ..RunOptions::default()
                },
            )?;
        }
        Command::Finetune { .. } => {
            let ck = checkpoint(&cfg)?;
            let bench = benchmark(&cfg)?;
            finetune(
                &ck,
                &bench,
                ad,
                RunOptions {
                    out_dir: Some(&dir),
                    evaluate: true,
                    ..RunOptions::default()
                },
            )?;
        }
        Command::Eval { .. } => {
            let ck = checkpoint(&cfg)?;
            let bench = benchmark(&cfg)?;
            let learner = Learner::from_checkpoint(&ck, ad)?;
            let report = evaluate(&learner.model, &bench.target)?;
            let json = serde_json::json!({ "map": report.map, "per_class": report.per_class });
            write_text(
                &dir.join("eval.json"),
                &(serde_json::to_string_pretty(&json)? + "\n"),
            )?;
        }
        Command::Ablate => {
            run_ablation(ad, &cfg.ablation, workers_from_env()?, Some(&dir))?;
        }
    }
    Ok(dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            let kind = classify(&err);
            let line = serde_json::json!({ "error": kind.tag(), "message": format!("{err:#}") });
            eprintln!("{line}");
            ExitCode::from(kind as u8)
        }
    }
}

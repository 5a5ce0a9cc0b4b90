//! The mixing-weight by adversarial-loss ablation grid run over several
//! seeds, plus a supervised source-only baseline.
//!
//! Each seed generates its own benchmark, pretrains once, and fine-tunes
//! every grid configuration from that shared checkpoint. Runs execute on a
//! bounded worker pool; results are gathered by index, so the report does
//! not depend on scheduling.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    finetune, pretrain, train_source_only, AdaptationConfig, AdaptationError, AdversarialMode,
    RunOptions, RunReport,
};
use crate::dataset::generate_benchmark;
use crate::schedule::format_sig17;

pub const WORKERS_ENV: &str = "BLENDA_WORKERS";
pub const TABLE_FILE: &str = "ablation_table.csv";
pub const BASELINE_FILE: &str = "baseline.csv";
pub const REPORT_FILE: &str = "report.md";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub static_deltas: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            static_deltas: vec![0.7, 0.9, 1.0],
        }
    }
}

/// One grid cell of the ablation: how the mixing weight is chosen and which
/// adversarial loss is used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variant {
    pub static_delta: Option<f64>,
    pub mode: AdversarialMode,
}

impl Variant {
    pub fn name(&self) -> String {
        let delta = match self.static_delta {
            Some(d) => format!("static_{d}"),
            None => "dynamic".to_string(),
        };
        let mode = match self.mode {
            AdversarialMode::Hard => "hard",
            AdversarialMode::Mixed => "mixed",
        };
        format!("{delta}/{mode}")
    }
}

impl AblationConfig {
    pub fn variants(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        for mode in [AdversarialMode::Mixed, AdversarialMode::Hard] {
            for &d in &self.static_deltas {
                out.push(Variant {
                    static_delta: Some(d),
                    mode,
                });
            }
            out.push(Variant {
                static_delta: None,
                mode,
            });
        }
        out
    }

    pub fn validate(&self) -> Result<(), AdaptationError> {
        if self.seeds.is_empty() {
            return Err(AdaptationError::Config(
                "ablation needs at least one seed".into(),
            ));
        }
        if let Some(d) = self
            .static_deltas
            .iter()
            .find(|d| !(0.0..=1.0).contains(*d))
        {
            return Err(AdaptationError::Config(format!(
                "static delta {d} outside [0, 1]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub variant: Option<Variant>,
    /// Final target mAP, one per seed in config order.
    pub maps: Vec<f64>,
}

impl AblationRow {
    pub fn median(&self) -> f64 {
        median(&self.maps)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub baseline: AblationRow,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == Some(variant))
    }

    fn csv(&self, rows: &[&AblationRow]) -> String {
        let mut out = String::from("config");
        for s in &self.seeds {
            let _ = write!(out, ",seed_{s}");
        }
        out.push_str(",median\n");
        for r in rows {
            out.push_str(&r.name);
            for m in &r.maps {
                let _ = write!(out, ",{}", format_sig17(*m));
            }
            let _ = writeln!(out, ",{}", format_sig17(r.median()));
        }
        out
    }

    /// One row per grid configuration, one column per seed, then the median.
    pub fn table_csv(&self) -> String {
        self.csv(&self.rows.iter().collect::<Vec<_>>())
    }

    pub fn baseline_csv(&self) -> String {
        self.csv(&[&self.baseline])
    }

    /// Human-readable summary, including the mixed versus hard comparison.
    pub fn markdown(&self) -> String {
        let mut out = String::from("| config | median mAP |\n|---|---|\n");
        for r in self.rows.iter().chain(std::iter::once(&self.baseline)) {
            let _ = writeln!(out, "| {} | {:.4} |", r.name, r.median());
        }
        out.push_str("\nmixed minus hard (median mAP):\n\n");
        for r in &self.rows {
            let Some(v) = r.variant.filter(|v| v.mode == AdversarialMode::Mixed) else {
                continue;
            };
            let hard = Variant {
                mode: AdversarialMode::Hard,
                ..v
            };
            if let Some(h) = self.row(hard) {
                let delta = match v.static_delta {
                    Some(d) => format!("static_{d}"),
                    None => "dynamic".into(),
                };
                let _ = writeln!(out, "- {delta}: {:+.4}", r.median() - h.median());
            }
        }
        out
    }
}

/// Worker count from `BLENDA_WORKERS`, defaulting to the available cores.
pub fn workers_from_env() -> Result<usize, AdaptationError> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(AdaptationError::Config(format!(
                "{WORKERS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

struct SeedResult {
    baseline: f64,
    maps: Vec<f64>,
}

fn opts(dir: &Option<PathBuf>) -> RunOptions<'_> {
    RunOptions {
        out_dir: dir.as_deref(),
        evaluate: true,
        ..RunOptions::default()
    }
}

fn final_map(report: &RunReport) -> f64 {
    report.final_map.unwrap_or(f64::NAN)
}

fn run_seed(
    base: &AdaptationConfig,
    variants: &[Variant],
    seed: u64,
    out: Option<&Path>,
) -> Result<SeedResult, AdaptationError> {
    let cfg = AdaptationConfig { seed, ..*base };
    let bench = generate_benchmark(&cfg.benchmark, seed)?;
    let dir = |name: &str| -> Result<Option<PathBuf>, AdaptationError> {
        let Some(root) = out else { return Ok(None) };
        let d = root
            .join(format!("seed_{seed}"))
            .join(name.replace('/', "_"));
        std::fs::create_dir_all(&d).map_err(|source| AdaptationError::Io {
            path: d.clone(),
            source,
        })?;
        Ok(Some(d))
    };
    let d = dir("source_only")?;
    let baseline = final_map(&train_source_only(&bench, &cfg, opts(&d))?);
    let d = dir("pretrain")?;
    let pre = pretrain(&bench, &cfg, opts(&d))?;
    let checkpoint = pre
        .learner
        .weights_checkpoint(cfg.pretrain_iterations as u64);
    let maps = variants
        .par_iter()
        .map(|v| {
            let run_cfg = AdaptationConfig {
                static_delta: v.static_delta,
                adversarial_mode: v.mode,
                ..cfg
            };
            let d = dir(&v.name())?;
            Ok(final_map(&finetune(
                &checkpoint,
                &bench,
                &run_cfg,
                opts(&d),
            )?))
        })
        .collect::<Result<Vec<f64>, AdaptationError>>()?;
    Ok(SeedResult { baseline, maps })
}

/// Runs the whole grid on `workers` threads. With `out`, every run's metrics
/// and checkpoints land under `out/seed_<s>/<config>/`, and the tables and
/// report at the top level.
pub fn run_ablation(
    base: &AdaptationConfig,
    ablation: &AblationConfig,
    workers: usize,
    out: Option<&Path>,
) -> Result<AblationReport, AdaptationError> {
    base.validate()?;
    ablation.validate()?;
    let variants = ablation.variants();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| AdaptationError::Config(format!("worker pool: {e}")))?;
    let per_seed = pool.install(|| {
        ablation
            .seeds
            .par_iter()
            .map(|&seed| run_seed(base, &variants, seed, out))
            .collect::<Result<Vec<_>, AdaptationError>>()
    })?;

    let rows = variants
        .iter()
        .enumerate()
        .map(|(i, v)| AblationRow {
            name: v.name(),
            variant: Some(*v),
            maps: per_seed.iter().map(|s| s.maps[i]).collect(),
        })
        .collect();
    let report = AblationReport {
        seeds: ablation.seeds.clone(),
        rows,
        baseline: AblationRow {
            name: "source_only".into(),
            variant: None,
            maps: per_seed.iter().map(|s| s.baseline).collect(),
        },
    };
    if let Some(root) = out {
        let write = |name: &str, text: String| {
            let p = root.join(name);
            std::fs::write(&p, text).map_err(|source| AdaptationError::Io { path: p, source })
        };
        write(TABLE_FILE, report.table_csv())?;
        write(BASELINE_FILE, report.baseline_csv())?;
        write(REPORT_FILE, report.markdown())?;
    }
    Ok(report)
}

/// Reads back a per-run metrics file.
pub fn read_metrics(path: &Path) -> Result<String, AdaptationError> {
    std::fs::read_to_string(path).map_err(|source| AdaptationError::Io {
        path: path.to_path_buf(),
        source,
    })
}

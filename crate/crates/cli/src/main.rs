//! `eclvad` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration/argument/metric errors, 3 I/O and
//! file-format errors, 4 numeric failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use eclvad_core::fmap::fmap_from_bytes;
use eclvad_core::harness::{run_scenario, EvalReport, Method, Metrics, Strategy, StrategyConfig};
use eclvad_core::padim::GaussianField;
use eclvad_core::patchcore::MemoryBank;
use eclvad_core::scenario::Scenario;
use eclvad_core::synth::{generate_synthetic, SynthSpec};
use eclvad_core::Error;

#[derive(Parser)]
#[command(name = "eclvad", version, about = "Continual anomaly detection over patch-feature maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario (FMAP tree plus manifest).
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one method/strategy over a scenario and write its reports.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare reports against the first one.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the header of an FMAP, BANK or GAUS file as JSON.
    Inspect { file: PathBuf },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::Config(_)
                | Error::Argument(_)
                | Error::Capacity { .. }
                | Error::Metric(_)
                | Error::Json(_) => 2,
                Error::Numeric { .. } => 4,
                _ => 3,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| {
        CliError::Core(Error::Path {
            path: path.display().to_string(),
            source: e,
        })
    })
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| {
        CliError::Core(Error::Path {
            path: path.display().to_string(),
            source: e,
        })
    })
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| {
        CliError::Core(Error::Path {
            path: path.display().to_string(),
            source: e,
        })
    })
}

fn config_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Run configuration file. Relative paths resolve against the file's directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    manifest: PathBuf,
    output_dir: PathBuf,
    method: Method,
    #[serde(default)]
    strategy: Strategy,
    #[serde(default)]
    replay_capacity: Option<usize>,
    #[serde(default)]
    bank_budget: Option<usize>,
    #[serde(default)]
    pooling_p: Option<usize>,
    #[serde(default)]
    b_neighbors: Option<usize>,
    #[serde(default)]
    sigma: Option<f32>,
    #[serde(default)]
    seed: u64,
}

impl RunConfig {
    fn strategy_config(&self) -> StrategyConfig {
        let base = StrategyConfig::new(self.method);
        StrategyConfig {
            strategy: self.strategy,
            replay_capacity: self.replay_capacity,
            bank_budget: self.bank_budget,
            pooling_p: self.pooling_p.unwrap_or(base.pooling_p),
            b_neighbors: self.b_neighbors.unwrap_or(base.b_neighbors),
            sigma: self.sigma.unwrap_or(base.sigma),
            seed: self.seed,
            ..base
        }
    }
}

fn cmd_synth(spec: &Path, out: &Path) -> CliResult<()> {
    let spec: SynthSpec = config_json(spec)?;
    let (scenario, manifest) = generate_synthetic(&spec, out)?;
    let images: usize = scenario.tasks.iter().map(|t| t.train.len() + t.test.len()).sum();
    println!(
        "{}",
        json!({
            "manifest": manifest.display().to_string(),
            "manifest_hash": scenario.manifest_hash,
            "tasks": scenario.tasks.len(),
            "images": images,
        })
    );
    Ok(())
}

fn cmd_run(config_path: &Path) -> CliResult<()> {
    let cfg: RunConfig = config_json(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let manifest = base.join(&cfg.manifest);
    let out = base.join(&cfg.output_dir);
    let strategy = cfg.strategy_config();
    strategy.validate()?;
    let scenario = Scenario::load(&manifest)?;
    let report = run_scenario(&scenario, &strategy)?;
    create_dir(&out)?;
    write(&out.join("report.json"), &report.to_json()?)?;
    write(&out.join("report.csv"), &report.to_csv()?)?;
    write(&out.join("ledger.json"), &report.ledger_json()?)?;
    println!(
        "{}",
        json!({
            "output_dir": out.display().to_string(),
            "cells": report.cells.len(),
            "final_avg": report.final_avg,
            "distance_ops": report.cost.distance_ops,
        })
    );
    Ok(())
}

#[derive(Serialize)]
struct CompareRow {
    label: String,
    method: Method,
    strategy: Strategy,
    checkpoint: usize,
    metric: String,
    value: f64,
    baseline: f64,
    delta: f64,
    ratio: Option<f64>,
}

/// Per-checkpoint rows: mean of each metric over the seen tasks, then the
/// checkpoint's operation counts and storage.
fn checkpoint_values(report: &EvalReport, checkpoint: usize) -> Vec<(String, f64)> {
    let avg = Metrics::mean(
        report
            .cells
            .iter()
            .filter(|c| c.checkpoint == checkpoint)
            .map(|c| &c.metrics),
    );
    let mut rows: Vec<(String, f64)> = Metrics::NAMES
        .iter()
        .zip(avg.values())
        .map(|(n, v)| (n.to_string(), v))
        .collect();
    if let Some(cp) = report.checkpoints.iter().find(|c| c.checkpoint == checkpoint) {
        rows.extend([
            ("inference_ops".to_string(), cp.eval.inference_ops as f64),
            ("identification_ops".to_string(), cp.eval.identification_ops as f64),
            ("query_ops".to_string(), cp.eval.query_ops() as f64),
            ("update_ops".to_string(), cp.update.update_ops() as f64),
            ("phase1_ops".to_string(), cp.update.phase1_ops as f64),
            ("retention_bytes".to_string(), cp.retention_bytes as f64),
            ("model_bytes".to_string(), cp.model_bytes as f64),
        ]);
    }
    rows
}

fn cmd_compare(paths: &[PathBuf], out: &Path) -> CliResult<()> {
    if paths.is_empty() {
        return Err(CliError::Usage("compare needs at least one report".into()));
    }
    let mut reports = Vec::with_capacity(paths.len());
    for p in paths {
        let r = EvalReport::from_json(&read(p)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        reports.push(r);
    }
    let hash = &reports[0].manifest_hash;
    if let Some((i, _)) = reports.iter().enumerate().find(|(_, r)| &r.manifest_hash != hash) {
        return Err(CliError::Usage(format!(
            "{} was produced on a different manifest than {}",
            paths[i].display(),
            paths[0].display()
        )));
    }
    let label = |i: usize, r: &EvalReport| {
        let m = serde_json::to_value(r.config.method).expect("enum serializes");
        let s = serde_json::to_value(r.config.strategy).expect("enum serializes");
        format!("{i}:{}-{}", m.as_str().unwrap_or("?"), s.as_str().unwrap_or("?"))
    };

    create_dir(out)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut curves = String::new();
    let base = &reports[0];
    let mut rows = 0usize;
    for (i, r) in reports.iter().enumerate() {
        let name = label(i, r);
        curves.push_str(&format!(
            "# {name}\n# checkpoint image_f1 pixel_f1 image_auroc pixel_auroc inference_ops\n"
        ));
        for cp in 1..=r.tasks.len() {
            let values = checkpoint_values(r, cp);
            let baseline = checkpoint_values(base, cp);
            for (metric, value) in &values {
                let b = baseline
                    .iter()
                    .find(|(m, _)| m == metric)
                    .map_or(f64::NAN, |(_, v)| *v);
                w.serialize(CompareRow {
                    label: name.clone(),
                    method: r.config.method,
                    strategy: r.config.strategy,
                    checkpoint: cp,
                    metric: metric.clone(),
                    value: *value,
                    baseline: b,
                    delta: value - b,
                    ratio: (b != 0.0 && b.is_finite()).then(|| value / b),
                })
                .map_err(Error::from)?;
                rows += 1;
            }
            let cols: Vec<String> = values.iter().take(5).map(|(_, v)| v.to_string()).collect();
            curves.push_str(&format!("{cp} {}\n", cols.join(" ")));
        }
        curves.push_str("\n\n");
    }
    w.flush().map_err(Error::from)?;
    let csv_bytes = w
        .into_inner()
        .map_err(|e| CliError::Core(Error::from(e.into_error())))?;
    write(&out.join("comparison.csv"), &csv_bytes)?;
    write(&out.join("curves.dat"), curves.as_bytes())?;
    println!(
        "{}",
        json!({"reports": reports.len(), "rows": rows, "out": out.display().to_string()})
    );
    Ok(())
}

fn cmd_inspect(path: &Path) -> CliResult<()> {
    let bytes = read(path)?;
    let header = match bytes.get(..4) {
        Some(b"FMAP") => {
            let m = fmap_from_bytes(&bytes)?;
            json!({
                "format": "FMAP",
                "image_id": m.image_id,
                "channels": m.channels,
                "height": m.height,
                "width": m.width,
                "label": m.label,
                "mask": m.mask.as_ref().map(|k| json!({"height": k.height, "width": k.width, "ones": k.count_ones()})),
            })
        }
        Some(b"BANK") => {
            let b = MemoryBank::from_bytes(&bytes)?;
            json!({
                "format": "BANK",
                "d": b.d,
                "count": b.len(),
                "task_name": b.task_name,
                "gonzalez_seed": b.gonzalez_seed,
            })
        }
        Some(b"GAUS") => {
            let g = GaussianField::from_bytes(&bytes)?;
            json!({
                "format": "GAUS",
                "mode": g.mode,
                "h": g.h,
                "w": g.w,
                "d": g.d,
                "epsilon": g.epsilon,
                "n_samples": g.n_samples,
            })
        }
        _ => {
            return Err(CliError::Core(Error::Format(format!(
                "{} is not an FMAP, BANK or GAUS file",
                path.display()
            ))))
        }
    };
    println!("{header}");
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("ECLVAD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("ECLVAD_THREADS={raw:?} must be a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Synth { spec, out } => cmd_synth(spec, out),
        Command::Run { config } => cmd_run(config),
        Command::Compare { reports, out } => cmd_compare(reports, out),
        Command::Inspect { file } => cmd_inspect(file),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("eclvad: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

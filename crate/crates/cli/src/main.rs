use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use paq_core::assignment::{adaptive_k, quality_score, select_positives};
use paq_core::geometry::Bbox;
use paq_core::harness::{self, oracle, ExperimentSpec, PointStatus, RunOptions};
use paq_core::metrics::gini;
use paq_core::toymodel::TrainConfig;
use paq_core::{Error, Result};
use serde::Deserialize;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "paq", version, about = "Dynamic-query / quality-aware assignment experiments at desk scale")]
struct Cli {
    /// Base seed; overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for run outputs.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// JSON file: a training config for `train`, an experiment spec for `sweep`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration into <out-dir>/<name>.
    Train {
        #[arg(long)]
        name: Option<String>,
        /// Start from the static-query one-to-one baseline instead of the full method.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run a preset or a spec file into <out-dir>/<spec name>.
    Sweep {
        /// One of: patterns, beta, k, gamma, ablation.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Replicate seeds, comma separated.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Skip points whose run directory already holds a summary.
        #[arg(long)]
        resume: bool,
    },
    /// Tabulate mean/spread and deltas against a baseline run (or sweep) directory.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Score, count and select positives for a JSON scene.
    AssignDemo { scene: PathBuf },
    /// Gini coefficient of one CSV column.
    Gini {
        csv: PathBuf,
        #[arg(long)]
        column: String,
    },
    /// Write per-scene pattern weights of a trained dynamic-query run.
    DumpWeights {
        run: PathBuf,
        #[arg(long, default_value_t = 8)]
        scenes: usize,
    },
    /// Check hungarian and select_positives against their oracles.
    OracleCheck {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
    },
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

fn train(cli: &Cli, name: Option<&str>, baseline: bool, epochs: Option<usize>) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => read_json(p)?,
        None if baseline => TrainConfig::baseline(),
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let name = name.map_or_else(|| format!("train-seed{}", cfg.seed), str::to_string);
    let dir = cli.out_dir.join(name);
    let rec = harness::train_into(&dir, &cfg)?;
    println!(
        "{}",
        json!({
            "dir": dir,
            "outcome": rec.outcome,
            "epochs": rec.rows.len(),
            "final_map": rec.summary.final_map,
            "best_map": rec.summary.best_map,
            "final_gini": rec.summary.final_gini,
            "num_params": rec.num_params,
        })
    );
    Ok(())
}

fn sweep(cli: &Cli, preset: Option<&str>, seeds: Option<Vec<u64>>, epochs: Option<usize>, resume: bool) -> Result<bool> {
    let mut spec: ExperimentSpec = match (preset, &cli.config) {
        (Some(p), _) => harness::preset(p, vec![0])?,
        (None, Some(path)) => read_json(path)?,
        (None, None) => return Err(Error::InvalidArgument("sweep needs --preset or --config".into())),
    };
    if let Some(s) = seeds {
        spec.seeds = s;
    } else if let Some(s) = cli.seed {
        spec.seeds = vec![s];
    }
    if let Some(e) = epochs {
        spec.base.epochs = e;
    }
    eprintln!("sweep `{}`: {} runs", spec.name, spec.size());
    let root = cli.out_dir.join(&spec.name);
    let results = harness::run(
        &spec,
        &root,
        RunOptions {
            resume,
            threads: cli.threads,
        },
    )?;
    let mut ok = true;
    for r in &results {
        let (status, detail) = match &r.status {
            PointStatus::Completed => ("completed", json!(null)),
            PointStatus::Diverged { epoch, reason } => ("diverged", json!({"epoch": epoch, "reason": reason})),
            PointStatus::Failed { kind, message } => {
                ok = false;
                ("failed", json!({"kind": kind, "message": message}))
            }
        };
        let map = r.record.as_ref().map(|x| x.summary.final_map);
        let g = r.record.as_ref().map(|x| x.summary.final_gini);
        println!(
            "{}",
            json!({"id": r.id, "status": status, "resumed": r.resumed, "final_map": map, "final_gini": g, "detail": detail})
        );
    }
    Ok(ok)
}

fn compare(cli: &Cli, runs: &[PathBuf], baseline: &Path) -> Result<()> {
    let c = harness::compare(runs, baseline)?;
    c.write(&cli.out_dir)?;
    print!("{}", c.to_csv()?);
    info!("wrote comparison into {}", cli.out_dir.display());
    Ok(())
}

#[derive(Deserialize)]
struct DemoPrediction {
    #[serde(rename = "box")]
    bbox: Bbox,
    confidence: f64,
}

#[derive(Deserialize)]
struct DemoScene {
    predictions: Vec<DemoPrediction>,
    ground_truths: Vec<Bbox>,
    #[serde(default = "default_gamma")]
    gamma: f64,
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default = "default_l")]
    l: usize,
}

fn default_gamma() -> f64 {
    0.4
}
fn default_k() -> usize {
    4
}
fn default_l() -> usize {
    1
}

fn assign_demo(path: &Path) -> Result<()> {
    let scene: DemoScene = read_json(path)?;
    let preds: Vec<(Bbox, f64)> = scene.predictions.iter().map(|p| (p.bbox, p.confidence)).collect();
    let table = quality_score(&preds, &scene.ground_truths, scene.gamma)?;
    let ks: Vec<usize> = adaptive_k(&table, scene.k, scene.l)
        .into_iter()
        .map(|k| k.min(table.n_pred()))
        .collect();
    let sel = select_positives(&table, &ks)?;
    let scores: Vec<Vec<f64>> = (0..table.n_pred())
        .map(|p| (0..table.n_gt()).map(|g| table.get(p, g)).collect())
        .collect();
    let positives: Vec<_> = sel.per_gt.iter().map(|g| json!({"k": g.k, "preds": g.preds, "scores": g.scores})).collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "gamma": scene.gamma,
            "scores": scores,
            "k": ks,
            "positives": positives,
        }))?
    );
    Ok(())
}

fn gini_cmd(path: &Path, column: &str) -> Result<()> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    let idx = r
        .headers()?
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| Error::InvalidArgument(format!("no column `{column}` in {}", path.display())))?;
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v = rec.get(idx).unwrap_or("");
        values.push(
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("`{v}` in column `{column}` is not a number")))?,
        );
    }
    let g = gini(&values)?;
    println!("{}", json!({"column": column, "count": values.len(), "gini": g}));
    Ok(())
}

fn dump_weights(cli: &Cli, run: &Path, scenes: usize) -> Result<()> {
    let files = harness::dump_weights(run, scenes, &cli.out_dir)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn oracle_check(cli: &Cli, instances: usize) -> Result<bool> {
    let seed = cli.seed.unwrap_or(0);
    let reports = [
        oracle::hungarian_sweep(instances, seed)?,
        oracle::select_positives_sweep(instances, seed)?,
    ];
    for r in &reports {
        println!(
            "{}: {} checked, {} passed, {} failed ({:.2}s)",
            r.name,
            r.checked,
            r.checked - r.mismatches,
            r.mismatches,
            r.elapsed.as_secs_f64()
        );
        for e in &r.examples {
            println!("  {e}");
        }
    }
    Ok(reports.iter().all(oracle::OracleReport::passed))
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train { name, baseline, epochs } => train(cli, name.as_deref(), *baseline, *epochs).map(|_| true),
        Command::Sweep {
            preset,
            seeds,
            epochs,
            resume,
        } => sweep(cli, preset.as_deref(), seeds.clone(), *epochs, *resume),
        Command::Compare { runs, baseline } => compare(cli, runs, baseline).map(|_| true),
        Command::AssignDemo { scene } => assign_demo(scene).map(|_| true),
        Command::Gini { csv, column } => gini_cmd(csv, column).map(|_| true),
        Command::DumpWeights { run, scenes } => dump_weights(cli, run, *scenes).map(|_| true),
        Command::OracleCheck { instances } => oracle_check(cli, *instances),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", json!({"error": "usage", "message": e.to_string().trim()}));
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::spec::{ExperimentSpec, SweepPoint};
use super::svg::{self, BarChart};
use crate::diffcore::ParamStore;
use crate::error::{Error, Result};
use crate::toymodel::train::train_with_progress;
use crate::toymodel::{EpochRow, RunOutcome, RunRecord, RunSummary, TrainConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MODEL_FILE: &str = "model.json";
pub const ERROR_FILE: &str = "error.json";
pub const ACTIVATION_CSV: &str = "activation.csv";
pub const PATTERNS_CSV: &str = "patterns.csv";
pub const ACTIVATION_SVG: &str = "activation.svg";

/// Contents of `summary.json`; written last, so its presence marks a
/// finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub outcome: RunOutcome,
    pub num_params: usize,
    pub duration_secs: f64,
    pub summary: RunSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorFile {
    pub kind: String,
    pub message: String,
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

pub fn write_epochs_csv(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    if rows.is_empty() {
        w.write_record(["epoch", "lr", "loss_total", "loss_one_to_many", "loss_aux", "loss_div", "map", "gini"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_epochs_csv(path: &Path) -> Result<Vec<EpochRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("{}: {other:?}", path.display())),
    }
}

/// Writes every artifact of a finished (or diverged) run into `dir`.
pub fn write_run_dir(dir: &Path, record: &RunRecord) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(CONFIG_FILE), &record.config)?;
    write_epochs_csv(&dir.join(EPOCHS_FILE), &record.rows)?;
    write_json(&dir.join(MODEL_FILE), &record.params)?;

    let hist = &record.summary.query_histogram;
    let mut w = csv::Writer::from_path(dir.join(ACTIVATION_CSV)).map_err(|e| csv_io(dir, e))?;
    w.write_record(["rank", "matches"])?;
    for (i, c) in hist.iter().enumerate() {
        w.write_record([i.to_string(), c.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let mass = &record.summary.pattern_activation;
    let mut charts = vec![BarChart {
        title: format!("final-layer matches per query (Gini {:.3})", record.summary.final_gini),
        bars: hist.iter().enumerate().map(|(i, c)| (i.to_string(), *c as f64)).collect(),
    }];
    if !mass.is_empty() {
        let mut w = csv::Writer::from_path(dir.join(PATTERNS_CSV)).map_err(|e| csv_io(dir, e))?;
        w.write_record(["pattern", "mass"])?;
        for (i, m) in mass.iter().enumerate() {
            w.write_record([i.to_string(), m.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
        charts.push(BarChart {
            title: "pattern activation mass".into(),
            bars: mass.iter().enumerate().map(|(i, m)| (format!("p{i}"), *m)).collect(),
        });
    }
    fs::write(dir.join(ACTIVATION_SVG), svg::render(&charts)).map_err(|e| Error::io(dir, e))?;

    let _ = fs::remove_file(dir.join(ERROR_FILE));
    write_json(
        &dir.join(SUMMARY_FILE),
        &SummaryFile {
            outcome: record.outcome.clone(),
            num_params: record.num_params,
            duration_secs: record.duration_secs,
            summary: record.summary.clone(),
        },
    )
}

/// Reloads a run directory written by [`write_run_dir`].
pub fn load_run_dir(dir: &Path) -> Result<RunRecord> {
    let config: TrainConfig = read_json(&dir.join(CONFIG_FILE))?;
    let rows = read_epochs_csv(&dir.join(EPOCHS_FILE))?;
    let s: SummaryFile = read_json(&dir.join(SUMMARY_FILE))?;
    let model = dir.join(MODEL_FILE);
    let mut params: ParamStore = if model.exists() { read_json(&model)? } else { ParamStore::new() };
    params.restore_requires_grad();
    Ok(RunRecord {
        config,
        num_params: s.num_params,
        rows,
        outcome: s.outcome,
        summary: s.summary,
        duration_secs: s.duration_secs,
        params,
    })
}

/// Trains `config` and writes its run directory.
pub fn train_into(dir: &Path, config: &TrainConfig) -> Result<RunRecord> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // the snapshot goes first so even a failed run describes itself
    write_json(&dir.join(CONFIG_FILE), config)?;
    let record = train_with_progress(config, |row| {
        info!("{}: epoch {} mAP {:.4} Gini {:.3} loss {:.3}", dir.display(), row.epoch, row.map, row.gini, row.loss_total)
    })?;
    write_run_dir(dir, &record)?;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq)]
pub enum PointStatus {
    Completed,
    Diverged { epoch: usize, reason: String },
    Failed { kind: String, message: String },
}

#[derive(Clone, Debug)]
pub struct PointResult {
    pub id: String,
    pub dir: PathBuf,
    pub status: PointStatus,
    /// Loaded from disk instead of trained.
    pub resumed: bool,
    pub record: Option<RunRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub resume: bool,
    /// Worker threads for independent sweep points; 0 picks the default.
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            resume: false,
            threads: 1,
        }
    }
}

fn status_of(r: &RunRecord) -> PointStatus {
    match &r.outcome {
        RunOutcome::Completed => PointStatus::Completed,
        RunOutcome::Diverged { epoch, reason } => PointStatus::Diverged {
            epoch: *epoch,
            reason: reason.clone(),
        },
    }
}

fn run_point(root: &Path, point: &SweepPoint, resume: bool) -> PointResult {
    let dir = root.join(&point.id);
    if resume && dir.join(SUMMARY_FILE).exists() {
        match load_run_dir(&dir) {
            Ok(r) if r.config == point.config => {
                info!("{}: already finished, skipping", point.id);
                return PointResult {
                    id: point.id.clone(),
                    dir,
                    status: status_of(&r),
                    resumed: true,
                    record: Some(r),
                };
            }
            Ok(_) => warn!("{}: stored config differs, re-running", point.id),
            Err(e) => warn!("{}: unreadable run directory ({e}), re-running", point.id),
        }
    }
    match train_into(&dir, &point.config) {
        Ok(r) => PointResult {
            id: point.id.clone(),
            dir,
            status: status_of(&r),
            resumed: false,
            record: Some(r),
        },
        Err(e) => {
            warn!("{}: failed: {e}", point.id);
            let file = ErrorFile {
                kind: e.kind().to_string(),
                message: e.to_string(),
            };
            if let Err(w) = write_json(&dir.join(ERROR_FILE), &file) {
                warn!("{}: could not record failure: {w}", point.id);
            }
            PointResult {
                id: point.id.clone(),
                dir,
                status: PointStatus::Failed {
                    kind: file.kind,
                    message: file.message,
                },
                resumed: false,
                record: None,
            }
        }
    }
}

/// Executes every sweep point of `spec` under `root`, one directory per
/// point. Points run concurrently on `opts.threads` workers; results come
/// back in expansion order.
pub fn run(spec: &ExperimentSpec, root: &Path, opts: RunOptions) -> Result<Vec<PointResult>> {
    let points = spec.expand()?;
    info!("launching {} runs of `{}` into {}", points.len(), spec.name, root.display());
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_json(&root.join("experiment.json"), spec)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let results: Vec<PointResult> =
        pool.install(|| points.par_iter().map(|p| run_point(root, p, opts.resume)).collect());
    let failed = results.iter().filter(|r| !matches!(r.status, PointStatus::Completed)).count();
    if failed > 0 {
        warn!("{failed} of {} runs did not complete", results.len());
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            train_scenes: 6,
            val_scenes: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn run_dir_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let r = train_into(tmp.path(), &tiny()).unwrap();
        let back = load_run_dir(tmp.path()).unwrap();
        assert_eq!(back.config, r.config);
        assert_eq!(back.rows, r.rows);
        assert_eq!(back.summary, r.summary);
        assert_eq!(back.params.flatten(), r.params.flatten());
        assert!(back.params.iter().map(|(n, _)| n).eq(r.params.iter().map(|(n, _)| n)));
        for f in [CONFIG_FILE, EPOCHS_FILE, SUMMARY_FILE, MODEL_FILE, ACTIVATION_CSV, PATTERNS_CSV, ACTIVATION_SVG] {
            assert!(tmp.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn config_snapshot_reproduces_csv() {
        let tmp = tempfile::tempdir().unwrap();
        train_into(&tmp.path().join("a"), &tiny()).unwrap();
        let cfg: TrainConfig = read_json(&tmp.path().join("a").join(CONFIG_FILE)).unwrap();
        train_into(&tmp.path().join("b"), &cfg).unwrap();
        let a = fs::read(tmp.path().join("a").join(EPOCHS_FILE)).unwrap();
        let b = fs::read(tmp.path().join("b").join(EPOCHS_FILE)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_counts_resume_and_concurrency() {
        let tmp = tempfile::tempdir().unwrap();
        let mut spec = ExperimentSpec::single("t", tiny());
        spec.axes.insert("beta".into(), vec![Value::from(0.0), Value::from(0.2)]);
        spec.seeds = vec![0, 1, 2];
        let seq = run(&spec, &tmp.path().join("seq"), RunOptions::default()).unwrap();
        assert_eq!(seq.len(), 6);
        assert!(seq.iter().all(|r| r.status == PointStatus::Completed && !r.resumed));
        let dirs = fs::read_dir(tmp.path().join("seq")).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
        assert_eq!(dirs, 6);

        let again = run(&spec, &tmp.path().join("seq"), RunOptions { resume: true, threads: 1 }).unwrap();
        assert!(again.iter().all(|r| r.resumed));

        let par = run(&spec, &tmp.path().join("par"), RunOptions { resume: false, threads: 3 }).unwrap();
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.id, b.id);
            let fa = fs::read(a.dir.join(EPOCHS_FILE)).unwrap();
            let fb = fs::read(b.dir.join(EPOCHS_FILE)).unwrap();
            assert_eq!(fa, fb);
        }
    }

    #[test]
    fn failed_point_is_recorded() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec::single(
            "boom",
            TrainConfig {
                lr: 1e6,
                grad_clip: 0.0,
                momentum: 0.0,
                ..tiny()
            },
        );
        let res = run(&spec, tmp.path(), RunOptions::default()).unwrap();
        assert!(matches!(res[0].status, PointStatus::Diverged { .. }));
        let s: SummaryFile = read_json(&res[0].dir.join(SUMMARY_FILE)).unwrap();
        assert!(matches!(s.outcome, RunOutcome::Diverged { .. }));
    }
}

//! Cross-run comparison: per-configuration mean and spread over seeds,
//! and deltas against a baseline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use super::run::{load_run_dir, EPOCHS_FILE, SUMMARY_FILE};
use super::svg::{self, BarChart};
use crate::error::{Error, Result};
use crate::toymodel::{AssignmentMode, EpochRow, QueryMode, RunRecord, TrainConfig};

pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_SVG: &str = "comparison.svg";

/// Columns every compared run must expose.
const REQUIRED: [&str; 2] = ["map", "gini"];

/// Running mean and variance.
#[derive(Clone, Copy, Debug, Default)]
pub struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample standard deviation; 0 for fewer than two values.
    pub fn std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for Welford {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut w = Welford::default();
        iter.into_iter().for_each(|x| w.push(x));
        w
    }
}

/// One loaded run.
#[derive(Clone, Debug)]
pub struct RunEntry {
    pub dir: PathBuf,
    pub record: RunRecord,
    pub columns: Vec<String>,
}

/// First epoch (1-based) whose validation mAP reaches `threshold`.
pub fn epochs_to_threshold(rows: &[EpochRow], threshold: f64) -> Option<usize> {
    rows.iter().find(|r| r.map >= threshold).map(|r| r.epoch)
}

fn csv_header(path: &Path) -> Result<Vec<String>> {
    let mut r = csv::Reader::from_path(path).map_err(Error::from)?;
    Ok(r.headers()?.iter().map(str::to_string).collect())
}

/// Loads `dir` as a run directory or, failing that, every run directory
/// directly beneath it (a sweep root). Order is by path.
pub fn collect_runs(dir: &Path) -> Result<Vec<RunEntry>> {
    let load = |d: &Path| -> Result<RunEntry> {
        Ok(RunEntry {
            dir: d.to_path_buf(),
            record: load_run_dir(d)?,
            columns: csv_header(&d.join(EPOCHS_FILE))?,
        })
    };
    if dir.join(SUMMARY_FILE).exists() {
        return Ok(vec![load(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SUMMARY_FILE).exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::InvalidArgument(format!("{} contains no finished runs", dir.display())));
    }
    subdirs.iter().map(|d| load(d)).collect()
}

/// Grouping key: the configuration with its seed erased.
fn group_key(cfg: &TrainConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.seed = 0;
    Ok(serde_json::to_string(&c)?)
}

fn group_label(dir: &Path) -> String {
    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let kept: Vec<&str> = name.split("__").filter(|p| !p.starts_with("seed=")).collect();
    if kept.is_empty() {
        dir.parent()
            .and_then(Path::file_name)
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or(name)
    } else {
        kept.join("__")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    /// Dynamic (pattern-composed) queries.
    pub dynamic: bool,
    /// Quality-aware one-to-many assignment.
    pub quality_aware: bool,
    pub seeds: usize,
    pub diverged: usize,
    pub map_mean: f64,
    pub map_std: f64,
    pub gini_mean: f64,
    pub gini_std: f64,
    pub delta_map: f64,
    pub delta_gini: f64,
    /// Seeds present in both this group and the baseline.
    pub paired_seeds: usize,
    pub paired_delta_map: f64,
    pub paired_delta_gini: f64,
    pub is_baseline: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    /// Baseline first, then by (dynamic, quality-aware, label).
    pub rows: Vec<ComparisonRow>,
}

struct Group {
    label: String,
    config: TrainConfig,
    by_seed: BTreeMap<u64, (f64, f64)>,
    diverged: usize,
}

fn group(runs: &[RunEntry]) -> Result<BTreeMap<String, Group>> {
    let mut out: BTreeMap<String, Group> = BTreeMap::new();
    for r in runs {
        let key = group_key(&r.record.config)?;
        let g = out.entry(key).or_insert_with(|| Group {
            label: group_label(&r.dir),
            config: r.record.config.clone(),
            by_seed: BTreeMap::new(),
            diverged: 0,
        });
        let s = &r.record.summary;
        if g.by_seed.insert(r.record.config.seed, (s.final_map, s.final_gini)).is_some() {
            return Err(Error::InvalidArgument(format!(
                "{}: seed {} appears twice for one configuration",
                r.dir.display(),
                r.record.config.seed
            )));
        }
        if !matches!(r.record.outcome, crate::toymodel::RunOutcome::Completed) {
            g.diverged += 1;
        }
    }
    Ok(out)
}

/// Compares every configuration found under `run_dirs` against the single
/// configuration stored under `baseline_dir`.
pub fn compare(run_dirs: &[PathBuf], baseline_dir: &Path) -> Result<Comparison> {
    let base_runs = collect_runs(baseline_dir)?;
    let mut runs = Vec::new();
    for d in run_dirs {
        runs.extend(collect_runs(d)?);
    }
    if runs.len() + base_runs.len() < 2 {
        return Err(Error::InvalidArgument("comparison needs at least two runs".into()));
    }
    let base_cols = &base_runs[0].columns;
    for r in base_runs.iter().chain(&runs) {
        let common: Vec<&String> = r.columns.iter().filter(|c| base_cols.contains(c)).collect();
        if REQUIRED.iter().any(|req| !common.iter().any(|c| c == req)) {
            return Err(Error::DisjointMetrics(r.dir.clone()));
        }
    }

    let base_groups = group(&base_runs)?;
    if base_groups.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "baseline {} holds {} configurations, expected one",
            baseline_dir.display(),
            base_groups.len()
        )));
    }
    let (base_key, base) = base_groups.into_iter().next().expect("one group");
    let mut groups = group(&runs)?;
    let mut base = match groups.remove(&base_key) {
        // the baseline may also appear among the compared runs
        Some(mut g) => {
            for (s, v) in base.by_seed {
                g.by_seed.insert(s, v);
            }
            g.diverged = g.diverged.max(base.diverged);
            g
        }
        None => base,
    };
    base.label = group_label(&base_runs[0].dir);

    let stats = |g: &Group| {
        let m: Welford = g.by_seed.values().map(|v| v.0).collect();
        let gi: Welford = g.by_seed.values().map(|v| v.1).collect();
        (m, gi)
    };
    let (bm, bg) = stats(&base);
    let row = |g: &Group, is_baseline: bool| {
        let (m, gi) = stats(g);
        let paired: Vec<(f64, f64)> = g
            .by_seed
            .iter()
            .filter_map(|(s, v)| base.by_seed.get(s).map(|b| (v.0 - b.0, v.1 - b.1)))
            .collect();
        let pm: Welford = paired.iter().map(|p| p.0).collect();
        let pg: Welford = paired.iter().map(|p| p.1).collect();
        ComparisonRow {
            label: g.label.clone(),
            dynamic: g.config.model.mode == QueryMode::Dynamic,
            quality_aware: g.config.assignment == AssignmentMode::QualityAware,
            seeds: m.count(),
            diverged: g.diverged,
            map_mean: m.mean(),
            map_std: m.std(),
            gini_mean: gi.mean(),
            gini_std: gi.std(),
            delta_map: m.mean() - bm.mean(),
            delta_gini: gi.mean() - bg.mean(),
            paired_seeds: paired.len(),
            paired_delta_map: pm.mean(),
            paired_delta_gini: pg.mean(),
            is_baseline,
        }
    };
    let mut rows = vec![row(&base, true)];
    let mut rest: Vec<ComparisonRow> = groups.values().map(|g| row(g, false)).collect();
    rest.sort_by(|a, b| (a.dynamic, a.quality_aware, &a.label).cmp(&(b.dynamic, b.quality_aware, &b.label)));
    rows.extend(rest);
    info!("compared {} configurations against `{}`", rows.len(), rows[0].label);
    Ok(Comparison { rows })
}

impl Comparison {
    pub fn row(&self, dynamic: bool, quality_aware: bool) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.dynamic == dynamic && r.quality_aware == quality_aware)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_svg(&self) -> String {
        let bars = |f: fn(&ComparisonRow) -> f64| self.rows.iter().map(|r| (r.label.clone(), f(r))).collect();
        svg::render(&[
            BarChart {
                title: "mean final mAP".into(),
                bars: bars(|r| r.map_mean),
            },
            BarChart {
                title: "mean final-layer Gini".into(),
                bars: bars(|r| r.gini_mean),
            },
            BarChart {
                title: "mAP delta vs baseline".into(),
                bars: bars(|r| r.delta_map),
            },
        ])
    }

    /// Writes `comparison.csv` and `comparison.svg` into `out`.
    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let csv_path = out.join(COMPARISON_CSV);
        fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let svg_path = out.join(COMPARISON_SVG);
        fs::write(&svg_path, self.to_svg()).map_err(|e| Error::io(&svg_path, e))
    }
}

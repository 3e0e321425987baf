use std::fs;
use std::path::{Path, PathBuf};

use super::run::{read_json, CONFIG_FILE, MODEL_FILE};
use crate::diffcore::ParamStore;
use crate::error::{Error, Result};
use crate::toymodel::{DetectorModel, QueryMode, TrainConfig};

/// Rebuilds the trained model stored in a run directory.
pub fn load_model(run_dir: &Path) -> Result<(TrainConfig, DetectorModel)> {
    let config: TrainConfig = read_json(&run_dir.join(CONFIG_FILE))?;
    let stored: ParamStore = read_json(&run_dir.join(MODEL_FILE))?;
    let mut model = config.init_model()?;
    let copied = model.store.copy_matching_from(&stored);
    if copied != model.store.len() || stored.len() != model.store.len() {
        return Err(Error::InvalidArgument(format!(
            "{}: stored parameters do not fit the configured model ({copied} of {} restored)",
            run_dir.display(),
            model.store.len()
        )));
    }
    Ok((config, model))
}

/// Writes the weight matrix of each of the first `scenes` validation
/// scenes (`weights_scene{i}.csv`, one row per query) and per-pattern
/// aggregates over them (`pattern_weights.csv`). Returns the files written.
pub fn dump_weights(run_dir: &Path, scenes: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let (config, model) = load_model(run_dir)?;
    if config.model.mode != QueryMode::Dynamic {
        return Err(Error::InvalidArgument(format!(
            "{}: static-query runs have no pattern weights",
            run_dir.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let val = config.val_set()?;
    let m = config.model.m;
    let mut mean = vec![0.0; m];
    let mut argmax = vec![0usize; m];
    let mut rows_seen = 0usize;
    let mut written = Vec::new();
    for (i, scene) in val.iter().take(scenes).enumerate() {
        let (_, w) = model.predict_with_weights(scene)?;
        let w = w.expect("dynamic model yields weights");
        let path = out.join(format!("weights_scene{i}.csv"));
        let mut wr = csv::Writer::from_path(&path)?;
        let mut header = vec!["query".to_string()];
        header.extend((0..m).map(|j| format!("p{j}")));
        wr.write_record(&header)?;
        for q in 0..w.rows() {
            let row = w.row(q);
            let mut rec = vec![q.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            wr.write_record(&rec)?;
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
            let best = (0..m).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            argmax[best] += 1;
            rows_seen += 1;
        }
        wr.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let path = out.join("pattern_weights.csv");
    let mut wr = csv::Writer::from_path(&path)?;
    wr.write_record(["pattern", "mean_weight", "argmax_count"])?;
    for j in 0..m {
        let avg = if rows_seen > 0 { mean[j] / rows_seen as f64 } else { 0.0 };
        wr.write_record([j.to_string(), avg.to_string(), argmax[j].to_string()])?;
    }
    wr.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

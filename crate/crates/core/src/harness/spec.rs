use std::collections::BTreeMap;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::toymodel::TrainConfig;

/// A base configuration, sweep axes and replicate seeds.
///
/// Axis names are dotted paths into the serialized [`TrainConfig`]
/// (`"beta"`, `"model.m"`, `"model.mode"`, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default)]
    pub base: TrainConfig,
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<Value>>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// One fully resolved configuration of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    /// Directory name, unique within the sweep.
    pub id: String,
    pub overrides: Vec<(String, Value)>,
    pub config: TrainConfig,
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("axis `{path}`: `{part}` is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(Error::InvalidConfig(format!("axis `{path}`: unknown field `{part}`")));
        }
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked above");
    }
    Err(Error::InvalidConfig("empty axis name".into()))
}

fn label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.=".contains(c) { c } else { '_' })
        .collect()
}

/// Applies `overrides` and `seed` to `base`.
pub fn apply_overrides(base: &TrainConfig, overrides: &[(String, Value)], seed: u64) -> Result<TrainConfig> {
    let mut v = serde_json::to_value(base)?;
    for (path, value) in overrides {
        set_path(&mut v, path, value.clone())?;
    }
    set_path(&mut v, "seed", Value::from(seed))?;
    let cfg: TrainConfig = serde_json::from_value(v)?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentSpec {
    pub fn single(name: impl Into<String>, base: TrainConfig) -> Self {
        let seeds = vec![base.seed];
        Self {
            name: name.into(),
            base,
            axes: BTreeMap::new(),
            seeds,
        }
    }

    /// Number of runs: product of axis lengths times the seed count.
    pub fn size(&self) -> usize {
        self.axes.values().map(Vec::len).product::<usize>() * self.seeds.len()
    }

    /// Every axis combination (last axis fastest) for every seed.
    pub fn expand(&self) -> Result<Vec<SweepPoint>> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig(format!("experiment `{}` has no seeds", self.name)));
        }
        if let Some((name, _)) = self.axes.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::InvalidConfig(format!("axis `{name}` has no values")));
        }
        let mut combos: Vec<Vec<(String, Value)>> = vec![Vec::new()];
        for (name, values) in &self.axes {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((name.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        let mut points = Vec::with_capacity(self.size());
        for overrides in &combos {
            for &seed in &self.seeds {
                let config = apply_overrides(&self.base, overrides, seed)?;
                let mut parts: Vec<String> = overrides
                    .iter()
                    .map(|(k, v)| sanitize(&format!("{k}={}", label(v))))
                    .collect();
                parts.push(format!("seed={seed}"));
                points.push(SweepPoint {
                    id: parts.join("__"),
                    overrides: overrides.clone(),
                    config,
                });
            }
        }
        info!("experiment `{}`: {} runs", self.name, points.len());
        Ok(points)
    }
}

/// Named sweeps shipped with the harness.
pub const PRESETS: [&str; 5] = ["patterns", "beta", "k", "gamma", "ablation"];

/// Builds a preset: the four single-axis sweeps around the default
/// configuration, or the {dynamic queries, quality-aware assignment}
/// on/off grid.
pub fn preset(name: &str, seeds: Vec<u64>) -> Result<ExperimentSpec> {
    let (axis, values): (&str, Vec<Value>) = match name {
        "patterns" => ("model.m", [5, 10, 15, 20, 25].map(Value::from).to_vec()),
        "beta" => ("beta", [0.0, 0.1, 0.2, 0.3, 0.4].map(Value::from).to_vec()),
        "k" => ("k", [1, 2, 4, 6, 8].map(Value::from).to_vec()),
        "gamma" => ("gamma", [0.0, 0.2, 0.4, 0.6, 0.8].map(Value::from).to_vec()),
        "ablation" => {
            let mut axes = BTreeMap::new();
            axes.insert("model.mode".to_string(), vec![Value::from("static"), Value::from("dynamic")]);
            axes.insert(
                "assignment".to_string(),
                vec![Value::from("one-to-one"), Value::from("quality-aware")],
            );
            return Ok(ExperimentSpec {
                name: "ablation".into(),
                base: TrainConfig::default(),
                axes,
                seeds,
            });
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown preset `{other}`; expected one of {PRESETS:?}"
            )))
        }
    };
    let mut axes = BTreeMap::new();
    axes.insert(axis.to_string(), values);
    Ok(ExperimentSpec {
        name: name.into(),
        base: TrainConfig::default(),
        axes,
        seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{AssignmentMode, QueryMode};

    #[test]
    fn empty_axes_give_one_run() {
        let spec = ExperimentSpec::single("one", TrainConfig::default());
        let pts = spec.expand().unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].config, TrainConfig::default());
        assert_eq!(pts[0].id, "seed=0");
    }

    #[test]
    fn axis_times_seeds() {
        let mut spec = ExperimentSpec::single("s", TrainConfig::default());
        spec.axes.insert("beta".into(), vec![Value::from(0.0), Value::from(0.3)]);
        spec.seeds = vec![1, 2, 3];
        assert_eq!(spec.size(), 6);
        let pts = spec.expand().unwrap();
        assert_eq!(pts.len(), 6);
        let mut ids: Vec<_> = pts.iter().map(|p| p.id.clone()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 6);
        assert_eq!(pts[4].config.beta, 0.3);
        assert_eq!(pts[4].config.seed, 2);
    }

    #[test]
    fn presets_cover_the_grid() {
        for name in PRESETS {
            let spec = preset(name, vec![0]).unwrap();
            let pts = spec.expand().unwrap();
            assert_eq!(pts.len(), if name == "ablation" { 4 } else { 5 });
        }
        let pts = preset("patterns", vec![0]).unwrap().expand().unwrap();
        let ms: Vec<usize> = pts.iter().map(|p| p.config.model.m).collect();
        assert_eq!(ms, vec![5, 10, 15, 20, 25]);
        let ab = preset("ablation", vec![7]).unwrap().expand().unwrap();
        let combos: Vec<_> = ab.iter().map(|p| (p.config.assignment, p.config.model.mode)).collect();
        assert!(combos.contains(&(AssignmentMode::OneToOne, QueryMode::Static)));
        assert!(combos.contains(&(AssignmentMode::QualityAware, QueryMode::Dynamic)));
        assert!(preset("nope", vec![0]).is_err());
    }

    #[test]
    fn bad_axes_rejected() {
        let mut spec = ExperimentSpec::single("s", TrainConfig::default());
        spec.axes.insert("model.nope".into(), vec![Value::from(1)]);
        assert!(matches!(spec.expand(), Err(Error::InvalidConfig(_))));
        let mut spec = ExperimentSpec::single("s", TrainConfig::default());
        spec.axes.insert("k".into(), vec![Value::from(0)]);
        assert!(matches!(spec.expand(), Err(Error::InvalidConfig(_))));
        let mut spec = ExperimentSpec::single("s", TrainConfig::default());
        spec.axes.insert("beta".into(), vec![]);
        assert!(spec.expand().is_err());
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = preset("beta", vec![0, 1]).unwrap();
        let s = serde_json::to_string(&spec).unwrap();
        let back: ExperimentSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
        let minimal: ExperimentSpec = serde_json::from_str(r#"{"name": "x"}"#).unwrap();
        assert_eq!(minimal.expand().unwrap().len(), 1);
    }
}

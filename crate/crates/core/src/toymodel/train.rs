use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{total_loss, LossBreakdown};
use super::model::{DetectorModel, ModelConfig, QueryMode};
use super::scene::{derive_seed, render_scene, Scene, SceneParams};
use crate::assignment::VarifocalParams;
use crate::diffcore::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::geometry::{bbox_from_row, iou};
use crate::matching::{self, LossWeights, Prediction};
use crate::metrics::{coco_thresholds, mean_average_precision, ActivationCounts, Detection};

const STREAM_TRAIN: u64 = 0;
const STREAM_VAL: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

/// Losses above this abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignmentMode {
    OneToOne,
    FixedK,
    QualityAware,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub scene: SceneParams,
    pub assignment: AssignmentMode,
    pub gamma: f64,
    pub k: usize,
    pub l: usize,
    pub beta: f64,
    pub weights: LossWeights,
    pub bg_weight: f64,
    pub vfl: VarifocalParams,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            scene: SceneParams::default(),
            assignment: AssignmentMode::QualityAware,
            gamma: 0.4,
            k: 4,
            l: 1,
            beta: 0.2,
            weights: LossWeights::default(),
            bg_weight: 0.1,
            vfl: VarifocalParams::default(),
            lr: 0.05,
            momentum: 0.9,
            grad_clip: 1.0,
            batch_size: 4,
            epochs: 30,
            train_scenes: 200,
            val_scenes: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Static queries supervised one-to-one only.
    pub fn baseline() -> Self {
        Self {
            model: ModelConfig {
                mode: QueryMode::Static,
                ..ModelConfig::default()
            },
            assignment: AssignmentMode::OneToOne,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.scene.d != self.model.d
            || self.scene.num_classes != self.model.num_classes
            || self.model.scale_extents != [self.scene.coarse_grid, self.scene.fine_grid]
        {
            return bad("scene and model disagree on d, the class count or the grid sizes".into());
        }
        if !(self.beta >= 0.0) || !(self.gamma >= 0.0) {
            return bad(format!("β = {} and γ = {} must be non-negative", self.beta, self.gamma));
        }
        if self.l < 1 || self.k < self.l {
            return bad(format!("need k ≥ l ≥ 1, got k = {}, l = {}", self.k, self.l));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.grad_clip >= 0.0) {
            return bad("learning rate must be positive and momentum in [0, 1)".into());
        }
        if !(self.bg_weight >= 0.0) || self.weights.cls < 0.0 || self.weights.l1 < 0.0 || self.weights.giou < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.train_scenes == 0 || self.val_scenes == 0 {
            return bad("batch size, epochs and scene counts must be positive".into());
        }
        Ok(())
    }

    /// Learning rate of a 1-based epoch: ×0.1 from 85% of the schedule on.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drop_at = (0.85 * self.epochs as f64).ceil() as usize;
        if epoch > drop_at {
            self.lr * 0.1
        } else {
            self.lr
        }
    }

    pub fn train_set(&self) -> Result<Vec<Scene>> {
        scenes(self.seed, STREAM_TRAIN, self.train_scenes, &self.scene)
    }

    pub fn val_set(&self) -> Result<Vec<Scene>> {
        scenes(self.seed, STREAM_VAL, self.val_scenes, &self.scene)
    }

    pub fn init_model(&self) -> Result<DetectorModel> {
        DetectorModel::init(self.model.clone(), derive_seed(self.seed, STREAM_INIT, 0))
    }
}

fn scenes(seed: u64, stream: u64, count: usize, params: &SceneParams) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| render_scene(derive_seed(seed, stream, i), params))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_one_to_many: f64,
    pub loss_aux: f64,
    pub loss_div: f64,
    pub map: f64,
    pub gini: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunOutcome {
    Completed,
    Diverged { epoch: usize, reason: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs_completed: usize,
    pub best_map: f64,
    pub final_map: f64,
    pub final_gini: f64,
    /// Normalized pattern activation mass of the last evaluation.
    pub pattern_activation: Vec<f64>,
    /// Final-layer match counts per query, non-increasing.
    pub query_histogram: Vec<usize>,
}

impl RunSummary {
    pub fn from_rows(rows: &[EpochRow], eval: Option<&Evaluation>) -> Self {
        let last = rows.last();
        let activation = eval
            .map(|e| {
                let total: f64 = e.activation.pattern_mass.iter().sum();
                e.activation
                    .pattern_mass
                    .iter()
                    .map(|v| if total > 0.0 { v / total } else { 0.0 })
                    .collect()
            })
            .unwrap_or_default();
        Self {
            epochs_completed: rows.len(),
            best_map: rows.iter().map(|r| r.map).fold(0.0, f64::max),
            final_map: last.map_or(0.0, |r| r.map),
            final_gini: last.map_or(0.0, |r| r.gini),
            pattern_activation: activation,
            query_histogram: eval.map(|e| e.activation.sorted_histogram()).unwrap_or_default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub num_params: usize,
    pub rows: Vec<EpochRow>,
    pub outcome: RunOutcome,
    pub summary: RunSummary,
    pub duration_secs: f64,
    #[serde(skip)]
    pub params: ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub map: f64,
    pub activation: ActivationCounts,
}

/// One detection per query: its most probable foreground class.
pub fn detections_from(probs: &[f64], boxes: &[f64], k: usize) -> Vec<Detection> {
    probs
        .chunks(k)
        .enumerate()
        .map(|(i, row)| {
            let (class, score) = row[..k - 1]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, &p)| if p > acc.1 { (c, p) } else { acc });
            Detection {
                bbox: bbox_from_row(boxes, i),
                score,
                class,
            }
        })
        .collect()
}

/// Validation mAP over COCO thresholds and final-layer utilization.
/// Scenes are evaluated in parallel and merged in order.
pub fn evaluate(model: &DetectorModel, scenes: &[Scene], weights: LossWeights) -> Result<Evaluation> {
    let k = model.config.num_classes + 1;
    let per_scene = scenes
        .par_iter()
        .map(|scene| -> Result<(Vec<Detection>, ActivationCounts)> {
            let (layers, w) = model.predict_with_weights(scene)?;
            let (probs, boxes) = layers.last().expect("at least one layer");
            let dets = detections_from(probs.data(), boxes.data(), k);
            let preds: Vec<Prediction> = probs
                .data()
                .chunks(k)
                .enumerate()
                .map(|(i, p)| Prediction {
                    bbox: bbox_from_row(boxes.data(), i),
                    probs: p.to_vec(),
                })
                .collect();
            let m = matching::hungarian(&matching::build_cost(&preds, &scene.gts, weights)?)?;
            let mut act = ActivationCounts::new(model.config.n, w.as_ref().map_or(0, |w| w.shape()[1]));
            for &(q, g) in &m.pairs {
                act.record_match(q);
                let confident = dets[q].score > 0.5 && iou(&dets[q].bbox, &scene.gts[g].bbox) > 0.7;
                if let (true, Some(w)) = (confident, &w) {
                    act.record_pattern_row(w.row(q));
                }
            }
            Ok((dets, act))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut activation = ActivationCounts::new(model.config.n, 0);
    let mut dets = Vec::with_capacity(scenes.len());
    for (i, (d, a)) in per_scene.into_iter().enumerate() {
        if i == 0 {
            activation.pattern_mass = vec![0.0; a.pattern_mass.len()];
        }
        activation.merge(&a);
        dets.push(d);
    }
    let gts: Vec<_> = scenes.iter().map(|s| s.gts.clone()).collect();
    let map = mean_average_precision(&dets, &gts, model.config.num_classes, &coco_thresholds())?;
    Ok(Evaluation { map, activation })
}

/// Momentum gradient descent over mini-batches.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: DetectorModel,
    velocity: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: DetectorModel) -> Result<Self> {
        config.validate()?;
        let velocity = vec![0.0; model.num_params()];
        Ok(Self {
            config,
            model,
            velocity,
        })
    }

    /// Loss and gradients of one scene, accumulated into the parameters.
    pub fn accumulate(&mut self, scene: &Scene) -> Result<LossBreakdown> {
        let tape = Tape::new();
        let bound = self.model.store.bind(&tape);
        let decoded = self.model.decode(&bound, scene)?;
        let (loss, bd, _) = total_loss(&decoded, &scene.gts, &self.config)?;
        let grads = tape.backward(loss)?;
        self.model.store.accumulate(&grads, &bound);
        Ok(bd)
    }

    /// One update on `batch`; returns the mean breakdown.
    pub fn step(&mut self, batch: &[&Scene], lr: f64) -> Result<LossBreakdown> {
        self.model.store.zero_grad();
        let mut mean = LossBreakdown::default();
        for scene in batch {
            let bd = self.accumulate(scene)?;
            mean.total += bd.total;
            mean.one_to_many += bd.one_to_many;
            mean.aux += bd.aux;
            mean.diversity += bd.diversity;
            mean.diversity_raw += bd.diversity_raw;
        }
        let inv = 1.0 / batch.len() as f64;
        mean.total *= inv;
        mean.one_to_many *= inv;
        mean.aux *= inv;
        mean.diversity *= inv;
        mean.diversity_raw *= inv;

        let mut g = self.model.store.flat_grads();
        g.iter_mut().for_each(|v| *v *= inv);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                reason: "non-finite gradient".into(),
            });
        }
        let clip = self.config.grad_clip;
        if clip > 0.0 && norm > clip {
            let s = clip / norm;
            g.iter_mut().for_each(|v| *v *= s);
        }
        let mu = self.config.momentum;
        let mut theta = self.model.store.flatten();
        for ((t, v), gi) in theta.iter_mut().zip(&mut self.velocity).zip(&g) {
            *v = mu * *v + gi;
            *t -= lr * *v;
        }
        self.model.store.load_flat(&theta)?;
        self.model.after_update();
        Ok(mean)
    }
}

/// Trains from scratch per `config`.
pub fn train(config: &TrainConfig) -> Result<RunRecord> {
    train_with_progress(config, |_| {})
}

/// [`train`], reporting each finished epoch row.
pub fn train_with_progress(config: &TrainConfig, mut on_epoch: impl FnMut(&EpochRow)) -> Result<RunRecord> {
    config.validate()?;
    let started = Instant::now();
    let train_set = config.train_set()?;
    let val_set = config.val_set()?;
    let model = config.init_model()?;
    let num_params = model.num_params();
    info!(
        "model: {num_params} parameters (n={}, m={}, d={}, L={}, C={}, {:?} queries)",
        config.model.n, config.model.m, config.model.d, config.model.layers, config.model.num_classes, config.model.mode
    );
    let mut trainer = Trainer::new(config.clone(), model)?;
    let mut rows = Vec::with_capacity(config.epochs);
    let mut outcome = RunOutcome::Completed;
    let mut last_eval = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'epochs: for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_SHUFFLE, epoch as u64)));
        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &train_set[i]).collect();
            let bd = match trainer.step(&batch, lr) {
                Ok(bd) => bd,
                Err(Error::Diverged { reason, .. }) => {
                    outcome = RunOutcome::Diverged { epoch, reason };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !bd.total.is_finite() || bd.total > DIVERGENCE_LIMIT {
                outcome = RunOutcome::Diverged {
                    epoch,
                    reason: format!("loss {} after batch {batches}", bd.total),
                };
                break 'epochs;
            }
            sums.total += bd.total;
            sums.one_to_many += bd.one_to_many;
            sums.aux += bd.aux;
            sums.diversity += bd.diversity;
            batches += 1;
        }
        let eval = evaluate(&trainer.model, &val_set, config.weights)?;
        let gini = eval.activation.query_gini().unwrap_or(0.0);
        let b = batches as f64;
        let row = EpochRow {
            epoch,
            lr,
            loss_total: sums.total / b,
            loss_one_to_many: sums.one_to_many / b,
            loss_aux: sums.aux / b,
            loss_div: sums.diversity / b,
            map: eval.map,
            gini,
        };
        debug!("epoch {epoch}: {row:?}");
        on_epoch(&row);
        rows.push(row);
        last_eval = Some(eval);
    }
    if let RunOutcome::Diverged { epoch, reason } = &outcome {
        warn!("run diverged at epoch {epoch}: {reason}");
    }
    let summary = RunSummary::from_rows(&rows, last_eval.as_ref());
    Ok(RunRecord {
        config: config.clone(),
        num_params,
        rows,
        outcome,
        summary,
        duration_secs: started.elapsed().as_secs_f64(),
        params: trainer.model.store,
    })
}

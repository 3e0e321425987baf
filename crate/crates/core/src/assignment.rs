//! Quality-aware one-to-many label assignment.
//!
//! Every prediction–ground-truth pair gets a quality score
//! `s = IoU(b̂_i, g_j) - γ·ĉ_i`. For each ground truth the top-`k` scores
//! of its column are summed and rounded up to give an adaptive positive
//! count `k_j` (never below `l`); the `k_j` best-scoring predictions become
//! its positives. A prediction may be positive for several ground truths.

use serde::{Deserialize, Serialize};

use crate::diffcore::Var;
use crate::error::{Error, Result};
use crate::geometry::{self, iou, Bbox};
use crate::matching::{GroundTruth, LossParts, LossWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityScoreTable {
    n_pred: usize,
    n_gt: usize,
    gamma: f64,
    scores: Vec<f64>,
}

impl QualityScoreTable {
    pub fn from_scores(n_pred: usize, n_gt: usize, gamma: f64, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != n_pred * n_gt {
            return Err(Error::InvalidArgument(format!(
                "{} scores for a {n_pred}×{n_gt} table",
                scores.len()
            )));
        }
        Ok(Self {
            n_pred,
            n_gt,
            gamma,
            scores,
        })
    }

    pub fn n_pred(&self) -> usize {
        self.n_pred
    }

    pub fn n_gt(&self) -> usize {
        self.n_gt
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn get(&self, pred: usize, gt: usize) -> f64 {
        self.scores[pred * self.n_gt + gt]
    }

    pub fn column(&self, gt: usize) -> Vec<f64> {
        (0..self.n_pred).map(|p| self.get(p, gt)).collect()
    }
}

/// Builds the score table from `(box, confidence)` predictions.
pub fn quality_score(preds: &[(Bbox, f64)], gts: &[Bbox], gamma: f64) -> Result<QualityScoreTable> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be ≥ 0, got {gamma}")));
    }
    if let Some(&(_, c)) = preds.iter().find(|(_, c)| !(0.0..=1.0).contains(c)) {
        return Err(Error::InvalidConfidence(c));
    }
    let mut scores = Vec::with_capacity(preds.len() * gts.len());
    for (b, c) in preds {
        for g in gts {
            scores.push(iou(b, g) - gamma * c);
        }
    }
    QualityScoreTable::from_scores(preds.len(), gts.len(), gamma, scores)
}

/// Prediction indices of a column ordered by descending score, ties by
/// lower index.
fn ranked(table: &QualityScoreTable, gt: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..table.n_pred).collect();
    idx.sort_by(|&a, &b| {
        table
            .get(b, gt)
            .total_cmp(&table.get(a, gt))
            .then(a.cmp(&b))
    });
    idx
}

/// Adaptive positive count per ground truth: `max(ceil(Σ top-k scores), l)`.
/// `k` is capped at the number of predictions.
pub fn adaptive_k(table: &QualityScoreTable, k: usize, l: usize) -> Vec<usize> {
    let top = k.min(table.n_pred);
    (0..table.n_gt)
        .map(|gt| {
            let sum: f64 = ranked(table, gt)
                .iter()
                .take(top)
                .map(|&p| table.get(p, gt))
                .sum();
            let c = sum.ceil();
            if c <= l as f64 {
                l
            } else {
                c as usize
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtPositives {
    pub k: usize,
    /// Sorted by descending score.
    pub preds: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    pub per_gt: Vec<GtPositives>,
}

impl AssignmentResult {
    /// All `(pred, gt)` positive pairs, grouped by ground truth.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.per_gt
            .iter()
            .enumerate()
            .flat_map(|(g, pos)| pos.preds.iter().map(move |&p| (p, g)))
    }

    pub fn total_positives(&self) -> usize {
        self.per_gt.iter().map(|p| p.k).sum()
    }
}

/// Selects the `k_j` highest-scoring predictions of every column.
pub fn select_positives(table: &QualityScoreTable, ks: &[usize]) -> Result<AssignmentResult> {
    if ks.len() != table.n_gt {
        return Err(Error::InvalidArgument(format!(
            "{} positive counts for {} ground truths",
            ks.len(),
            table.n_gt
        )));
    }
    if let Some(&k) = ks.iter().find(|&&k| k > table.n_pred) {
        return Err(Error::InvalidArgument(format!(
            "positive count {k} exceeds {} predictions",
            table.n_pred
        )));
    }
    let per_gt = ks
        .iter()
        .enumerate()
        .map(|(gt, &k)| {
            let preds: Vec<usize> = ranked(table, gt).into_iter().take(k).collect();
            let scores = preds.iter().map(|&p| table.get(p, gt)).collect();
            GtPositives { k, preds, scores }
        })
        .collect();
    Ok(AssignmentResult { per_gt })
}

/// Score, count and select in one step.
pub fn quality_aware_assign(table: &QualityScoreTable, k: usize, l: usize) -> Result<AssignmentResult> {
    let ks: Vec<usize> = adaptive_k(table, k, l)
        .into_iter()
        .map(|kj| kj.min(table.n_pred))
        .collect();
    select_positives(table, &ks)
}

/// Fixed-size positive sets (`min(k, n)` per ground truth) ranked by the
/// same quality score.
pub fn fixed_k_assign(table: &QualityScoreTable, k: usize) -> Result<AssignmentResult> {
    select_positives(table, &vec![k.min(table.n_pred); table.n_gt])
}

/// Constants of the IoU-aware varifocal classification term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarifocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for VarifocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            gamma: 2.0,
        }
    }
}

/// One-to-many set loss over an assignment.
///
/// Each positive pair `(i, j)` contributes
/// `λ_cls · VFL⁺ + λ_l1 · L1 + λ_giou · (1 - GIoU)` with
/// `VFL⁺ = -q·[q·log p + (1-q)·log(1-p)]`, `p` the probability of the
/// ground-truth class and `q` the IoU of the pair, held constant.
/// Predictions positive for no ground truth contribute
/// `λ_cls · (-α·p^γ·log(1-p))` with `p = 1 - p_background`.
pub fn one_to_many_loss<'t>(
    assignment: &AssignmentResult,
    logits: Var<'t>,
    boxes: Var<'t>,
    gts: &[GroundTruth],
    weights: LossWeights,
    vfl: VarifocalParams,
) -> Result<LossParts<'t>> {
    let q = iou_targets(assignment, &boxes.value(), gts);
    one_to_many_loss_with_targets(assignment, &q, logits, boxes, gts, weights, vfl)
}

/// IoU of every positive pair, in [`AssignmentResult::pairs`] order.
pub fn iou_targets(assignment: &AssignmentResult, boxes: &[f64], gts: &[GroundTruth]) -> Vec<f64> {
    assignment
        .pairs()
        .map(|(p, g)| iou(&geometry::bbox_from_row(boxes, p), &gts[g].bbox))
        .collect()
}

/// [`one_to_many_loss`] with externally supplied IoU targets, one per
/// positive pair.
pub fn one_to_many_loss_with_targets<'t>(
    assignment: &AssignmentResult,
    q: &[f64],
    logits: Var<'t>,
    boxes: Var<'t>,
    gts: &[GroundTruth],
    weights: LossWeights,
    vfl: VarifocalParams,
) -> Result<LossParts<'t>> {
    let shape = logits.shape();
    let (n, k) = (shape[0], shape[1]);
    let bg = k - 1;
    let logp = logits.log_softmax_rows();

    let pairs: Vec<(usize, usize)> = assignment.pairs().collect();
    if q.len() != pairs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} IoU targets for {} positive pairs",
            q.len(),
            pairs.len()
        )));
    }
    let mut is_pos = vec![false; n];
    pairs.iter().for_each(|&(p, _)| is_pos[p] = true);
    let negatives: Vec<usize> = (0..n).filter(|&i| !is_pos[i]).collect();

    let mut cls_terms: Vec<Var<'t>> = Vec::new();
    if !pairs.is_empty() {
        let positions: Vec<(usize, usize)> = pairs.iter().map(|&(p, g)| (p, gts[g].class)).collect();
        let lp = logp.pick(&positions)?;
        let l1mp = lp.log1m_exp();
        let wa: Vec<f64> = q.iter().map(|q| -q * q).collect();
        let wb: Vec<f64> = q.iter().map(|q| -q * (1.0 - q)).collect();
        cls_terms.push(lp.mul_const(&wa)?.sum_all());
        cls_terms.push(l1mp.mul_const(&wb)?.sum_all());
    }
    if !negatives.is_empty() {
        let positions: Vec<(usize, usize)> = negatives.iter().map(|&i| (i, bg)).collect();
        let log_bg = logp.pick(&positions)?;
        // p_fg^γ = exp(γ · ln(1 - p_bg))
        let focal = log_bg.log1m_exp().scale(vfl.gamma).exp();
        cls_terms.push(focal.mul(log_bg)?.sum_all().scale(-vfl.alpha));
    }
    let mut cls = cls_terms
        .first()
        .copied()
        .ok_or(Error::Empty("predictions"))?;
    for t in &cls_terms[1..] {
        cls = cls.add(*t)?;
    }
    let cls = cls.scale(weights.cls);
    let mut total = cls;
    let (mut l1_v, mut giou_v) = (0.0, 0.0);
    if !pairs.is_empty() {
        let idx: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let targets: Vec<Bbox> = pairs.iter().map(|p| gts[p.1].bbox).collect();
        let sel = boxes.gather_rows(&idx)?;
        let l1 = geometry::l1_loss(sel, &targets)?.sum_all().scale(weights.l1);
        let gi = geometry::giou_loss(sel, &targets)?.sum_all().scale(weights.giou);
        l1_v = l1.item();
        giou_v = gi.item();
        total = total.add(l1)?.add(gi)?;
    }
    Ok(LossParts {
        total,
        cls: cls.item(),
        l1: l1_v,
        giou: giou_v,
    })
}

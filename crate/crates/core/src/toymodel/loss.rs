use serde::{Deserialize, Serialize};

use super::model::{Decoded, LayerOutput};
use super::train::{AssignmentMode, TrainConfig};
use crate::assignment::{self, AssignmentResult};
use crate::diffcore::Var;
use crate::error::Result;
use crate::geometry::bbox_from_row;
use crate::matching::{self, GroundTruth, Matching, Prediction};
use crate::patterns::diversity_loss;

/// Row softmax of a detached `n × k` logit buffer.
pub fn softmax_values(logits: &[f64], k: usize) -> Vec<Vec<f64>> {
    logits
        .chunks(k)
        .map(|row| {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Detached predictions of one layer.
pub fn detached_predictions(out: &LayerOutput<'_>) -> Vec<Prediction> {
    let k = out.logits.shape()[1];
    let boxes = out.boxes.value();
    softmax_values(&out.logits.value(), k)
        .into_iter()
        .enumerate()
        .map(|(i, probs)| Prediction {
            bbox: bbox_from_row(&boxes, i),
            probs,
        })
        .collect()
}

/// Targets of one decoder layer, fixed before the loss is differentiated.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    pub matching: Matching,
    /// One-to-many positives and their IoU targets; never set on the last
    /// layer.
    pub many: Option<(AssignmentResult, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionPlan {
    pub layers: Vec<LayerPlan>,
}

/// Matches and assigns every layer from the current (detached) outputs.
pub fn plan_supervision(outputs: &[LayerOutput<'_>], gts: &[GroundTruth], cfg: &TrainConfig) -> Result<SupervisionPlan> {
    let last = outputs.len() - 1;
    let layers = outputs
        .iter()
        .enumerate()
        .map(|(l, out)| {
            let preds = detached_predictions(out);
            let cost = matching::build_cost(&preds, gts, cfg.weights)?;
            let matching = matching::hungarian(&cost)?;
            let many = if l < last && cfg.assignment != AssignmentMode::OneToOne {
                let bg = preds[0].probs.len() - 1;
                let scored: Vec<_> = preds
                    .iter()
                    .map(|p| (p.bbox, p.probs[..bg].iter().copied().fold(0.0, f64::max)))
                    .collect();
                let gt_boxes: Vec<_> = gts.iter().map(|g| g.bbox).collect();
                let table = assignment::quality_score(&scored, &gt_boxes, cfg.gamma)?;
                let result = match cfg.assignment {
                    AssignmentMode::QualityAware => assignment::quality_aware_assign(&table, cfg.k, cfg.l)?,
                    _ => assignment::fixed_k_assign(&table, cfg.k)?,
                };
                let q = assignment::iou_targets(&result, &out.boxes.value(), gts);
                Some((result, q))
            } else {
                None
            };
            Ok(LayerPlan { matching, many })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SupervisionPlan { layers })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerTerms {
    pub aux: f64,
    pub one_to_many: Option<f64>,
}

/// Scalar loss value with its three components. `diversity` already
/// carries the β factor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub one_to_many: f64,
    pub aux: f64,
    pub diversity: f64,
    pub diversity_raw: f64,
    pub layers: Vec<LayerTerms>,
}

/// Set-prediction objective over all decoder layers for a fixed plan.
pub fn total_loss_with_plan<'t>(
    decoded: &Decoded<'t>,
    gts: &[GroundTruth],
    plan: &SupervisionPlan,
    cfg: &TrainConfig,
) -> Result<(Var<'t>, LossBreakdown)> {
    let mut bd = LossBreakdown::default();
    let mut total: Option<Var<'t>> = None;
    let mut push = |v: Var<'t>| -> Result<()> {
        total = Some(match total {
            Some(t) => t.add(v)?,
            None => v,
        });
        Ok(())
    };
    for (out, lp) in decoded.layers.iter().zip(&plan.layers) {
        let aux = matching::one_to_one_loss(&lp.matching, out.logits, out.boxes, gts, cfg.weights, cfg.bg_weight)?;
        let aux_v = aux.total.item();
        push(aux.total)?;
        bd.aux += aux_v;
        let mut terms = LayerTerms {
            aux: aux_v,
            one_to_many: None,
        };
        if let Some((res, q)) = &lp.many {
            let many = assignment::one_to_many_loss_with_targets(res, q, out.logits, out.boxes, gts, cfg.weights, cfg.vfl)?;
            let v = many.total.item();
            push(many.total)?;
            bd.one_to_many += v;
            terms.one_to_many = Some(v);
        }
        bd.layers.push(terms);
    }
    if let Some(p) = decoded.patterns {
        if cfg.beta > 0.0 {
            let div = diversity_loss(p)?;
            bd.diversity_raw = div.item();
            let weighted = div.scale(cfg.beta);
            bd.diversity = weighted.item();
            push(weighted)?;
        } else {
            bd.diversity_raw = diversity_loss(p)?.item();
        }
    }
    let total = total.expect("at least one decoder layer");
    bd.total = total.item();
    Ok((total, bd))
}

/// Plans supervision from `decoded` and evaluates the objective.
pub fn total_loss<'t>(decoded: &Decoded<'t>, gts: &[GroundTruth], cfg: &TrainConfig) -> Result<(Var<'t>, LossBreakdown, SupervisionPlan)> {
    let plan = plan_supervision(&decoded.layers, gts, cfg)?;
    let (v, bd) = total_loss_with_plan(decoded, gts, &plan, cfg)?;
    Ok((v, bd, plan))
}

//! One-to-one bipartite matching between predictions and ground truths.
//!
//! The matching cost of prediction `i` against ground truth `j` is
//! `λ_cls · (-p_i[c_j]) + λ_l1 · L1(b_i, g_j) + λ_giou · (1 - GIoU(b_i, g_j))`.
//! The cost uses the negated class probability, while [`one_to_one_loss`]
//! uses cross-entropy; both follow DETR practice.
//!
//! [`hungarian`] returns a minimum-cost matching; among equal-cost optima
//! it returns the one whose pair list, sorted by prediction index, is
//! lexicographically smallest. [`brute_force_match`] enumerates every
//! injection and applies the same rule, so the two agree exactly.

use serde::{Deserialize, Serialize};

use crate::diffcore::Var;
use crate::error::{Error, Result};
use crate::geometry::{self, giou, l1_box, Bbox};

/// Largest ground-truth count accepted by [`brute_force_match`].
pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Weights of the classification, L1 and GIoU terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// A prediction as seen by the matcher: a box and a class distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub bbox: Bbox,
    pub probs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: Bbox,
    pub class: usize,
}

/// Prediction × ground-truth cost table with per-term breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n_pred: usize,
    n_gt: usize,
    total: Vec<f64>,
    cls: Vec<f64>,
    l1: Vec<f64>,
    giou: Vec<f64>,
}

impl CostMatrix {
    /// A matrix with totals only; component tables are zero.
    pub fn from_totals(n_pred: usize, n_gt: usize, total: Vec<f64>) -> Result<Self> {
        if total.len() != n_pred * n_gt {
            return Err(Error::InvalidArgument(format!(
                "{} cost entries for a {n_pred}×{n_gt} matrix",
                total.len()
            )));
        }
        if total.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("cost entries must be finite".into()));
        }
        let zeros = vec![0.0; total.len()];
        Ok(Self {
            n_pred,
            n_gt,
            total,
            cls: zeros.clone(),
            l1: zeros.clone(),
            giou: zeros,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_gt = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_gt) {
            return Err(Error::InvalidArgument("ragged cost rows".into()));
        }
        Self::from_totals(rows.len(), n_gt, rows.concat())
    }

    pub fn n_pred(&self) -> usize {
        self.n_pred
    }

    pub fn n_gt(&self) -> usize {
        self.n_gt
    }

    pub fn get(&self, pred: usize, gt: usize) -> f64 {
        self.total[pred * self.n_gt + gt]
    }

    /// `(cls, l1, giou)` unweighted cost components of one cell.
    pub fn components(&self, pred: usize, gt: usize) -> (f64, f64, f64) {
        let k = pred * self.n_gt + gt;
        (self.cls[k], self.l1[k], self.giou[k])
    }

    pub fn total_cost(&self, m: &Matching) -> f64 {
        m.pairs.iter().map(|&(p, g)| self.get(p, g)).sum()
    }

    /// Cell-wise map of the totals; components are left untouched.
    pub fn map_totals(&self, f: impl Fn(usize, usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for p in 0..self.n_pred {
            for g in 0..self.n_gt {
                let k = p * self.n_gt + g;
                out.total[k] = f(p, g, self.total[k]);
            }
        }
        out
    }

    fn tol(&self) -> f64 {
        let scale = self.total.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        1e-9 * scale * (self.n_gt.max(1) as f64)
    }
}

/// Pairs `(prediction, ground truth)` sorted by prediction index.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
}

impl Matching {
    fn from_unsorted(mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Prediction matched to ground truth `gt`, if any.
    pub fn pred_for(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == gt).map(|p| p.0)
    }

    pub fn is_matched_pred(&self, pred: usize) -> bool {
        self.pairs.iter().any(|p| p.0 == pred)
    }
}

pub fn build_cost(
    preds: &[Prediction],
    gts: &[GroundTruth],
    weights: LossWeights,
) -> Result<CostMatrix> {
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    for p in preds {
        let s: f64 = p.probs.iter().sum();
        if (s - 1.0).abs() > 1e-6 || p.probs.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidProbabilities(s));
        }
    }
    for g in gts {
        let k = preds[0].probs.len();
        if g.class >= k {
            return Err(Error::ClassOutOfRange {
                class: g.class,
                num_classes: k,
            });
        }
    }
    let (n_pred, n_gt) = (preds.len(), gts.len());
    let mut m = CostMatrix::from_totals(n_pred, n_gt, vec![0.0; n_pred * n_gt])?;
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let k = i * n_gt + j;
            m.cls[k] = -p.probs[g.class];
            m.l1[k] = l1_box(&p.bbox, &g.bbox);
            m.giou[k] = 1.0 - giou(&p.bbox, &g.bbox);
            m.total[k] = weights.cls * m.cls[k] + weights.l1 * m.l1[k] + weights.giou * m.giou[k];
        }
    }
    Ok(m)
}

/// Shortest-augmenting-path Kuhn–Munkres on a sub-problem. Rows are ground
/// truths, columns predictions, `rows.len() ≤ cols.len()`. Returns the
/// matched `(pred, gt)` pairs and the column duals.
fn solve(c: &CostMatrix, rows: &[usize], cols: &[usize]) -> (Vec<(usize, usize)>, Vec<f64>, Vec<f64>) {
    let (n, m) = (rows.len(), cols.len());
    debug_assert!(n <= m);
    let a = |i: usize, j: usize| c.get(cols[j - 1], rows[i - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let pairs = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (cols[j - 1], rows[p[j] - 1]))
        .collect();
    (pairs, u, v)
}

/// Minimum-cost matching covering every ground truth.
pub fn hungarian(c: &CostMatrix) -> Result<Matching> {
    if c.n_pred < c.n_gt {
        return Err(Error::TooFewPredictions {
            preds: c.n_pred,
            gts: c.n_gt,
        });
    }
    if c.n_gt == 0 {
        return Ok(Matching::default());
    }
    let all_rows: Vec<usize> = (0..c.n_gt).collect();
    let all_cols: Vec<usize> = (0..c.n_pred).collect();
    let (pairs, u, v) = solve(c, &all_rows, &all_cols);
    let optimum: f64 = pairs.iter().map(|&(p, g)| c.get(p, g)).sum();
    let tol = c.tol();

    // Canonicalize among equal-cost optima. Only edges that are tight under
    // the optimal duals can appear in an optimal matching, so re-solves are
    // needed only on genuine ties.
    let tight = |p: usize, g: usize| c.get(p, g) - u[g + 1] - v[p + 1] <= tol;
    let mut current = pairs;
    let mut fixed: Vec<(usize, usize)> = Vec::new();
    let mut used_gt = vec![false; c.n_gt];
    for pred in 0..c.n_pred {
        if fixed.len() == c.n_gt {
            break;
        }
        let cur_gt = current.iter().find(|q| q.0 == pred).map(|q| q.1);
        let upper = cur_gt.unwrap_or(c.n_gt);
        let mut chosen = cur_gt;
        for gt in (0..upper).filter(|&g| !used_gt[g] && tight(pred, g)) {
            if let Some(sol) = forced_completion(c, &fixed, pred, gt, optimum, tol) {
                current = sol;
                chosen = Some(gt);
                break;
            }
        }
        if let Some(gt) = chosen {
            fixed.push((pred, gt));
            used_gt[gt] = true;
        }
    }
    Ok(Matching::from_unsorted(current))
}

/// Optimal completion of `fixed ∪ {(pred, gt)}` over predictions after
/// `pred`, if it reaches `optimum` within `tol`.
fn forced_completion(
    c: &CostMatrix,
    fixed: &[(usize, usize)],
    pred: usize,
    gt: usize,
    optimum: f64,
    tol: f64,
) -> Option<Vec<(usize, usize)>> {
    let mut pairs: Vec<(usize, usize)> = fixed.to_vec();
    pairs.push((pred, gt));
    let rows: Vec<usize> = (0..c.n_gt)
        .filter(|g| !pairs.iter().any(|p| p.1 == *g))
        .collect();
    let cols: Vec<usize> = (pred + 1..c.n_pred).collect();
    if rows.len() > cols.len() {
        return None;
    }
    if !rows.is_empty() {
        pairs.extend(solve(c, &rows, &cols).0);
    }
    let total: f64 = pairs.iter().map(|&(p, g)| c.get(p, g)).sum();
    (total <= optimum + tol).then_some(pairs)
}

/// Exhaustive search over all injections of ground truths into predictions.
pub fn brute_force_match(c: &CostMatrix) -> Result<Matching> {
    if c.n_gt > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(c.n_gt));
    }
    if c.n_pred < c.n_gt {
        return Err(Error::TooFewPredictions {
            preds: c.n_pred,
            gts: c.n_gt,
        });
    }
    let tol = c.tol();
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    let mut assign = vec![usize::MAX; c.n_gt];
    let mut taken = vec![false; c.n_pred];
    enumerate(c, 0, 0.0, &mut assign, &mut taken, &mut |cost, assign| {
        let cand = Matching::from_unsorted(assign.iter().enumerate().map(|(g, &p)| (p, g)).collect());
        let better = match &best {
            None => true,
            Some((b, pairs)) => cost < b - tol || (cost <= b + tol && cand.pairs < *pairs),
        };
        if better {
            best = Some((cost, cand.pairs));
        }
    });
    Ok(Matching {
        pairs: best.map(|b| b.1).unwrap_or_default(),
    })
}

fn enumerate(
    c: &CostMatrix,
    gt: usize,
    acc: f64,
    assign: &mut [usize],
    taken: &mut [bool],
    visit: &mut impl FnMut(f64, &[usize]),
) {
    if gt == c.n_gt {
        visit(acc, assign);
        return;
    }
    for p in 0..c.n_pred {
        if taken[p] {
            continue;
        }
        taken[p] = true;
        assign[gt] = p;
        enumerate(c, gt + 1, acc + c.get(p, gt), assign, taken, visit);
        taken[p] = false;
    }
}

/// Weighted one-to-one loss terms; `total` is the differentiable sum.
#[derive(Clone, Copy, Debug)]
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

/// Hungarian-supervised set loss.
///
/// `logits` is `n × K` with the background class at index `K - 1`; `boxes`
/// is `n × 4` in centre-size form. Matched predictions receive
/// `λ_cls · CE + λ_l1 · L1 + λ_giou · (1 - GIoU)`; unmatched ones receive
/// background cross-entropy scaled by `λ_cls · bg_weight`.
pub fn one_to_one_loss<'t>(
    matching: &Matching,
    logits: Var<'t>,
    boxes: Var<'t>,
    gts: &[GroundTruth],
    weights: LossWeights,
    bg_weight: f64,
) -> Result<LossParts<'t>> {
    let shape = logits.shape();
    let (n, k) = (shape[0], shape[1]);
    let bg = k - 1;
    let logp = logits.log_softmax_rows();

    let mut positions = Vec::with_capacity(n);
    let mut coeffs = Vec::with_capacity(n);
    for i in 0..n {
        match matching.pairs.iter().find(|p| p.0 == i) {
            Some(&(_, g)) => {
                positions.push((i, gts[g].class));
                coeffs.push(-weights.cls);
            }
            None => {
                positions.push((i, bg));
                coeffs.push(-weights.cls * bg_weight);
            }
        }
    }
    let cls = logp.pick(&positions)?.mul_const(&coeffs)?.sum_all();
    let mut total = cls;
    let (mut l1_v, mut giou_v) = (0.0, 0.0);
    if !matching.is_empty() {
        let idx: Vec<usize> = matching.pairs.iter().map(|p| p.0).collect();
        let targets: Vec<Bbox> = matching.pairs.iter().map(|p| gts[p.1].bbox).collect();
        let matched = boxes.gather_rows(&idx)?;
        let l1 = geometry::l1_loss(matched, &targets)?.sum_all().scale(weights.l1);
        let gi = geometry::giou_loss(matched, &targets)?.sum_all().scale(weights.giou);
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

//! Query-utilization inequality, activation statistics and detection AP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Bbox};
use crate::matching::GroundTruth;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Gini coefficient of nonnegative values:
/// `Σ_i (2i - n - 1)·x_(i) / (n·Σx)` over ascending values, `i` from 1.
pub fn gini(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("gini input"));
    }
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument(
            "gini input must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = values.iter().sum();
    if total == 0.0 {
        return Err(Error::AllZero);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i + 1) as f64 - n - 1.0) * x)
        .sum();
    Ok(weighted / (n * total))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Bbox,
    pub score: f64,
    pub class: usize,
}

/// All-point interpolated AP of one detection set, class-agnostic.
///
/// Detections are visited by descending score (ties: scene, then input
/// order) and greedily matched to the unmatched ground truth of their scene
/// with the highest IoU, if that IoU reaches `threshold`.
pub fn average_precision(detections: &[Vec<Detection>], gts: &[Vec<Bbox>], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold {threshold} outside (0, 1)"
        )));
    }
    if detections.len() != gts.len() {
        return Err(Error::InvalidArgument(
            "detections and ground truths cover different scene counts".into(),
        ));
    }
    let npos: usize = gts.iter().map(Vec::len).sum();
    if npos == 0 {
        return Err(Error::NoGroundTruths);
    }
    let mut order: Vec<(usize, usize)> = detections
        .iter()
        .enumerate()
        .flat_map(|(s, d)| (0..d.len()).map(move |i| (s, i)))
        .collect();
    order.sort_by(|a, b| {
        detections[b.0][b.1]
            .score
            .total_cmp(&detections[a.0][a.1].score)
            .then(a.cmp(b))
    });

    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (rank, &(s, i)) in order.iter().enumerate() {
        let det = &detections[s][i];
        let best = gts[s]
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[s][*j])
            .map(|(j, g)| (j, iou(&det.bbox, g)))
            .filter(|&(_, v)| v >= threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((j, _)) = best {
            taken[s][j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / npos as f64);
    }
    // precision envelope, right to left
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap)
}

/// Mean AP over classes with at least one ground truth and over the given
/// IoU thresholds.
pub fn mean_average_precision(
    detections: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    num_classes: usize,
    thresholds: &[f64],
) -> Result<f64> {
    if gts.iter().all(Vec::is_empty) {
        return Err(Error::NoGroundTruths);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for class in 0..num_classes {
        let class_gts: Vec<Vec<Bbox>> = gts
            .iter()
            .map(|g| g.iter().filter(|g| g.class == class).map(|g| g.bbox).collect())
            .collect();
        if class_gts.iter().all(Vec::is_empty) {
            continue;
        }
        let class_dets: Vec<Vec<Detection>> = detections
            .iter()
            .map(|d| d.iter().filter(|d| d.class == class).copied().collect())
            .collect();
        for &t in thresholds {
            sum += average_precision(&class_dets, &class_gts, t)?;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Query and pattern utilization over an evaluation pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationCounts {
    /// Final-layer one-to-one match events per query.
    pub query_counts: Vec<usize>,
    /// Column sums of the mixing weights over confident, well-localized
    /// detections; empty for static queries.
    pub pattern_mass: Vec<f64>,
    pub total_matches: usize,
    /// Number of detections contributing to `pattern_mass`.
    pub confident_detections: usize,
}

impl ActivationCounts {
    pub fn new(n_queries: usize, n_patterns: usize) -> Self {
        Self {
            query_counts: vec![0; n_queries],
            pattern_mass: vec![0.0; n_patterns],
            ..Self::default()
        }
    }

    pub fn record_match(&mut self, query: usize) {
        self.query_counts[query] += 1;
        self.total_matches += 1;
    }

    pub fn record_pattern_row(&mut self, row: &[f64]) {
        self.pattern_mass
            .iter_mut()
            .zip(row)
            .for_each(|(m, w)| *m += w);
        self.confident_detections += 1;
    }

    pub fn query_gini(&self) -> Result<f64> {
        let v: Vec<f64> = self.query_counts.iter().map(|&c| c as f64).collect();
        gini(&v)
    }

    /// Query counts sorted in non-increasing order.
    pub fn sorted_histogram(&self) -> Vec<usize> {
        let mut h = self.query_counts.clone();
        h.sort_unstable_by(|a, b| b.cmp(a));
        h
    }

    pub fn merge(&mut self, other: &ActivationCounts) {
        self.query_counts
            .iter_mut()
            .zip(&other.query_counts)
            .for_each(|(a, b)| *a += b);
        self.pattern_mass
            .iter_mut()
            .zip(&other.pattern_mass)
            .for_each(|(a, b)| *a += b);
        self.total_matches += other.total_matches;
        self.confident_detections += other.confident_detections;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> Bbox {
        Bbox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[3.0, 3.0, 3.0]).unwrap(), 0.0);
        assert!((gini(&[0.0, 0.0, 0.0, 8.0]).unwrap() - 0.75).abs() < 1e-15);
        let c = [1.0, 4.0, 0.0, 2.0, 9.0];
        let doubled: Vec<f64> = c.iter().map(|v| v * 2.0).collect();
        assert!((gini(&c).unwrap() - gini(&doubled).unwrap()).abs() < 1e-15);
        assert!(matches!(gini(&[0.0, 0.0]), Err(Error::AllZero)));
        assert!(gini(&[]).is_err());
        assert!(gini(&[1.0, -1.0]).is_err());
    }

    proptest! {
        #[test]
        fn gini_invariances(mut v in prop::collection::vec(0.0f64..100.0, 2..20), shift in 0.1f64..10.0) {
            prop_assume!(v.iter().sum::<f64>() > 0.0);
            let g = gini(&v).unwrap();
            prop_assert!((0.0..1.0).contains(&g));
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let unequal = v.iter().any(|x| (x - v[0]).abs() > 1e-9);
            if unequal {
                prop_assert!(gini(&shifted).unwrap() < g);
            }
            v.reverse();
            prop_assert!((gini(&v).unwrap() - g).abs() < 1e-12);
        }
    }

    #[test]
    fn ap_perfect_and_empty() {
        let gts = vec![vec![bx(0.3, 0.3, 0.2, 0.2), bx(0.7, 0.7, 0.2, 0.1)]];
        let dets = vec![gts[0]
            .iter()
            .map(|&b| Detection { bbox: b, score: 1.0, class: 0 })
            .collect()];
        assert_eq!(average_precision(&dets, &gts, 0.5).unwrap(), 1.0);
        assert_eq!(average_precision(&[vec![]], &gts, 0.5).unwrap(), 0.0);
        assert!(matches!(
            average_precision(&[vec![]], &[vec![]], 0.5),
            Err(Error::NoGroundTruths)
        ));
        assert!(average_precision(&dets, &gts, 1.0).is_err());
    }

    /// Precision/recall tabulated at every cutoff by re-matching the prefix
    /// from scratch, then integrated with the interpolated envelope.
    fn tabulated_ap(dets: &[Detection], gts: &[Bbox], thr: f64) -> f64 {
        let mut sorted = dets.to_vec();
        sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut points = Vec::new();
        for cut in 1..=sorted.len() {
            let mut used = vec![false; gts.len()];
            let mut tp = 0;
            for d in &sorted[..cut] {
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in gts.iter().enumerate() {
                    let v = iou(&d.bbox, g);
                    if !used[j] && v >= thr && best.map_or(true, |b| v > b.1) {
                        best = Some((j, v));
                    }
                }
                if let Some((j, _)) = best {
                    used[j] = true;
                    tp += 1;
                }
            }
            points.push((tp as f64 / gts.len() as f64, tp as f64 / cut as f64));
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for &(r, _) in &points {
            if r > prev {
                let p = points
                    .iter()
                    .filter(|q| q.0 >= r)
                    .map(|q| q.1)
                    .fold(0.0, f64::max);
                ap += (r - prev) * p;
                prev = r;
            }
        }
        ap
    }

    #[test]
    fn ap_hand_case_matches_tabulation() {
        let gts = vec![bx(0.3, 0.3, 0.2, 0.2), bx(0.7, 0.7, 0.2, 0.2)];
        let dets = vec![
            Detection { bbox: bx(0.3, 0.3, 0.2, 0.2), score: 0.9, class: 0 },
            Detection { bbox: bx(0.5, 0.5, 0.2, 0.2), score: 0.8, class: 0 },
            Detection { bbox: bx(0.71, 0.7, 0.2, 0.2), score: 0.6, class: 0 },
        ];
        // TP, FP, TP: precision 1, 1/2, 2/3; recall 1/2, 1/2, 1
        // envelope: 1 at recall 1/2, 2/3 at recall 1 → 1/2 + 1/3
        let ap = average_precision(&[dets.clone()], &[gts.clone()], 0.5).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert!((ap - tabulated_ap(&dets, &gts, 0.5)).abs() < 1e-15);
    }

    #[test]
    fn map_skips_absent_classes() {
        let gts = vec![vec![GroundTruth { bbox: bx(0.3, 0.3, 0.2, 0.2), class: 1 }]];
        let dets = vec![vec![Detection { bbox: bx(0.3, 0.3, 0.2, 0.2), score: 0.7, class: 1 }]];
        assert_eq!(mean_average_precision(&dets, &gts, 3, &coco_thresholds()).unwrap(), 1.0);
        assert!(mean_average_precision(&dets, &[vec![]], 3, &coco_thresholds()).is_err());
    }

    fn arb_scene() -> impl Strategy<Value = (Vec<Detection>, Vec<Bbox>)> {
        let b = (0.15f64..0.85, 0.15f64..0.85, 0.05f64..0.3, 0.05f64..0.3);
        (
            prop::collection::vec((b.clone(), 0.0f64..1.0), 0..8),
            prop::collection::vec(b, 1..5),
        )
            .prop_map(|(d, g)| {
                (
                    d.into_iter()
                        .map(|((cx, cy, w, h), s)| Detection { bbox: bx(cx, cy, w, h), score: s, class: 0 })
                        .collect(),
                    g.into_iter().map(|(cx, cy, w, h)| bx(cx, cy, w, h)).collect(),
                )
            })
    }

    proptest! {
        #[test]
        fn ap_matches_tabulation_and_is_monotone((dets, gts) in arb_scene()) {
            let mut last = f64::INFINITY;
            for t in coco_thresholds() {
                let ap = average_precision(&[dets.clone()], &[gts.clone()], t).unwrap();
                prop_assert!((0.0..=1.0).contains(&ap));
                prop_assert!((ap - tabulated_ap(&dets, &gts, t)).abs() < 1e-12);
                prop_assert!(ap <= last + 1e-12);
                last = ap;
            }
        }
    }

    #[test]
    fn histogram_is_non_increasing() {
        let mut a = ActivationCounts::new(5, 2);
        for q in [3, 3, 1, 4, 3, 1] {
            a.record_match(q);
        }
        assert_eq!(a.sorted_histogram(), vec![3, 2, 1, 0, 0]);
        assert_eq!(a.total_matches, 6);
        a.record_pattern_row(&[0.25, 0.75]);
        assert_eq!(a.pattern_mass.iter().sum::<f64>(), 1.0);
    }
}

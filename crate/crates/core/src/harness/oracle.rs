//! Randomized sweeps of the combinatorial kernels against independent
//! oracles.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assignment::{select_positives, QualityScoreTable};
use crate::error::Result;
use crate::matching::{brute_force_match, hungarian, CostMatrix};

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub name: &'static str,
    pub checked: usize,
    pub mismatches: usize,
    /// First few failing instances, human readable.
    pub examples: Vec<String>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl OracleReport {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checked: 0,
            mismatches: 0,
            examples: Vec::new(),
            elapsed: Duration::ZERO,
        }
    }

    fn fail(&mut self, what: String) {
        self.mismatches += 1;
        if self.examples.len() < 5 {
            self.examples.push(what);
        }
    }

    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

/// Hungarian vs. exhaustive enumeration on `instances` random matrices
/// with `n_gt ≤ 7` and `n_gt ≤ n_pred ≤ 10`. Integer-valued instances are
/// mixed in to exercise ties.
pub fn hungarian_sweep(instances: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = OracleReport::new("hungarian");
    let start = Instant::now();
    for i in 0..instances {
        let n_gt = rng.gen_range(1..=7);
        let n_pred = rng.gen_range(n_gt..=10);
        let ints = i % 4 == 3;
        let costs: Vec<f64> = (0..n_pred * n_gt)
            .map(|_| if ints { rng.gen_range(0..4) as f64 } else { rng.gen_range(-1.0..3.0) })
            .collect();
        let c = CostMatrix::from_totals(n_pred, n_gt, costs)?;
        let fast = hungarian(&c)?;
        let slow = brute_force_match(&c)?;
        let (a, b) = (c.total_cost(&fast), c.total_cost(&slow));
        rep.checked += 1;
        if fast.len() != n_gt || (a - b).abs() > 1e-9 * (1.0 + b.abs()) {
            rep.fail(format!("instance {i} ({n_pred}×{n_gt}): hungarian {a} vs brute force {b}"));
        }
    }
    rep.elapsed = start.elapsed();
    Ok(rep)
}

/// Top-`k` of one column by repeated selection of the best remaining
/// entry (highest score, then lowest index).
pub fn top_k_by_selection(scores: &[f64], k: usize) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::with_capacity(k);
    while out.len() < k && !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            if scores[left[j]] > scores[left[best]] {
                best = j;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// `select_positives` vs. [`top_k_by_selection`] on `instances` random
/// tables. Scores are drawn from a coarse grid so ties are frequent.
pub fn select_positives_sweep(instances: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = OracleReport::new("select_positives");
    let start = Instant::now();
    for i in 0..instances {
        let n_pred = rng.gen_range(1..=12);
        let n_gt = rng.gen_range(1..=5);
        let scores: Vec<f64> = (0..n_pred * n_gt)
            .map(|_| f64::from(rng.gen_range(-8..=20_i32)) / 20.0)
            .collect();
        let table = QualityScoreTable::from_scores(n_pred, n_gt, 0.4, scores)?;
        let ks: Vec<usize> = (0..n_gt).map(|_| rng.gen_range(0..=n_pred)).collect();
        let got = select_positives(&table, &ks)?;
        rep.checked += 1;
        for (g, pos) in got.per_gt.iter().enumerate() {
            let want = top_k_by_selection(&table.column(g), ks[g]);
            if pos.preds != want || pos.k != ks[g] {
                rep.fail(format!("instance {i} column {g}: got {:?}, oracle {want:?}", pos.preds));
            }
        }
    }
    rep.elapsed = start.elapsed();
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_oracle_breaks_ties_low() {
        assert_eq!(top_k_by_selection(&[0.5, 0.9, 0.5, 0.9], 3), vec![1, 3, 0]);
        assert_eq!(top_k_by_selection(&[1.0], 4), vec![0]);
        assert!(top_k_by_selection(&[1.0, 2.0], 0).is_empty());
    }

    #[test]
    fn sweeps_pass() {
        let h = hungarian_sweep(100, 3).unwrap();
        assert_eq!(h.checked, 100);
        assert!(h.passed(), "{:?}", h.examples);
        let s = select_positives_sweep(100, 3).unwrap();
        assert!(s.passed(), "{:?}", s.examples);
    }
}

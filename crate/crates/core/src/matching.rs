//! Optimal bipartite assignment between box predictions and ground-truth
//! boxes.
//!
//! The cost of pairing prediction i with target k mirrors the training
//! loss: `lambda_l1 * L1 + lambda_giou * (1 - giou) + soft cross-entropy`
//! of the predicted class distribution against the target token
//! distribution. Costs are computed from detached values; only the
//! post-match losses carry gradients.

use crate::config::ModelConfig;
use crate::geometry::{giou, BBox};
use crate::tensor::LOG_FLOOR;
use crate::{Error, Result};

/// Pairing costs, one row per detection, one column per ground truth.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    costs: Vec<f64>,
    queries: usize,
    targets: usize,
}

impl CostMatrix {
    pub fn new(costs: Vec<f64>, queries: usize, targets: usize) -> Result<Self> {
        if costs.len() != queries * targets {
            return Err(Error::Dimension(format!(
                "{} entries for a {queries}x{targets} cost matrix",
                costs.len()
            )));
        }
        if costs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numeric("cost matrix has non-finite entries".into()));
        }
        Ok(Self { costs, queries, targets })
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn targets(&self) -> usize {
        self.targets
    }

    pub fn get(&self, detection: usize, target: usize) -> f64 {
        self.costs[detection * self.targets + target]
    }
}

/// Injective assignment of every ground truth to a distinct detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(detection index, target index)` pairs, sorted by target index;
    /// exactly one pair per ground truth.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    /// Detection index matched to `target`.
    pub fn detection_for(&self, target: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(_, k)| k == target).map(|&(i, _)| i)
    }

    pub fn is_matched(&self, detection: usize) -> bool {
        self.pairs.iter().any(|&(i, _)| i == detection)
    }
}

/// Minimum-cost assignment via shortest augmenting paths over row/column
/// potentials. Requires at least as many detections as targets. Ties are
/// resolved deterministically in favor of lower detection indices (columns
/// are scanned in order with strict improvement).
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let g = cost.targets;
    let q = cost.queries;
    if g == 0 {
        return Err(Error::Contract("no targets to assign".into()));
    }
    if g > q {
        return Err(Error::Contract(format!("{g} targets exceed {q} detections")));
    }

    // Rows are targets, columns detections, both 1-indexed; index 0 is the
    // virtual start column.
    let mut u = vec![0.0f64; g + 1];
    let mut v = vec![0.0f64; q + 1];
    let mut matched_row = vec![0usize; q + 1];
    let mut way = vec![0usize; q + 1];
    for row in 1..=g {
        matched_row[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; q + 1];
        let mut used = vec![false; q + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=q {
                if used[j] {
                    continue;
                }
                let cur = cost.get(j - 1, i0 - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=q {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::with_capacity(g);
    for j in 1..=q {
        if matched_row[j] != 0 {
            pairs.push((j - 1, matched_row[j] - 1));
        }
    }
    pairs.sort_by_key(|&(_, k)| k);
    let total_cost = pairs.iter().map(|&(i, k)| cost.get(i, k)).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Soft cross-entropy of a predicted distribution against a target
/// distribution, with the usual floor inside the log.
pub fn soft_cross_entropy(predicted: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(predicted.len(), target.len());
    -target
        .iter()
        .zip(predicted)
        .filter(|&(&t, _)| t > 0.0)
        .map(|(&t, &p)| t * p.max(LOG_FLOOR).ln())
        .sum::<f64>()
}

/// Build the pairing costs from detached predictions and targets.
/// `target_class_dists[k]` is the soft label over `max_text_len + 1`
/// classes for ground truth k.
pub fn build_cost(
    pred_boxes: &[BBox],
    pred_probs: &[Vec<f64>],
    target_boxes: &[BBox],
    target_class_dists: &[Vec<f64>],
    cfg: &ModelConfig,
) -> Result<CostMatrix> {
    let q = pred_boxes.len();
    let g = target_boxes.len();
    if pred_probs.len() != q || target_class_dists.len() != g {
        return Err(Error::Dimension("prediction/target arity mismatch".into()));
    }
    let mut costs = Vec::with_capacity(q * g);
    for (pb, pp) in pred_boxes.iter().zip(pred_probs) {
        for (tb, td) in target_boxes.iter().zip(target_class_dists) {
            let l1 = (pb.cx - tb.cx).abs()
                + (pb.cy - tb.cy).abs()
                + (pb.w - tb.w).abs()
                + (pb.h - tb.h).abs();
            let cost = cfg.lambda_l1 * l1
                + cfg.lambda_giou * (1.0 - giou(pb, tb))
                + soft_cross_entropy(pp, td);
            costs.push(cost);
        }
    }
    CostMatrix::new(costs, q, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injective target -> detection maps.
    pub(crate) fn brute_force_total(cost: &CostMatrix) -> f64 {
        fn recurse(cost: &CostMatrix, target: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if target == cost.targets() {
                if acc < *best {
                    *best = acc;
                }
                return;
            }
            for det in 0..cost.queries() {
                if !used[det] {
                    used[det] = true;
                    recurse(cost, target + 1, used, acc + cost.get(det, target), best);
                    used[det] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        recurse(cost, 0, &mut vec![false; cost.queries()], 0.0, &mut best);
        best
    }

    fn random_cost(rng: &mut ChaCha8Rng, q: usize, g: usize) -> CostMatrix {
        let costs: Vec<f64> = (0..q * g).map(|_| rng.random_range(-5.0..5.0)).collect();
        CostMatrix::new(costs, q, g).unwrap()
    }

    #[test]
    fn single_target_is_column_argmin() {
        let cost = CostMatrix::new(vec![3.0, 1.0, 2.0, 1.0], 4, 1).unwrap();
        let a = hungarian(&cost).unwrap();
        // Ties break toward the lowest detection index.
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(a.total_cost, 1.0);
        assert_eq!(a.detection_for(0), Some(1));
        assert!(a.is_matched(1) && !a.is_matched(0));
    }

    #[test]
    fn permutation_cost_recovers_the_permutation() {
        // Zero on the permutation (2, 0, 1), one elsewhere.
        let perm = [2usize, 0, 1];
        let mut costs = vec![1.0; 9];
        for (det, &gt) in perm.iter().enumerate() {
            costs[det * 3 + gt] = 0.0;
        }
        let cost = CostMatrix::new(costs, 3, 3).unwrap();
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.total_cost, 0.0);
        for (det, gt) in a.pairs {
            assert_eq!(perm[det], gt);
        }
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..1000 {
            let cost = random_cost(&mut rng, 5, 3);
            let a = hungarian(&cost).unwrap();
            let expected = brute_force_total(&cost);
            assert!(
                (a.total_cost - expected).abs() <= 1e-12,
                "hungarian {} vs brute force {expected}",
                a.total_cost
            );
            // Injectivity on both sides.
            let mut dets: Vec<usize> = a.pairs.iter().map(|&(i, _)| i).collect();
            dets.dedup();
            assert_eq!(dets.len(), 3);
        }
    }

    #[test]
    fn shift_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        for _ in 0..100 {
            let q = rng.random_range(2..=6);
            let g = rng.random_range(1..=q);
            let cost = random_cost(&mut rng, q, g);
            let base = hungarian(&cost).unwrap();

            let shift = rng.random_range(-3.0..3.0);
            let shifted = CostMatrix::new(
                cost.costs.iter().map(|c| c + shift).collect(),
                q,
                g,
            )
            .unwrap();
            assert_eq!(hungarian(&shifted).unwrap().pairs, base.pairs);

            let scale = rng.random_range(0.1..4.0);
            let scaled = CostMatrix::new(
                cost.costs.iter().map(|c| c * scale).collect(),
                q,
                g,
            )
            .unwrap();
            assert_eq!(hungarian(&scaled).unwrap().pairs, base.pairs);
        }
    }

    #[test]
    fn contract_and_numeric_errors() {
        let cost = CostMatrix::new(vec![1.0, 2.0], 1, 2).unwrap();
        assert!(matches!(hungarian(&cost), Err(Error::Contract(_))));
        assert!(matches!(
            CostMatrix::new(vec![f64::NAN], 1, 1),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            CostMatrix::new(vec![1.0], 2, 1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn build_cost_floors_and_row_permutation() {
        let cfg = ModelConfig::tiny();
        let b = BBox::new(0.5, 0.5, 0.25, 0.25).unwrap();
        // Perfect box and a perfect (soft) class prediction: the box terms
        // vanish and the cross-entropy floors at the target entropy.
        let dist = {
            let mut d = vec![0.0; cfg.max_text_len + 1];
            d[1] = 0.5;
            d[2] = 0.5;
            d
        };
        let cost = build_cost(&[b], &[dist.clone()], &[b], &[dist.clone()], &cfg).unwrap();
        let entropy = -(0.5f64.ln() * 0.5 + 0.5f64.ln() * 0.5);
        assert!((cost.get(0, 0) - entropy).abs() < 1e-12);

        // Swapping two predictions permutes the corresponding rows.
        let b2 = BBox::new(0.2, 0.3, 0.1, 0.2).unwrap();
        let d2 = {
            let mut d = vec![0.0; cfg.max_text_len + 1];
            d[0] = 1.0;
            d
        };
        let fwd = build_cost(&[b, b2], &[dist.clone(), d2.clone()], &[b], &[dist.clone()], &cfg)
            .unwrap();
        let rev = build_cost(&[b2, b], &[d2, dist.clone()], &[b], &[dist], &cfg).unwrap();
        assert_eq!(fwd.get(0, 0), rev.get(1, 0));
        assert_eq!(fwd.get(1, 0), rev.get(0, 0));
    }

    #[test]
    fn hand_computed_two_by_one_cost() {
        let cfg = ModelConfig::tiny();
        let gt = BBox::new(0.5, 0.5, 0.5, 0.5).unwrap();
        let near = BBox::new(0.45, 0.5, 0.5, 0.5).unwrap();
        let probs = vec![vec![1.0 / (cfg.max_text_len + 1) as f64; cfg.max_text_len + 1]; 2];
        let target_dist = {
            let mut d = vec![0.0; cfg.max_text_len + 1];
            d[1] = 1.0;
            d
        };
        let cost = build_cost(
            &[near, gt],
            &probs,
            &[gt],
            &[target_dist],
            &cfg,
        )
        .unwrap();
        // Row 1 is the exact box: cost = 0 + 0 + ln(K).
        let k = (cfg.max_text_len + 1) as f64;
        assert!((cost.get(1, 0) - k.ln()).abs() < 1e-12);
        // Row 0 by hand: L1 = 0.05; intersection 0.45 x 0.5, areas 0.25
        // each, union 0.275, and the hull equals the union's bounding area
        // (0.55 x 0.5), so giou = iou = 0.225 / 0.275.
        let hand_giou = 0.225 / 0.275;
        let expected = cfg.lambda_l1 * 0.05 + cfg.lambda_giou * (1.0 - hand_giou) + k.ln();
        assert!((cost.get(0, 0) - expected).abs() < 1e-12);
        assert!((giou(&near, &gt) - hand_giou).abs() < 1e-12);
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.pairs, vec![(1, 0)]);
    }
}

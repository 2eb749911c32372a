//! Evaluation metrics: balanced accuracy and the rank-statistic AUC.

use crate::error::{Error, Result};

fn check_classes(labels: &[u8]) -> Result<(usize, usize)> {
    let mut pos = 0usize;
    let mut neg = 0usize;
    for &l in labels {
        match l {
            0 => neg += 1,
            1 => pos += 1,
            other => {
                return Err(Error::Input(format!("label {other} not in {{0, 1}}")));
            }
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Input(
            "metric needs both classes present".into(),
        ));
    }
    Ok((pos, neg))
}

/// Mean of true-positive and true-negative rates; a prediction is positive
/// when `score >= threshold`.
pub fn balanced_accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let (pos, neg) = check_classes(labels)?;
    let mut tp = 0usize;
    let mut tn = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted_positive = s >= threshold;
        match (l, predicted_positive) {
            (1, true) => tp += 1,
            (0, false) => tn += 1,
            _ => {}
        }
    }
    Ok(0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64))
}

/// Confusion-matrix counts at a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
}

pub fn class_counts(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ClassCounts> {
    if scores.len() != labels.len() {
        return Err(Error::Input("score/label length mismatch".into()));
    }
    check_classes(labels)?;
    let mut c = ClassCounts {
        true_positives: 0,
        false_positives: 0,
        true_negatives: 0,
        false_negatives: 0,
    };
    for (&s, &l) in scores.iter().zip(labels) {
        match (l, s >= threshold) {
            (1, true) => c.true_positives += 1,
            (1, false) => c.false_negatives += 1,
            (0, true) => c.false_positives += 1,
            (0, false) => c.true_negatives += 1,
            _ => unreachable!("labels validated"),
        }
    }
    Ok(c)
}

/// Rank-statistic AUC: the probability a random positive outscores a random
/// negative, counting ties as one half. Computed from average ranks, which
/// matches all-pairs enumeration exactly (rank sums stay dyadic rationals).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    for &s in scores {
        if s.is_nan() {
            return Err(Error::Input("NaN score".into()));
        }
    }
    let (pos, neg) = check_classes(labels)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));

    // Average ranks over tie groups, 1-based; accumulate the positive rank
    // sum.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_accuracy_all_correct_is_one() {
        let scores = [0.9, 0.8, 0.1, 0.2];
        let labels = [1, 1, 0, 0];
        assert_eq!(balanced_accuracy(&scores, &labels, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn balanced_accuracy_one_class_wrong_is_half() {
        // positives all below threshold, negatives all correct
        let scores = [0.1, 0.2, 0.3, 0.4];
        let labels = [1, 1, 0, 0];
        assert_eq!(balanced_accuracy(&scores, &labels, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn balanced_accuracy_matches_confusion_matrix_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let n = 40;
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            return; // astronomically unlikely with this seed
        }
        let got = balanced_accuracy(&scores, &labels, 0.5).unwrap();
        let c = class_counts(&scores, &labels, 0.5).unwrap();
        let tpr = c.true_positives as f64 / (c.true_positives + c.false_negatives) as f64;
        let tnr = c.true_negatives as f64 / (c.true_negatives + c.false_positives) as f64;
        assert_eq!(got, 0.5 * (tpr + tnr));
    }

    #[test]
    fn balanced_accuracy_invariant_to_duplicating_negatives() {
        let scores = [0.9, 0.4, 0.3, 0.6];
        let labels = [1, 0, 0, 1];
        let base = balanced_accuracy(&scores, &labels, 0.5).unwrap();
        let mut dup_scores = scores.to_vec();
        let mut dup_labels = labels.to_vec();
        for (&s, &l) in scores.iter().zip(&labels) {
            if l == 0 {
                dup_scores.push(s);
                dup_labels.push(l);
            }
        }
        assert_eq!(
            balanced_accuracy(&dup_scores, &dup_labels, 0.5).unwrap(),
            base
        );
    }

    #[test]
    fn metrics_reject_single_class() {
        assert!(balanced_accuracy(&[0.5, 0.6], &[1, 1], 0.5).is_err());
        assert!(auc(&[0.5, 0.6], &[0, 0]).is_err());
    }

    #[test]
    fn auc_separable_is_one_and_all_ties_is_half() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.4, 0.4, 0.4, 0.4], &[1, 0, 1, 0]).unwrap(), 0.5);
    }

    /// Pair-enumeration oracle.
    fn auc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0f64;
        let mut pairs = 0usize;
        for (&sp, &lp) in scores.iter().zip(labels) {
            if lp != 1 {
                continue;
            }
            for (&sn, &ln) in scores.iter().zip(labels) {
                if ln != 0 {
                    continue;
                }
                pairs += 1;
                if sp > sn {
                    wins += 1.0;
                } else if sp == sn {
                    wins += 0.5;
                }
            }
        }
        wins / pairs as f64
    }

    #[test]
    fn auc_matches_all_pairs_enumeration_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for trial in 0..20 {
            let n = 50;
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    // quantized scores force plenty of ties
                    (rng.random::<f64>() * 8.0).floor() / 8.0
                })
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let got = auc(&scores, &labels).unwrap();
            let want = auc_oracle(&scores, &labels);
            assert_eq!(got, want, "trial {trial}");
        }
    }

    #[test]
    fn auc_invariant_under_strictly_increasing_transform() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let scores: Vec<f64> = (0..30).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let mut labels: Vec<u8> = (0..30).map(|_| rng.random_range(0..2) as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        let base = auc(&scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp()).collect();
        assert_eq!(auc(&transformed, &labels).unwrap(), base);
    }

    #[test]
    fn auc_rejects_nan() {
        assert!(auc(&[f64::NAN, 0.5], &[1, 0]).is_err());
    }
}

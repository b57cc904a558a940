//! ROC curves and AUC for membership scores.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl RocCurve {
    /// Highest TPR reachable at a false-positive rate of at most `fpr`.
    pub fn tpr_at(&self, fpr: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.0 <= fpr + 1e-12)
            .map(|p| p.1)
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for (f, t) in &self.points {
            s.push_str(&format!("{f:.6},{t:.6}\n"));
        }
        s
    }
}

/// ROC of `scores` (higher means "member") against `labels`. Tied scores
/// move the curve diagonally, so the AUC equals the Mann-Whitney statistic
/// with ties counted as one half.
pub fn roc_from_scores(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { context: "membership score".into() });
    }
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::Invalid("ROC needs both members and non-members".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area, in units of 1/(p*n)
    let mut area2 = 0u128;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let (tp0, fp0) = (tp, fp);
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += u128::from(fp - fp0) * u128::from(tp + tp0);
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(RocCurve {
        points,
        auc: area2 as f64 / (2.0 * p as f64 * n as f64),
        positives: p,
        negatives: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut pairs) = (0u64, 0u64);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1;
                    num += if scores[i] > scores[j] { 2 } else if scores[i] == scores[j] { 1 } else { 0 };
                }
            }
        }
        num as f64 / (2 * pairs) as f64
    }

    #[test]
    fn hand_case() {
        let r = roc_from_scores(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false]).unwrap();
        assert_eq!(r.auc, 0.75);
        assert_eq!(r.tpr_at(0.0), 0.5);
        assert_eq!(r.tpr_at(0.5), 1.0);
        assert_eq!(r.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.points.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn constant_scores_give_one_half() {
        let r = roc_from_scores(&[0.3; 6], &[true, true, false, false, false, true]).unwrap();
        assert_eq!(r.auc, 0.5);
        assert_eq!(r.tpr_at(0.1), 0.0);
    }

    #[test]
    fn perfect_ranking() {
        let r = roc_from_scores(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.tpr_at(0.0), 1.0);
    }

    #[test]
    fn random_scores_near_one_half() {
        let mut rng = crate::rng::Stream::new(5);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.uniform(0.0, 1.0)).collect();
        let labels: Vec<bool> = (0..10_000).map(|_| rng.below(2) == 1).collect();
        let r = roc_from_scores(&scores, &labels).unwrap();
        assert!((r.auc - 0.5).abs() < 0.02, "{}", r.auc);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(roc_from_scores(&[0.1, 0.2], &[true, true]).is_err());
        assert!(roc_from_scores(&[0.1], &[true, false]).is_err());
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(raw in prop::collection::vec((0u8..6, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = raw.iter().map(|r| f64::from(r.0) / 5.0).collect();
            let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let r = roc_from_scores(&scores, &labels).unwrap();
            prop_assert!((r.auc - mann_whitney(&scores, &labels)).abs() < 1e-12);
            prop_assert!(r.points.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
        }
    }
}

//! Detection and model-ranking metrics plus the MSP / energy baselines.
//!
//! Score orientation everywhere: higher means more in-distribution.

use serde::{Deserialize, Serialize};

use crate::error::{NacError, Result};
use crate::netlab::{log_sum_exp, LogitBundle};

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(NacError::InvalidArgument(format!(
            "{name} scores are empty"
        )));
    }
    if let Some(i) = scores.iter().position(|v| v.is_nan()) {
        return Err(NacError::InvalidArgument(format!(
            "{name} score {i} is NaN"
        )));
    }
    Ok(())
}

/// 1-based ranks with ties replaced by their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share the mean of ranks i+1..=j+1
        let rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve via the Mann–Whitney U statistic:
/// `P(ind > ood) + ½·P(ind = ood)`.
pub fn auroc(ind: &[f64], ood: &[f64]) -> Result<f64> {
    check_scores("in-distribution", ind)?;
    check_scores("out-of-distribution", ood)?;
    let all: Vec<f64> = ind.iter().chain(ood).copied().collect();
    let ranks = average_ranks(&all);
    let n1 = ind.len() as f64;
    let n2 = ood.len() as f64;
    let rank_sum: f64 = ranks[..ind.len()].iter().sum();
    let u = rank_sum - n1 * (n1 + 1.0) / 2.0;
    Ok(u / (n1 * n2))
}

/// ROC points `(fpr, tpr)` sweeping the threshold from +∞ down, one point
/// per distinct score.
pub fn roc_curve(ind: &[f64], ood: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_scores("in-distribution", ind)?;
    check_scores("out-of-distribution", ood)?;
    let mut all: Vec<(f64, bool)> = ind
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (p, n) = (ind.len() as f64, ood.len() as f64);
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let score = all[i].0;
        while i < all.len() && all[i].0 == score {
            if all[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        curve.push((fp / n, tp / p));
    }
    Ok(curve)
}

/// Trapezoidal integral of [`roc_curve`].
pub fn auroc_trapezoid(ind: &[f64], ood: &[f64]) -> Result<f64> {
    let curve = roc_curve(ind, ood)?;
    Ok(curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FprAtTpr {
    pub fpr: f64,
    pub threshold: f64,
}

/// False-positive rate at the largest threshold `λ` that keeps at least
/// `tpr` of the in-distribution scores at or above `λ`.
pub fn fpr_at_tpr(ind: &[f64], ood: &[f64], tpr: f64) -> Result<FprAtTpr> {
    check_scores("in-distribution", ind)?;
    check_scores("out-of-distribution", ood)?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(NacError::InvalidArgument(format!(
            "target TPR must lie in (0, 1], got {tpr}"
        )));
    }
    let mut sorted = ind.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // smallest k with k/n ≥ tpr; the tolerance absorbs products like 0.95·100
    let n = sorted.len();
    let k = ((tpr * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let threshold = sorted[k - 1];
    let fp = ood.iter().filter(|&&s| s >= threshold).count();
    Ok(FprAtTpr {
        fpr: fp as f64 / ood.len() as f64,
        threshold,
    })
}

/// Pearson correlation of average ranks. Without ties this equals
/// `1 − 6Σd²/(n(n²−1))`, which is used then since it is exact in `f64` for
/// realistic `n`.
pub fn spearman_rc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(NacError::Dimension(format!(
            "spearman inputs differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(NacError::InvalidArgument(
            "rank correlation needs at least two points".into(),
        ));
    }
    check_scores("x", x)?;
    check_scores("y", y)?;
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    if all_distinct(x) && all_distinct(y) {
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
        return Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)));
    }
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(NacError::Undefined(
            "rank correlation with a constant input (zero rank variance)".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn all_distinct(v: &[f64]) -> bool {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).all(|w| w[0] != w[1])
}

/// Maximum softmax probability.
pub fn msp_score(bundle: &LogitBundle) -> f64 {
    bundle.probs().iter().copied().fold(0.0, f64::max)
}

/// `log Σ exp(logit)`, the negated free energy.
pub fn energy_score(bundle: &LogitBundle) -> f64 {
    log_sum_exp(bundle.logits())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionEval {
    pub ind_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
    pub auroc: f64,
    pub fpr95: f64,
    pub threshold_at_tpr95: f64,
}

impl DetectionEval {
    pub fn new(ind_scores: Vec<f64>, ood_scores: Vec<f64>, tpr: f64) -> Result<Self> {
        let auroc = auroc(&ind_scores, &ood_scores)?;
        let at = fpr_at_tpr(&ind_scores, &ood_scores, tpr)?;
        Ok(Self {
            ind_scores,
            ood_scores,
            auroc,
            fpr95: at.fpr,
            threshold_at_tpr95: at.threshold,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEval {
    pub criterion_values: Vec<f64>,
    pub ood_test_acc: Vec<f64>,
    /// `None` when the correlation is undefined (fewer than two
    /// checkpoints or a constant series).
    pub rc: Option<f64>,
    /// OOD accuracy of the checkpoint the criterion ranks highest.
    pub best_acc: f64,
    pub best_index: usize,
}

impl RankEval {
    pub fn new(criterion_values: Vec<f64>, ood_test_acc: Vec<f64>) -> Result<Self> {
        if criterion_values.is_empty() || criterion_values.len() != ood_test_acc.len() {
            return Err(NacError::Dimension(format!(
                "need matching non-empty series, got {} and {}",
                criterion_values.len(),
                ood_test_acc.len()
            )));
        }
        let rc = match spearman_rc(&criterion_values, &ood_test_acc) {
            Ok(rc) => Some(rc),
            Err(e) => {
                log::warn!("rank correlation unavailable: {e}");
                None
            }
        };
        let mut best_index = 0;
        for (i, v) in criterion_values.iter().enumerate() {
            if *v > criterion_values[best_index] {
                best_index = i;
            }
        }
        Ok(Self {
            best_acc: ood_test_acc[best_index],
            best_index,
            criterion_values,
            ood_test_acc,
            rc,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 2.0, 2.0], &[1.0, 2.0, 2.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.4], &[0.5, 0.1]).unwrap(), 0.75);
        assert!(auroc(&[], &[1.0]).is_err());
        assert!(auroc(&[1.0], &[]).is_err());
    }

    #[test]
    fn trapezoid_matches_rank_statistic_with_ties() {
        let ind = [0.3, 0.3, 0.7, 0.9, 0.1];
        let ood = [0.3, 0.2, 0.7, 0.05];
        let a = auroc(&ind, &ood).unwrap();
        let t = auroc_trapezoid(&ind, &ood).unwrap();
        assert!((a - t).abs() < 1e-12);
    }

    #[test]
    fn fpr_examples() {
        let ind: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let r = fpr_at_tpr(&ind, &[0.5, 5.5, 200.0], 0.95).unwrap();
        assert_eq!(r.threshold, 6.0);
        assert!((r.fpr - 1.0 / 3.0).abs() < 1e-15);

        let r = fpr_at_tpr(&[3.0, 4.0, 5.0], &[0.0, 1.0], 0.95).unwrap();
        assert_eq!(r.fpr, 0.0);

        let same = [0.1, 0.4, 0.4, 0.8, 0.9];
        assert!(fpr_at_tpr(&same, &same, 0.95).unwrap().fpr >= 0.95);

        let r = fpr_at_tpr(&[0.2, 0.9, 0.5], &[0.3], 1.0).unwrap();
        assert_eq!(r.threshold, 0.2);
        assert!(fpr_at_tpr(&[1.0], &[1.0], 0.0).is_err());
        assert!(fpr_at_tpr(&[1.0], &[1.0], 1.5).is_err());
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman_rc(&x, &x).unwrap(), 1.0);
        assert_eq!(spearman_rc(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman_rc(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(
            spearman_rc(&x, &[2.0; 4]),
            Err(NacError::Undefined(_))
        ));
        assert!(spearman_rc(&[1.0], &[1.0]).is_err());
        assert!(spearman_rc(&x, &[1.0]).is_err());
    }

    #[test]
    fn average_ranks_ties() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 10.0, 5.0]),
            vec![2.5, 4.0, 2.5, 1.0]
        );
    }

    #[test]
    fn baselines() {
        let b = LogitBundle::from_logits(vec![0.0; 10]).unwrap();
        assert!((msp_score(&b) - 0.1).abs() < 1e-15);
        let b = LogitBundle::from_logits(vec![0.0, 0.0]).unwrap();
        assert!((energy_score(&b) - 2f64.ln()).abs() < 1e-15);
        let b = LogitBundle::from_logits(vec![50.0, 0.0, 0.0]).unwrap();
        assert!(msp_score(&b) > 1.0 - 1e-12);
    }

    #[test]
    fn rank_eval_single_checkpoint() {
        let r = RankEval::new(vec![0.4], vec![0.7]).unwrap();
        assert!(r.rc.is_none());
        assert_eq!(r.best_acc, 0.7);
    }

    #[test]
    fn rank_eval_best_checkpoint() {
        let r = RankEval::new(vec![0.1, 0.9, 0.5], vec![0.6, 0.8, 0.7]).unwrap();
        assert_eq!(r.best_index, 1);
        assert_eq!(r.best_acc, 0.8);
        assert_eq!(r.rc, Some(1.0));
    }
}

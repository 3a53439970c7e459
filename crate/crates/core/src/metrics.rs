//! Ranking and calibration metrics over binary predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability clamp used by [`compute_metrics`] for the log-loss.
pub const LOGLOSS_EPS: f64 = 1e-7;

/// Area under the ROC curve via the Mann-Whitney statistic, ties sharing
/// the average rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based: the group covers ranks i+1..=j
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        pos_rank_sum += avg_rank * pos_in_group as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One emitted prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub student_idx: u32,
    pub horizon: usize,
    pub score: f64,
    pub truth: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `None` when the records hold a single class.
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub logloss: f64,
}

pub fn compute_metrics(records: &[PredictionRecord]) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no prediction records".into()));
    }
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = records.iter().map(|r| r.truth).collect();
    let auc = match auc(&scores, &labels) {
        Ok(v) => Some(v),
        Err(Error::AucUndefined) => None,
        Err(e) => return Err(e),
    };
    let n = records.len() as f64;
    let hits = records
        .iter()
        .filter(|r| u8::from(r.score >= 0.5) == r.truth)
        .count();
    let loss_sum: f64 = records
        .iter()
        .map(|r| {
            let p = r.score.clamp(LOGLOSS_EPS, 1.0 - LOGLOSS_EPS);
            if r.truth == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(Metrics {
        auc,
        accuracy: hits as f64 / n,
        logloss: loss_sum / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(score: f64, truth: u8) -> PredictionRecord {
        PredictionRecord { student_idx: 1, horizon: 5, score, truth }
    }

    #[test]
    fn perfect_separation() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn full_ties_give_half() {
        assert_eq!(auc(&[0.3; 5], &[1, 0, 0, 1, 1]).unwrap(), 0.5);
    }

    #[test]
    fn three_of_four_pairs() {
        assert_eq!(auc(&[0.2, 0.4, 0.6, 0.8], &[0, 1, 0, 1]).unwrap(), 0.75);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::AucUndefined)));
        assert!(auc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn clamped_logloss() {
        let m = compute_metrics(&[rec(1.0, 1)]).unwrap();
        assert_eq!(m.logloss, -(1.0 - 1e-7f64).ln());
        assert_eq!(m.auc, None);
    }

    #[test]
    fn exact_scores_are_fully_accurate() {
        let m = compute_metrics(&[rec(1.0, 1), rec(0.0, 0), rec(1.0, 1)]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.auc, Some(1.0));
    }

    #[test]
    fn three_records_by_hand() {
        // scores 0.8/1, 0.5/0, 0.3/1
        // accuracy: 0.8->1 ok, 0.5->1 wrong, 0.3->0 wrong => 1/3
        // logloss: (-ln 0.8 - ln 0.5 - ln 0.3)/3
        // auc: positives {0.8, 0.3} vs negative {0.5}: 1 win of 2 => 0.5
        let m = compute_metrics(&[rec(0.8, 1), rec(0.5, 0), rec(0.3, 1)]).unwrap();
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-15);
        let expected = (-(0.8f64).ln() - (0.5f64).ln() - (0.3f64).ln()) / 3.0;
        assert!((m.logloss - expected).abs() < 1e-15);
        assert_eq!(m.auc, Some(0.5));
    }

    #[test]
    fn constant_half_predictor() {
        let recs = [rec(0.5, 1), rec(0.5, 0), rec(0.5, 0)];
        let m = compute_metrics(&recs).unwrap();
        assert_eq!(m.auc, Some(0.5));
        assert!((m.logloss - std::f64::consts::LN_2).abs() < 1e-15);
    }
}

//! ROC analysis for binary scores.

use serde::{Deserialize, Serialize};

/// Why an AUC could not be computed.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AucError {
    #[error("scored set is empty")]
    Empty,
    #[error("AUC is undefined: {positives} positives and {negatives} negatives")]
    Undefined { positives: usize, negatives: usize },
    #[error("score at index {0} is not finite")]
    NonFinite(usize),
    #[error("label at index {index} is {label}, expected 0 or 1")]
    BadLabel { index: usize, label: u8 },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
}

/// Scores paired with 0/1 labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub pairs: Vec<(f64, u8)>,
}

impl ScoredSet {
    pub fn new(scores: &[f64], labels: &[u8]) -> Result<Self, AucError> {
        if scores.len() != labels.len() {
            return Err(AucError::LengthMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        let set = Self {
            pairs: scores.iter().copied().zip(labels.iter().copied()).collect(),
        };
        set.check()?;
        Ok(set)
    }

    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.1 == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.pairs.len() - self.positives()
    }

    fn check(&self) -> Result<(), AucError> {
        if self.pairs.is_empty() {
            return Err(AucError::Empty);
        }
        for (index, &(s, label)) in self.pairs.iter().enumerate() {
            if !s.is_finite() {
                return Err(AucError::NonFinite(index));
            }
            if label > 1 {
                return Err(AucError::BadLabel { index, label });
            }
        }
        let (positives, negatives) = (self.positives(), self.negatives());
        if positives == 0 || negatives == 0 {
            return Err(AucError::Undefined { positives, negatives });
        }
        Ok(())
    }

    /// Pairs sorted by descending score.
    fn sorted_desc(&self) -> Vec<(f64, u8)> {
        let mut v = self.pairs.clone();
        v.sort_by(|a, b| b.0.total_cmp(&a.0));
        v
    }
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn auc(set: &ScoredSet) -> Result<f64, AucError> {
    set.check()?;
    // Walk tie groups in descending score order, counting negatives below.
    let sorted = set.sorted_desc();
    let (p, n) = (set.positives() as u64, set.negatives() as u64);
    let mut negatives_seen = 0u64;
    let mut twice_wins = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u64, 0u64);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        let below = n - negatives_seen - gn;
        twice_wins += gp * (2 * below + gn);
        negatives_seen += gn;
        i = j;
    }
    Ok(twice_wins as f64 / (2 * p * n) as f64)
}

/// ROC points from `(0, 0)` to `(1, 1)`, one per distinct threshold.
pub fn roc_curve(set: &ScoredSet) -> Result<Vec<(f64, f64)>, AucError> {
    set.check()?;
    let sorted = set.sorted_desc();
    let (p, n) = (set.positives() as f64, set.negatives() as f64);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n, tp as f64 / p));
    }
    Ok(points)
}

/// Trapezoidal area under a polyline.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

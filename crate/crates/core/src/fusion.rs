//! Adaptive weighting layer.
//!
//! The four branch positive-class probabilities are combined as
//! `sum_i softmax(alpha)_i * p_i`, a convex combination whose weights are learned
//! together with the branches.

use serde::{Deserialize, Serialize};

/// Number of fused branches.
pub const BRANCHES: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FusionError {
    #[error("non-finite fusion input: {0}")]
    NonFinite(&'static str),
    #[error("branch probability {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
}

/// Unconstrained fusion logits. Starts at all zeros (equal weighting).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionParameters {
    pub alpha: [f64; BRANCHES],
}

impl FusionParameters {
    pub fn new(alpha: [f64; BRANCHES]) -> Result<Self, FusionError> {
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(FusionError::NonFinite("alpha"));
        }
        Ok(Self { alpha })
    }

    /// Normalized weights `softmax(alpha)`.
    pub fn weights(&self) -> [f64; BRANCHES] {
        softmax(&self.alpha)
    }
}

/// Numerically stable softmax over the four logits.
pub fn softmax(alpha: &[f64; BRANCHES]) -> [f64; BRANCHES] {
    let max = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = alpha.map(|a| (a - max).exp());
    let sum: f64 = exp.iter().sum();
    exp.map(|e| e / sum)
}

/// Positive-class probabilities of the four branches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchProbabilities {
    pub p: [f64; BRANCHES],
}

impl BranchProbabilities {
    pub fn new(p: [f64; BRANCHES]) -> Result<Self, FusionError> {
        let probs = Self { p };
        probs.validate()?;
        Ok(probs)
    }

    fn validate(&self) -> Result<(), FusionError> {
        for (index, &value) in self.p.iter().enumerate() {
            if !value.is_finite() {
                return Err(FusionError::NonFinite("branch probability"));
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(FusionError::OutOfRange { index, value });
            }
        }
        Ok(())
    }

    fn range(&self) -> (f64, f64) {
        self.p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }
}

fn check(p: &BranchProbabilities, params: &FusionParameters) -> Result<(), FusionError> {
    p.validate()?;
    if params.alpha.iter().any(|a| !a.is_finite()) {
        return Err(FusionError::NonFinite("alpha"));
    }
    Ok(())
}

fn fuse_unchecked(p: &BranchProbabilities, w: &[f64; BRANCHES]) -> f64 {
    let fused: f64 = w.iter().zip(&p.p).map(|(w, p)| w * p).sum();
    // rounding can step outside the hull by an ulp
    let (lo, hi) = p.range();
    fused.clamp(lo, hi)
}

/// Ensemble probability `sum_i softmax(alpha)_i * p_i`.
pub fn fuse(p: &BranchProbabilities, params: &FusionParameters) -> Result<f64, FusionError> {
    check(p, params)?;
    Ok(fuse_unchecked(p, &params.weights()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionGradients {
    pub alpha: [f64; BRANCHES],
    pub p: [f64; BRANCHES],
}

/// Backward pass of [`fuse`] for an upstream derivative `d loss / d fused`.
///
/// `d fused / d p_i = w_i` and `d fused / d alpha_j = w_j (p_j - fused)`.
pub fn fuse_gradients(
    p: &BranchProbabilities,
    params: &FusionParameters,
    upstream: f64,
) -> Result<FusionGradients, FusionError> {
    check(p, params)?;
    if !upstream.is_finite() {
        return Err(FusionError::NonFinite("upstream gradient"));
    }
    let w = params.weights();
    let fused: f64 = w.iter().zip(&p.p).map(|(w, p)| w * p).sum();
    let mut alpha = [0.0; BRANCHES];
    let mut grad_p = [0.0; BRANCHES];
    for j in 0..BRANCHES {
        grad_p[j] = upstream * w[j];
        alpha[j] = upstream * w[j] * (p.p[j] - fused);
    }
    Ok(FusionGradients { alpha, p: grad_p })
}

/// Adds `c` to every logit; the normalized weights are unchanged.
pub fn shift_alpha(params: &FusionParameters, c: f64) -> FusionParameters {
    FusionParameters {
        alpha: params.alpha.map(|a| a + c),
    }
}

/// Shifts the logits to zero mean, the canonical form stored for comparison.
pub fn canonicalize(params: &FusionParameters) -> FusionParameters {
    let mean = params.alpha.iter().sum::<f64>() / BRANCHES as f64;
    shift_alpha(params, -mean)
}

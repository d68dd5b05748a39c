//! The four-branch ensemble, its loss and one optimization step.

use std::ops::Range;

use rayon::prelude::*;

use crate::backbone::{Backbone, FineTuneStage, HEAD_OUTPUTS};
use crate::fusion::{fuse, fuse_gradients, BranchProbabilities, FusionError, FusionParameters, BRANCHES};

use super::data::BranchInputs;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Four branches and the fusion layer of one binary task.
#[derive(Debug, Clone, PartialEq)]
pub struct MldeModel {
    pub branches: Vec<Backbone>,
    pub fusion: FusionParameters,
}

/// Branch probabilities and the fused probability for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub branches: BranchProbabilities,
    pub fused: f64,
}

/// Positive-class probability of a 2-way softmax head.
pub fn positive_probability(logits: [f64; HEAD_OUTPUTS]) -> f64 {
    1.0 / (1.0 + (logits[0] - logits[1]).exp())
}

/// Binary cross-entropy of a fused probability against a 0/1 label.
pub fn bce(prob: f64, label: u8) -> f64 {
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `d bce / d prob`; zero where the clamp is active.
pub fn bce_grad(prob: f64, label: u8) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&prob) {
        return 0.0;
    }
    if label == 1 {
        -1.0 / prob
    } else {
        1.0 / (1.0 - prob)
    }
}

/// Loss gradients for every branch parameter and the fusion logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub branches: Vec<Vec<f64>>,
    pub alpha: [f64; BRANCHES],
}

impl Gradients {
    pub fn zeros_for(model: &MldeModel) -> Self {
        Self {
            branches: model.branches.iter().map(|b| b.store().zeros_like()).collect(),
            alpha: [0.0; BRANCHES],
        }
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.branches.iter_mut().zip(&other.branches) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.alpha.iter_mut().zip(&other.alpha).for_each(|(x, y)| *x += y);
    }

    fn scale(&mut self, s: f64) {
        self.branches.iter_mut().flatten().for_each(|g| *g *= s);
        self.alpha.iter_mut().for_each(|g| *g *= s);
    }
}

/// What a loss evaluation trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// BCE on the fused probability; gradients reach branches and fusion.
    Joint,
    /// Sum of per-branch BCE losses; the fusion logits get no gradient.
    Branchwise,
}

impl MldeModel {
    pub fn new(branches: Vec<Backbone>, fusion: FusionParameters) -> Self {
        assert_eq!(branches.len(), BRANCHES, "an ensemble has exactly {BRANCHES} branches");
        Self { branches, fusion }
    }

    pub fn predict(&self, inputs: &BranchInputs) -> Result<Prediction, FusionError> {
        let mut p = [0.0; BRANCHES];
        for (k, (branch, x)) in self.branches.iter().zip(&inputs.levels).enumerate() {
            p[k] = positive_probability(branch.forward(x.clone()));
        }
        let branches = BranchProbabilities::new(p)?;
        let fused = fuse(&branches, &self.fusion)?;
        Ok(Prediction { branches, fused })
    }

    /// Loss of one sample and its gradient, accumulated into `grads`.
    fn sample_loss(
        &self,
        inputs: &BranchInputs,
        label: u8,
        first_group: usize,
        objective: Objective,
        grads: &mut Gradients,
    ) -> Result<f64, FusionError> {
        let mut p = [0.0; BRANCHES];
        let mut tapes = Vec::with_capacity(BRANCHES);
        for (k, (branch, x)) in self.branches.iter().zip(&inputs.levels).enumerate() {
            let (logits, tape) = branch.forward_train(x.clone(), first_group);
            p[k] = positive_probability(logits);
            tapes.push(tape);
        }
        let probs = BranchProbabilities::new(p)?;
        let (loss, dp) = match objective {
            Objective::Joint => {
                let fused = fuse(&probs, &self.fusion)?;
                let g = fuse_gradients(&probs, &self.fusion, bce_grad(fused, label))?;
                grads.alpha.iter_mut().zip(&g.alpha).for_each(|(a, b)| *a += b);
                (bce(fused, label), g.p)
            }
            Objective::Branchwise => {
                let loss = p.iter().map(|&pk| bce(pk, label)).sum();
                (loss, p.map(|pk| bce_grad(pk, label)))
            }
        };
        for (k, tape) in tapes.iter().enumerate() {
            // d p / d z1 = p (1 - p) = -d p / d z0
            let s = dp[k] * p[k] * (1.0 - p[k]);
            self.branches[k].backward(tape, [-s, s], &mut grads.branches[k]);
        }
        Ok(loss)
    }

    /// Mean batch loss and its gradient. Backpropagation stops at the first
    /// group unfrozen by `stage`. Samples are split into `chunks` contiguous
    /// runs processed in parallel and reduced in order, so the result only
    /// depends on the chunk count.
    pub fn loss_and_gradients(
        &self,
        batch: &[(BranchInputs, u8)],
        stage: &FineTuneStage,
        objective: Objective,
        chunks: usize,
    ) -> Result<(f64, Gradients), FusionError> {
        assert!(!batch.is_empty(), "empty batch");
        let first_group = self.branches[0].first_trainable_group(stage);
        let chunk_len = batch.len().div_ceil(chunks.max(1));
        let partials: Vec<Result<(f64, Gradients), FusionError>> = batch
            .par_chunks(chunk_len)
            .map(|chunk| {
                let mut grads = Gradients::zeros_for(self);
                let mut loss = 0.0;
                for (inputs, label) in chunk {
                    loss += self.sample_loss(inputs, *label, first_group, objective, &mut grads)?;
                }
                Ok((loss, grads))
            })
            .collect();
        let mut total = Gradients::zeros_for(self);
        let mut loss = 0.0;
        for part in partials {
            let (l, g) = part?;
            loss += l;
            total.add(&g);
        }
        let n = batch.len() as f64;
        total.scale(1.0 / n);
        Ok((loss / n, total))
    }

    /// Mean batch loss without gradients.
    pub fn batch_loss(&self, batch: &[(BranchInputs, u8)]) -> Result<f64, FusionError> {
        let mut loss = 0.0;
        for (inputs, label) in batch {
            loss += bce(self.predict(inputs)?.fused, *label);
        }
        Ok(loss / batch.len() as f64)
    }
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v = momentum * v + g; theta -= lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub fusion_learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
    alpha_velocity: [f64; BRANCHES],
}

impl Sgd {
    pub fn new(model: &MldeModel, learning_rate: f64, fusion_learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            fusion_learning_rate,
            momentum,
            velocity: model.branches.iter().map(|b| b.store().zeros_like()).collect(),
            alpha_velocity: [0.0; BRANCHES],
        }
    }

    /// Applies `grads` to the parameters inside `ranges` (per branch) and, when
    /// `update_alpha` is set, to the fusion logits. Nothing else is touched.
    pub fn apply(
        &mut self,
        model: &mut MldeModel,
        grads: &Gradients,
        ranges: &[Vec<Range<usize>>],
        update_alpha: bool,
    ) {
        for (k, branch) in model.branches.iter_mut().enumerate() {
            let values = branch.store_mut().values_mut();
            let vel = &mut self.velocity[k];
            let g = &grads.branches[k];
            for r in &ranges[k] {
                for i in r.clone() {
                    vel[i] = self.momentum * vel[i] + g[i];
                    values[i] -= self.learning_rate * vel[i];
                }
            }
        }
        if update_alpha {
            for j in 0..BRANCHES {
                self.alpha_velocity[j] = self.momentum * self.alpha_velocity[j] + grads.alpha[j];
                model.fusion.alpha[j] -= self.fusion_learning_rate * self.alpha_velocity[j];
            }
        }
    }
}

/// Outcome of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Batch loss before the update.
    pub loss: f64,
    pub alpha_grad: [f64; BRANCHES],
}

#[derive(Debug, thiserror::Error)]
pub enum StepError {
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

/// One optimization step on a batch: only groups unfrozen by `stage` (and the
/// fusion logits, under the joint objective) change.
pub fn step(
    model: &mut MldeModel,
    batch: &[(BranchInputs, u8)],
    optimizer: &mut Sgd,
    stage: &FineTuneStage,
    objective: Objective,
    chunks: usize,
) -> Result<StepReport, StepError> {
    let (loss, grads) = model.loss_and_gradients(batch, stage, objective, chunks)?;
    if !loss.is_finite() {
        return Err(StepError::NonFiniteLoss(loss));
    }
    let ranges: Vec<_> = model.branches.iter().map(|b| b.trainable_ranges(stage)).collect();
    optimizer.apply(model, &grads, &ranges, objective == Objective::Joint);
    Ok(StepReport {
        loss,
        alpha_grad: grads.alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_has_zero_loss() {
        assert!(bce(1.0, 1) <= 1e-6);
        assert!(bce(0.0, 0) <= 1e-6);
    }

    #[test]
    fn coin_flip_loss_is_ln2() {
        assert!((bce(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce(0.5, 0) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_grad_matches_finite_differences() {
        for &p in &[0.1, 0.3, 0.77] {
            for y in [0, 1] {
                let h = 1e-6;
                let fd = (bce(p + h, y) - bce(p - h, y)) / (2.0 * h);
                assert!((fd - bce_grad(p, y)).abs() < 1e-6);
            }
        }
        assert_eq!(bce_grad(0.0, 1), 0.0);
    }

    #[test]
    fn softmax_positive_probability() {
        assert_eq!(positive_probability([0.0, 0.0]), 0.5);
        let p = positive_probability([0.3, 1.1]);
        let e = (1.1f64).exp() / ((0.3f64).exp() + (1.1f64).exp());
        assert!((p - e).abs() < 1e-15);
    }
}

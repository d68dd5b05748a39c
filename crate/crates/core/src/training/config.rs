use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, BackboneKind, XavierVariant};
use crate::fusion::BRANCHES;
use crate::imaging::{validate_scales, DEFAULT_SCALES, IMAGENET_MEAN, IMAGENET_STD};

use super::data::Preprocess;

/// Hyperparameters of one binary ensemble. The loss is always binary
/// cross-entropy on the fused probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Step size for the fusion logits; defaults to `learning_rate`.
    pub fusion_learning_rate: Option<f64>,
    pub momentum: f64,
    pub batch_size: usize,
    pub fine_tune_stages: usize,
    pub epochs_per_stage: Vec<usize>,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub scales: [f64; BRANCHES],
    pub norm_mean: [f32; 3],
    pub norm_std: [f32; 3],
    /// Random horizontal flips; meant for synthetic experiments only.
    pub hflip: bool,
    /// Epochs of per-branch training before joint training (ablation; 0 disables).
    pub branch_pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            fusion_learning_rate: None,
            momentum: 0.9,
            batch_size: 16,
            fine_tune_stages: 4,
            epochs_per_stage: vec![2, 2, 2, 4],
            seed: 0,
            backbone: BackboneConfig::tiny(),
            scales: DEFAULT_SCALES,
            norm_mean: IMAGENET_MEAN,
            norm_std: IMAGENET_STD,
            hflip: false,
            branch_pretrain_epochs: 0,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            v.push(format!(
                "learning_rate must be a finite non-negative number, got {}",
                self.learning_rate
            ));
        }
        if let Some(f) = self.fusion_learning_rate {
            if !(f.is_finite() && f >= 0.0) {
                v.push(format!("fusion_learning_rate must be finite and non-negative, got {f}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be positive".to_string());
        }
        if self.fine_tune_stages == 0 {
            v.push("fine_tune_stages must be at least 1".to_string());
        }
        if self.epochs_per_stage.len() != self.fine_tune_stages {
            v.push(format!(
                "epochs_per_stage has {} entries but fine_tune_stages is {}",
                self.epochs_per_stage.len(),
                self.fine_tune_stages
            ));
        }
        if self.epochs_per_stage.contains(&0) {
            v.push("every entry of epochs_per_stage must be positive".to_string());
        }
        if let Err(e) = validate_scales(&self.scales) {
            v.push(e.to_string());
        }
        if self.norm_std.iter().any(|s| s.is_nan() || *s <= 0.0) {
            v.push(format!("norm_std entries must be positive, got {:?}", self.norm_std));
        }
        if self.norm_mean.iter().any(|m| !m.is_finite()) {
            v.push("norm_mean entries must be finite".to_string());
        }
        if self.backbone.kind == BackboneKind::Resnet50Pretrained && self.backbone.weights.is_none() {
            v.push("backbone resnet50_pretrained requires pretrained_weights".to_string());
        }
        v
    }

    pub fn fusion_lr(&self) -> f64 {
        self.fusion_learning_rate.unwrap_or(self.learning_rate)
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess {
            scales: self.scales,
            mean: self.norm_mean,
            std: self.norm_std,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_per_stage.iter().sum()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Same configuration with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn xavier(&self) -> XavierVariant {
        self.backbone.xavier
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        assert!(TrainConfig::default().violations().is_empty());
    }

    #[test]
    fn reports_every_violation() {
        let c = TrainConfig {
            learning_rate: -1.0,
            batch_size: 0,
            fine_tune_stages: 3,
            epochs_per_stage: vec![1, 0],
            scales: [1.0, 0.8, 0.9, 0.4],
            ..TrainConfig::default()
        };
        let v = c.violations();
        assert_eq!(v.len(), 5, "{v:#?}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        assert_eq!(a.hash(), TrainConfig::default().hash());
        assert_ne!(a.hash(), a.with_seed(1).hash());
    }
}

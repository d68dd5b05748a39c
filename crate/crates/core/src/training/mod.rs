//! End-to-end training of one binary ensemble, and the seven-task bank.

mod bank;
mod checkpoint;
mod config;
mod data;
mod model;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, BackboneError, FineTuneStage};
use crate::dataset::{BinaryEntry, BinaryTaskView, DiagnosisClass};
use crate::evaluation::{auc, AucError, ScoredSet};
use crate::fusion::{FusionError, FusionParameters, BRANCHES};
use crate::imaging::ImageTensor;

pub use bank::{checkpoint_path, run_task_bank, BankReport, TaskOutcome, TaskStatus};
pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_expecting, parse_checkpoint, save_checkpoint, CheckpointError,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::TrainConfig;
pub use data::{load_inputs, BranchInputs, FileSource, ImageSource, MemorySource, Preprocess, SampleError};
pub use model::{
    bce, bce_grad, positive_probability, step, Gradients, MldeModel, Objective, Prediction, Sgd, StepError, StepReport,
    PROB_EPS,
};

/// Images decoded per chunk during inference.
const PREDICT_CHUNK: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("non-finite loss {loss} at stage {stage}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        loss: f64,
        stage: usize,
        epoch: usize,
        batch: usize,
    },
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("validation AUC: {0}")]
    Validation(#[from] AucError),
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Fine-tuning stage, or `None` for branch pre-training.
    pub stage: Option<usize>,
    pub epoch: usize,
    /// Mean pre-update batch loss over the epoch.
    pub loss: f64,
    pub validation_auc: Option<f64>,
    pub fusion_weights: [f64; BRANCHES],
}

/// A trained ensemble for one diagnosis.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub target: DiagnosisClass,
    pub config: TrainConfig,
    pub model: MldeModel,
    pub history: Vec<EpochRecord>,
    /// The training set lacked positives or negatives, so nothing was trained.
    pub degenerate: bool,
}

impl TrainedModel {
    pub fn fusion_weights(&self) -> [f64; BRANCHES] {
        self.model.fusion.weights()
    }

    pub fn predict_image(&self, image: &ImageTensor) -> Result<Prediction, TrainError> {
        let inputs = self
            .config
            .preprocess()
            .inputs(image, false)
            .map_err(|source| SampleError {
                image_id: String::new(),
                source,
            })?;
        Ok(self.model.predict(&inputs)?)
    }

    /// Predictions for `entries` in order.
    pub fn predict_entries(
        &self,
        source: &dyn ImageSource,
        entries: &[(&str, &Path)],
    ) -> Result<Vec<Prediction>, TrainError> {
        predict_entries(&self.model, &self.config.preprocess(), source, entries)
    }
}

/// Predictions for `entries` in order, decoding a bounded number of images at a time.
pub fn predict_entries(
    model: &MldeModel,
    preprocess: &Preprocess,
    source: &dyn ImageSource,
    entries: &[(&str, &Path)],
) -> Result<Vec<Prediction>, TrainError> {
    let mut out = Vec::with_capacity(entries.len());
    for chunk in entries.chunks(PREDICT_CHUNK) {
        let items: Vec<_> = chunk.iter().map(|&(id, path)| (id, path, false)).collect();
        for inputs in load_inputs(source, preprocess, items)? {
            out.push(model.predict(&inputs)?);
        }
    }
    Ok(out)
}

/// Runtime knobs that do not affect the model definition.
#[derive(Clone, Copy)]
pub struct TrainOptions<'a> {
    pub source: &'a dyn ImageSource,
    /// Labeled held-out set scored after every epoch.
    pub validation: Option<&'a BinaryTaskView>,
    /// Gradient work is split into this many contiguous chunks. Results are
    /// bitwise reproducible for a fixed value; 1 is the deterministic mode.
    pub workers: usize,
}

impl<'a> TrainOptions<'a> {
    pub fn new(source: &'a dyn ImageSource) -> Self {
        Self {
            source,
            validation: None,
            workers: 1,
        }
    }
}

/// Fresh ensemble: four independently seeded branches and uniform fusion weights.
pub fn init_model(config: &TrainConfig) -> Result<MldeModel, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let branches = (0..BRANCHES)
        .map(|_| build_backbone(&config.backbone, rng.next_u64()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MldeModel::new(branches, FusionParameters::default()))
}

/// Trains one ensemble on `task` following the staged fine-tuning schedule.
///
/// A degenerate task (single class) returns the untrained model flagged as such.
pub fn train_task(
    task: &BinaryTaskView,
    config: &TrainConfig,
    options: TrainOptions<'_>,
) -> Result<TrainedModel, TrainError> {
    let violations = config.violations();
    if !violations.is_empty() {
        return Err(TrainError::Config(violations));
    }
    let mut model = init_model(config)?;
    if task.is_degenerate() {
        log::warn!("task {} is degenerate; skipping training", task.target);
        return Ok(TrainedModel {
            target: task.target,
            config: config.clone(),
            model,
            history: Vec::new(),
            degenerate: true,
        });
    }

    // Separate streams so that toggling flips does not change the sample order.
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let mut flip_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0002);
    let mut optimizer = Sgd::new(&model, config.learning_rate, config.fusion_lr(), config.momentum);
    let schedule = model.branches[0].spec().schedule(config.fine_tune_stages);
    let mut history = Vec::new();
    let mut epoch_counter = 0;
    let mut run_epoch = |model: &mut MldeModel,
                         optimizer: &mut Sgd,
                         stage: &FineTuneStage,
                         objective: Objective,
                         stage_label: Option<usize>|
     -> Result<(), TrainError> {
        let mut order: Vec<usize> = (0..task.entries.len()).collect();
        order.shuffle(&mut order_rng);
        let preprocess = config.preprocess();
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let items: Vec<(&str, &Path, bool)> = idx
                .iter()
                .map(|&i| {
                    let e: &BinaryEntry = &task.entries[i];
                    let flip = config.hflip && flip_rng.random_bool(0.5);
                    (e.image_id.as_str(), e.file_path.as_path(), flip)
                })
                .collect();
            let inputs = load_inputs(options.source, &preprocess, items)?;
            let batch: Vec<(BranchInputs, u8)> = inputs
                .into_iter()
                .zip(idx.iter().map(|&i| task.entries[i].label))
                .collect();
            match step(model, &batch, optimizer, stage, objective, options.workers) {
                Ok(report) => {
                    loss_sum += report.loss * batch.len() as f64;
                    seen += batch.len();
                }
                Err(StepError::NonFiniteLoss(loss)) => {
                    return Err(TrainError::NonFiniteLoss {
                        loss,
                        stage: stage.stage_index,
                        epoch: epoch_counter,
                        batch: b,
                    })
                }
                Err(StepError::Fusion(e)) => return Err(e.into()),
            }
        }
        let validation_auc = match options.validation {
            Some(v) if !v.is_degenerate() => Some(validation_auc(model, config, options, v)?),
            _ => None,
        };
        let record = EpochRecord {
            stage: stage_label,
            epoch: epoch_counter,
            loss: loss_sum / seen as f64,
            validation_auc,
            fusion_weights: model.fusion.weights(),
        };
        log::info!(
            "{} epoch {} loss {:.5}{}",
            task.target,
            record.epoch,
            record.loss,
            record
                .validation_auc
                .map(|a| format!(" val auc {a:.4}"))
                .unwrap_or_default()
        );
        history.push(record);
        epoch_counter += 1;
        Ok(())
    };

    if config.branch_pretrain_epochs > 0 {
        let last = schedule.last().expect("schedule has at least one stage");
        for _ in 0..config.branch_pretrain_epochs {
            run_epoch(&mut model, &mut optimizer, last, Objective::Branchwise, None)?;
        }
        optimizer = Sgd::new(&model, config.learning_rate, config.fusion_lr(), config.momentum);
    }
    for (stage, epochs) in schedule.iter().zip(&config.epochs_per_stage) {
        for _ in 0..*epochs {
            run_epoch(
                &mut model,
                &mut optimizer,
                stage,
                Objective::Joint,
                Some(stage.stage_index),
            )?;
        }
    }
    Ok(TrainedModel {
        target: task.target,
        config: config.clone(),
        model,
        history,
        degenerate: false,
    })
}

fn validation_auc(
    model: &MldeModel,
    config: &TrainConfig,
    options: TrainOptions<'_>,
    view: &BinaryTaskView,
) -> Result<f64, TrainError> {
    let entries: Vec<_> = view
        .entries
        .iter()
        .map(|e| (e.image_id.as_str(), e.file_path.as_path()))
        .collect();
    let scores: Vec<f64> = predict_entries(model, &config.preprocess(), options.source, &entries)?
        .iter()
        .map(|p| p.fused)
        .collect();
    Ok(auc(&ScoredSet::new(&scores, &view.labels())?)?)
}

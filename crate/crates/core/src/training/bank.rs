use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::dataset::{derive_binary_task, DatasetManifest, DiagnosisClass};

use super::checkpoint::save_checkpoint;
use super::{train_task, TrainConfig, TrainOptions, TrainedModel};

/// What happened to one task of the bank.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum TaskStatus {
    Trained,
    Degenerate,
    Failed(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskOutcome {
    pub target: DiagnosisClass,
    pub seed: u64,
    pub status: TaskStatus,
    pub checkpoint: Option<PathBuf>,
    pub final_loss: Option<f64>,
    pub fusion_weights: Option<[f64; 4]>,
    /// Present when models are kept in memory.
    #[serde(skip)]
    pub model: Option<TrainedModel>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BankReport {
    pub tasks: Vec<TaskOutcome>,
}

impl BankReport {
    pub fn failures(&self) -> impl Iterator<Item = &TaskOutcome> {
        self.tasks.iter().filter(|t| matches!(t.status, TaskStatus::Failed(_)))
    }

    pub fn models(&self) -> impl Iterator<Item = &TrainedModel> {
        self.tasks.iter().filter_map(|t| t.model.as_ref())
    }
}

/// Path of a class's checkpoint inside `dir`.
pub fn checkpoint_path(dir: &Path, class: DiagnosisClass) -> PathBuf {
    dir.join(format!("{}.mlde", class.code()))
}

/// Trains the seven one-vs-rest ensembles in canonical class order, task `i`
/// seeded with `config.seed + i`. A failed task is reported and the remaining
/// tasks still run. Checkpoints are written to `checkpoint_dir` when given.
pub fn run_task_bank(
    manifest: &DatasetManifest,
    validation: Option<&DatasetManifest>,
    config: &TrainConfig,
    options: TrainOptions<'_>,
    checkpoint_dir: Option<&Path>,
    keep_models: bool,
) -> BankReport {
    let tasks = DiagnosisClass::ALL
        .iter()
        .map(|&class| {
            let seed = config.seed.wrapping_add(class.index() as u64);
            let mut outcome = TaskOutcome {
                target: class,
                seed,
                status: TaskStatus::Trained,
                checkpoint: None,
                final_loss: None,
                fusion_weights: None,
                model: None,
            };
            let result = derive_binary_task(manifest, class)
                .map_err(|e| e.to_string())
                .and_then(|task| {
                    let val = validation
                        .filter(|v| v.labeled_count() > 0)
                        .map(|v| derive_binary_task(v, class))
                        .transpose()
                        .map_err(|e| e.to_string())?;
                    let opts = TrainOptions {
                        validation: val.as_ref(),
                        ..options
                    };
                    train_task(&task, &config.with_seed(seed), opts).map_err(|e| e.to_string())
                })
                .and_then(|model| {
                    if let Some(dir) = checkpoint_dir {
                        let path = checkpoint_path(dir, class);
                        save_checkpoint(&model, &path).map_err(|e| e.to_string())?;
                        outcome.checkpoint = Some(path);
                    }
                    Ok(model)
                });
            match result {
                Ok(model) => {
                    if model.degenerate {
                        outcome.status = TaskStatus::Degenerate;
                    }
                    outcome.final_loss = model.history.last().map(|r| r.loss);
                    outcome.fusion_weights = Some(model.fusion_weights());
                    if keep_models {
                        outcome.model = Some(model);
                    }
                }
                Err(e) => {
                    log::error!("task {class} failed: {e}");
                    outcome.status = TaskStatus::Failed(e);
                }
            }
            outcome
        })
        .collect();
    BankReport { tasks }
}

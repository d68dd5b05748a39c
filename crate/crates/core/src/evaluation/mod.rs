//! ROC/AUC scoring, prediction export and branch-vs-ensemble reports.

mod auc;
mod predictions;
mod report;

use std::path::PathBuf;

pub use auc::{auc, roc_curve, trapezoid_area, AucError, ScoredSet};
pub use predictions::{
    parse_predictions_csv, predict_dataset, predict_dataset_with, read_predictions_csv, write_predictions_csv,
    PredictionRow, PredictionTable, PREDICTION_HEADER,
};
pub use report::{compare_report, evaluate_predictions, roc_svg, ComparisonReport, EvaluationReport, BRANCH_COLUMNS};

use crate::dataset::DiagnosisClass;
use crate::training::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{class}: {source}")]
    Auc {
        class: DiagnosisClass,
        #[source]
        source: AucError,
    },
    #[error("mean AUC needs exactly 7 values, got {0}")]
    TaskCount(usize),
    #[error("AUC value {0} is outside [0, 1]")]
    AucRange(f64),
    #[error("no model for class {0}")]
    MissingModel(DiagnosisClass),
    #[error("model for {found} supplied where {expected} was expected")]
    WrongModel {
        expected: DiagnosisClass,
        found: DiagnosisClass,
    },
    #[error("prediction failed: {0}")]
    Predict(#[from] TrainError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("prediction file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("mismatched evaluation sets: {0}")]
    Mismatch(String),
}

/// Arithmetic mean of the seven per-task AUCs.
pub fn mean_auc(per_task: &[f64]) -> Result<f64, EvalError> {
    if per_task.len() != DiagnosisClass::COUNT {
        return Err(EvalError::TaskCount(per_task.len()));
    }
    if let Some(&bad) = per_task.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(EvalError::AucRange(bad));
    }
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

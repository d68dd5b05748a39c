use std::borrow::Borrow;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::dataset::{DatasetManifest, DiagnosisClass};
use crate::fusion::BRANCHES;
use crate::training::{predict_entries, ImageSource, TrainedModel};

use super::EvalError;

/// Header of the submission-style prediction file.
pub const PREDICTION_HEADER: &str = "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC";

/// Scores for one image, in canonical class order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRow {
    pub image_id: String,
    /// Fused probability of each one-vs-rest model.
    pub scores: [f64; DiagnosisClass::COUNT],
    /// Per-class branch probabilities; empty when parsed from a CSV file.
    pub branch_scores: Vec<[f64; BRANCHES]>,
}

/// Rows in manifest order. Rows are not normalized across classes.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PredictionTable {
    pub rows: Vec<PredictionRow>,
}

impl PredictionTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Fused scores of one class, row order.
    pub fn class_scores(&self, class: DiagnosisClass) -> Vec<f64> {
        self.rows.iter().map(|r| r.scores[class.index()]).collect()
    }

    /// Branch `k` scores of one class, row order.
    pub fn branch_scores(&self, class: DiagnosisClass, k: usize) -> Option<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.branch_scores.get(class.index()).map(|b| b[k]))
            .collect()
    }
}

/// Scores every manifest image with the seven models. `models` must hold one
/// model per class in canonical order.
pub fn predict_dataset(
    models: &[TrainedModel],
    manifest: &DatasetManifest,
    source: &dyn ImageSource,
) -> Result<PredictionTable, EvalError> {
    predict_dataset_with(
        |class| models.get(class.index()).ok_or(EvalError::MissingModel(class)),
        manifest,
        source,
    )
}

/// Like [`predict_dataset`], but obtains each class's model on demand so that
/// only one model is held at a time.
pub fn predict_dataset_with<M, F>(
    mut model_for: F,
    manifest: &DatasetManifest,
    source: &dyn ImageSource,
) -> Result<PredictionTable, EvalError>
where
    M: Borrow<TrainedModel>,
    F: FnMut(DiagnosisClass) -> Result<M, EvalError>,
{
    let paths: Vec<_> = manifest.entries().iter().map(|e| manifest.resolve(e)).collect();
    let entries: Vec<(&str, &Path)> = manifest
        .entries()
        .iter()
        .zip(&paths)
        .map(|(e, p)| (e.image_id.as_str(), p.as_path()))
        .collect();
    let mut rows: Vec<PredictionRow> = entries
        .iter()
        .map(|(id, _)| PredictionRow {
            image_id: id.to_string(),
            scores: [0.0; DiagnosisClass::COUNT],
            branch_scores: Vec::with_capacity(DiagnosisClass::COUNT),
        })
        .collect();
    for class in DiagnosisClass::ALL {
        let model = model_for(class)?;
        let model = model.borrow();
        if model.target != class {
            return Err(EvalError::WrongModel {
                expected: class,
                found: model.target,
            });
        }
        let preds = predict_entries(&model.model, &model.config.preprocess(), source, &entries)?;
        for (row, p) in rows.iter_mut().zip(preds) {
            row.scores[class.index()] = p.fused;
            row.branch_scores.push(p.branches.p);
        }
    }
    Ok(PredictionTable { rows })
}

/// Writes the table as UTF-8 CSV with six decimals per probability.
pub fn write_predictions_csv(table: &PredictionTable, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "{PREDICTION_HEADER}").map_err(io)?;
    for row in &table.rows {
        write!(out, "{}", row.image_id).map_err(io)?;
        for s in row.scores {
            write!(out, ",{s:.6}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn parse_predictions_csv(text: &str) -> Result<PredictionTable, EvalError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == PREDICTION_HEADER => {}
        Some((_, h)) => {
            return Err(EvalError::Parse {
                line: 1,
                message: format!("expected header {PREDICTION_HEADER:?}, found {h:?}"),
            })
        }
        None => {
            return Err(EvalError::Parse {
                line: 1,
                message: "missing header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != DiagnosisClass::COUNT + 1 {
            return Err(EvalError::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", DiagnosisClass::COUNT + 1, fields.len()),
            });
        }
        let mut scores = [0.0; DiagnosisClass::COUNT];
        for (s, f) in scores.iter_mut().zip(&fields[1..]) {
            *s = f.parse().map_err(|_| EvalError::Parse {
                line: line_no,
                message: format!("bad probability {f:?}"),
            })?;
        }
        rows.push(PredictionRow {
            image_id: fields[0].to_string(),
            scores,
            branch_scores: Vec::new(),
        });
    }
    Ok(PredictionTable { rows })
}

pub fn read_predictions_csv(path: impl AsRef<Path>) -> Result<PredictionTable, EvalError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_predictions_csv(&text)
}

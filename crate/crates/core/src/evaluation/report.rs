use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

use crate::dataset::{DatasetManifest, DiagnosisClass};
use crate::fusion::BRANCHES;

use super::{auc, mean_auc, EvalError, PredictionTable, ScoredSet};

/// Column titles of the comparison table: the ensemble, then each branch.
pub const BRANCH_COLUMNS: [&str; BRANCHES + 1] = ["MLDE", "branch1", "branch2", "branch3", "branch4"];

/// Scores of a prediction table against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub images: usize,
    pub per_task_auc: BTreeMap<DiagnosisClass, f64>,
    /// Mean of the seven per-task AUCs.
    pub mean_auc: f64,
    /// Per-task AUC of each branch alone, when branch scores are available.
    pub per_task_branch_auc: Option<BTreeMap<DiagnosisClass, [f64; BRANCHES]>>,
    /// Seven-task mean AUC of each branch alone.
    pub per_branch_auc: Option<[f64; BRANCHES]>,
    pub ensemble_mean_auc: f64,
}

/// Scores `table` against the labels in `truth`. Both must cover the same images.
pub fn evaluate_predictions(table: &PredictionTable, truth: &DatasetManifest) -> Result<EvaluationReport, EvalError> {
    let labels: HashMap<&str, DiagnosisClass> = truth
        .entries()
        .iter()
        .filter_map(|e| e.label.map(|l| (e.image_id.as_str(), l)))
        .collect();
    if labels.len() != table.len() {
        return Err(EvalError::Mismatch(format!(
            "{} predictions but {} labeled images",
            table.len(),
            labels.len()
        )));
    }
    let row_labels = table
        .rows
        .iter()
        .map(|r| {
            labels
                .get(r.image_id.as_str())
                .copied()
                .ok_or_else(|| EvalError::Mismatch(format!("no label for image {}", r.image_id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let score = |class: DiagnosisClass, scores: &[f64]| -> Result<f64, EvalError> {
        let y: Vec<u8> = row_labels.iter().map(|&l| u8::from(l == class)).collect();
        ScoredSet::new(scores, &y)
            .and_then(|s| auc(&s))
            .map_err(|source| EvalError::Auc { class, source })
    };
    let mut per_task_auc = BTreeMap::new();
    for class in DiagnosisClass::ALL {
        per_task_auc.insert(class, score(class, &table.class_scores(class))?);
    }
    let has_branches = table
        .rows
        .iter()
        .all(|r| r.branch_scores.len() == DiagnosisClass::COUNT);
    let per_task_branch_auc = if has_branches && !table.is_empty() {
        let mut m = BTreeMap::new();
        for class in DiagnosisClass::ALL {
            let mut a = [0.0; BRANCHES];
            for (k, slot) in a.iter_mut().enumerate() {
                let s = table.branch_scores(class, k).expect("branch scores present");
                *slot = score(class, &s)?;
            }
            m.insert(class, a);
        }
        Some(m)
    } else {
        None
    };
    let per_branch_auc = per_task_branch_auc.as_ref().map(branch_means).transpose()?;
    let values: Vec<f64> = per_task_auc.values().copied().collect();
    let mean = mean_auc(&values)?;
    Ok(EvaluationReport {
        images: table.len(),
        per_task_auc,
        mean_auc: mean,
        per_task_branch_auc,
        per_branch_auc,
        ensemble_mean_auc: mean,
    })
}

fn branch_means(m: &BTreeMap<DiagnosisClass, [f64; BRANCHES]>) -> Result<[f64; BRANCHES], EvalError> {
    let mut out = [0.0; BRANCHES];
    for (k, slot) in out.iter_mut().enumerate() {
        let v: Vec<f64> = m.values().map(|a| a[k]).collect();
        *slot = mean_auc(&v)?;
    }
    Ok(out)
}

/// Ensemble and per-branch AUCs side by side.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub columns: Vec<String>,
    /// One row per task, then the average row.
    pub rows: Vec<(String, [f64; BRANCHES + 1])>,
    pub ensemble_mean_auc: f64,
    pub branch_mean_auc: [f64; BRANCHES],
    /// The ensemble mean is at least every branch mean.
    pub ensemble_beats_all_branches: bool,
}

/// Builds the comparison from per-task ensemble and branch AUCs measured on the
/// same labeled set.
pub fn compare_report(
    ensemble: &BTreeMap<DiagnosisClass, f64>,
    branches: &BTreeMap<DiagnosisClass, [f64; BRANCHES]>,
) -> Result<ComparisonReport, EvalError> {
    if !ensemble.keys().eq(branches.keys()) {
        return Err(EvalError::Mismatch(
            "ensemble and branch AUCs cover different tasks".into(),
        ));
    }
    if ensemble.is_empty() {
        return Err(EvalError::Mismatch("no tasks to compare".into()));
    }
    let all = ensemble.values().copied().chain(branches.values().flatten().copied());
    for a in all {
        if !(0.0..=1.0).contains(&a) {
            return Err(EvalError::AucRange(a));
        }
    }
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let ensemble_mean = mean(ensemble.values().copied().collect());
    let mut branch_mean = [0.0; BRANCHES];
    for (k, slot) in branch_mean.iter_mut().enumerate() {
        *slot = mean(branches.values().map(|a| a[k]).collect());
    }
    let mut rows: Vec<(String, [f64; BRANCHES + 1])> = ensemble
        .iter()
        .map(|(class, &e)| {
            let b = branches[class];
            (class.code().to_string(), [e, b[0], b[1], b[2], b[3]])
        })
        .collect();
    rows.push((
        "Average AUC".into(),
        [
            ensemble_mean,
            branch_mean[0],
            branch_mean[1],
            branch_mean[2],
            branch_mean[3],
        ],
    ));
    Ok(ComparisonReport {
        columns: BRANCH_COLUMNS.iter().map(|c| c.to_string()).collect(),
        rows,
        ensemble_mean_auc: ensemble_mean,
        branch_mean_auc: branch_mean,
        ensemble_beats_all_branches: branch_mean.iter().all(|&b| ensemble_mean >= b),
    })
}

impl ComparisonReport {
    /// Aligned plain-text table with AUCs in percent.
    pub fn render_table(&self) -> String {
        let label_w = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(4);
        let col_w = self.columns.iter().map(|c| c.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:<label_w$}", "task");
        for c in &self.columns {
            let _ = write!(out, "  {c:>col_w$}");
        }
        out.push('\n');
        for (label, values) in &self.rows {
            let _ = write!(out, "{label:<label_w$}");
            for v in values {
                let _ = write!(out, "  {:>col_w$.1}", v * 100.0);
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "ensemble >= every branch: {}",
            if self.ensemble_beats_all_branches { "yes" } else { "no" }
        );
        out
    }
}

/// ROC curves as a standalone SVG document.
pub fn roc_svg(curves: &[(String, Vec<(f64, f64)>)], title: &str) -> String {
    const SIZE: f64 = 400.0;
    const MARGIN: f64 = 50.0;
    const COLORS: [&str; 7] = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
    ];
    let px = |x: f64| MARGIN + x * SIZE;
    let py = |y: f64| MARGIN + (1.0 - y) * SIZE;
    let total = SIZE + 2.0 * MARGIN;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{w}\" viewBox=\"0 0 {w} {w}\">\n",
        w = total + 120.0
    );
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"25\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>",
        px(0.5),
        escape(title)
    );
    let _ = writeln!(
        svg,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{SIZE}\" height=\"{SIZE}\" fill=\"none\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999\" stroke-dasharray=\"4 4\"/>",
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{v:.2}</text>",
            px(v),
            py(0.0) + 15.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{v:.2}</text>",
            px(0.0) - 5.0,
            py(v) + 3.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">false positive rate</text>",
        px(0.5),
        total - 10.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"15\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 15 {})\">true positive rate</text>",
        py(0.5),
        py(0.5)
    );
    for (i, (label, points)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            path.join(" ")
        );
        let ly = MARGIN + 15.0 + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{ly}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{}</text>",
            px(1.0) + 10.0,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(
        class: DiagnosisClass,
        e: f64,
        b: [f64; 4],
    ) -> (BTreeMap<DiagnosisClass, f64>, BTreeMap<DiagnosisClass, [f64; 4]>) {
        (BTreeMap::from([(class, e)]), BTreeMap::from([(class, b)]))
    }

    #[test]
    fn flag_follows_means() {
        let (e, b) = one(DiagnosisClass::Mel, 0.9, [0.8, 0.85, 0.7, 0.75]);
        assert!(compare_report(&e, &b).unwrap().ensemble_beats_all_branches);
        let (e, b) = one(DiagnosisClass::Mel, 0.8, [0.85, 0.7, 0.7, 0.7]);
        assert!(!compare_report(&e, &b).unwrap().ensemble_beats_all_branches);
    }

    #[test]
    fn column_order() {
        let (e, b) = one(DiagnosisClass::Nv, 0.9, [0.8; 4]);
        let r = compare_report(&e, &b).unwrap();
        assert_eq!(r.columns, ["MLDE", "branch1", "branch2", "branch3", "branch4"]);
        let table = r.render_table();
        let header = table.lines().next().unwrap();
        let pos: Vec<usize> = r.columns.iter().map(|c| header.find(c.as_str()).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(table.contains("Average AUC"));
    }

    #[test]
    fn mismatched_tasks_are_rejected() {
        let e = BTreeMap::from([(DiagnosisClass::Mel, 0.9)]);
        let b = BTreeMap::from([(DiagnosisClass::Nv, [0.8; 4])]);
        assert!(matches!(compare_report(&e, &b), Err(EvalError::Mismatch(_))));
    }

    #[test]
    fn svg_is_well_formed() {
        let svg = roc_svg(&[("MEL <a>".into(), vec![(0.0, 0.0), (0.5, 1.0), (1.0, 1.0)])], "ROC");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("MEL &lt;a&gt;"));
    }
}

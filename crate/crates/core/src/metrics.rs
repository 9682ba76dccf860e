//! Confusion matrices, per-class F1 and the expression criterion
//! `0.67 · macro_F1 + 0.33 · accuracy`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{round2, ExpressionLabel, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};

pub const F1_WEIGHT: f64 = 0.67;
pub const ACCURACY_WEIGHT: f64 = 0.33;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// `cells[t][p]` counts samples of true class `t` predicted as `p`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    cells: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_cells(cells: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        ConfusionMatrix { cells }
    }

    pub fn cells(&self) -> &[[u64; NUM_CLASSES]; NUM_CLASSES] {
        &self.cells
    }

    pub fn update(
        &mut self,
        truth: &[ExpressionLabel],
        predicted: &[ExpressionLabel],
    ) -> Result<()> {
        if truth.len() != predicted.len() {
            return Err(Error::Contract(format!(
                "{} true labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        for (t, p) in truth.iter().zip(predicted) {
            self.cells[t.index()][p.index()] += 1;
        }
        Ok(())
    }

    /// Like [`update`](Self::update) for raw class indices, which are range-checked first.
    pub fn update_indices(&mut self, truth: &[usize], predicted: &[usize]) -> Result<()> {
        let to_labels = |v: &[usize]| {
            v.iter()
                .map(|&i| ExpressionLabel::from_index(i))
                .collect::<Result<Vec<_>>>()
        };
        let (t, p) = (to_labels(truth)?, to_labels(predicted)?);
        self.update(&t, &p)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.cells.iter_mut().zip(&other.cells) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.cells[c][c]).sum()
    }

    /// Number of samples whose true class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.cells[c].iter().sum()
    }

    /// Number of samples predicted as `c`.
    pub fn predicted(&self, c: usize) -> u64 {
        self.cells.iter().map(|row| row[c]).sum()
    }
}

fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// F1 from true positive, false positive and false negative counts; every 0/0 is 0.
pub fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    let precision = ratio_or_zero(tp as f64, (tp + fp) as f64);
    let recall = ratio_or_zero(tp as f64, (tp + fn_) as f64);
    ratio_or_zero(2.0 * precision * recall, precision + recall)
}

pub fn per_class_f1(m: &ConfusionMatrix) -> [f64; NUM_CLASSES] {
    std::array::from_fn(|c| {
        let tp = m.cells[c][c];
        f1_from_counts(tp, m.predicted(c) - tp, m.support(c) - tp)
    })
}

pub fn criterion_from(macro_f1: f64, accuracy: f64) -> f64 {
    F1_WEIGHT * macro_f1 + ACCURACY_WEIGHT * accuracy
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_f1: [f64; NUM_CLASSES],
    pub macro_f1: f64,
    pub total_accuracy: f64,
    pub expression_criterion: f64,
    pub support: [u64; NUM_CLASSES],
}

impl EvalReport {
    /// Report built from an explicit per-class F1 vector and accuracy.
    pub fn from_parts(
        per_class_f1: [f64; NUM_CLASSES],
        total_accuracy: f64,
        support: [u64; NUM_CLASSES],
    ) -> Self {
        let macro_f1 = per_class_f1.iter().sum::<f64>() / NUM_CLASSES as f64;
        EvalReport {
            per_class_f1,
            macro_f1,
            total_accuracy,
            expression_criterion: criterion_from(macro_f1, total_accuracy),
            support,
        }
    }
}

pub fn expression_criterion(m: &ConfusionMatrix) -> Result<EvalReport> {
    let total = m.total();
    if total == 0 {
        return Err(Error::Domain(
            "cannot score an empty confusion matrix".into(),
        ));
    }
    Ok(EvalReport::from_parts(
        per_class_f1(m),
        m.trace() as f64 / total as f64,
        std::array::from_fn(|c| m.support(c)),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Table,
}

#[derive(Serialize, Deserialize)]
struct VersionedReport {
    schema_version: u32,
    #[serde(flatten)]
    report: EvalReport,
}

pub fn emit_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(&VersionedReport {
            schema_version: REPORT_SCHEMA_VERSION,
            report: report.clone(),
        })
        .expect("report serializes"),
        ReportFormat::Table => {
            let row: Vec<String> = report
                .per_class_f1
                .iter()
                .map(|&f| format!("{:.2}", round2(f)))
                .collect();
            let mut out = String::new();
            writeln!(out, "{}", CLASS_NAMES.join(" ")).unwrap();
            writeln!(out, "{}", row.join(" ")).unwrap();
            writeln!(
                out,
                "F1 {:.2}  accuracy {:.2}  criterion {:.2}",
                round2(report.macro_f1),
                round2(report.total_accuracy),
                round2(report.expression_criterion)
            )
            .unwrap();
            out
        }
    }
}

pub fn parse_report(text: &str) -> Result<EvalReport> {
    let v: VersionedReport = serde_json::from_str(text)
        .map_err(|e| Error::format("<report>", format!("invalid report JSON: {e}")))?;
    if v.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::format(
            "<report>",
            format!("unsupported report schema_version {}", v.schema_version),
        ));
    }
    Ok(v.report)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub path: String,
    pub frame_index: Option<u64>,
    pub true_label: ExpressionLabel,
    pub predicted_label: ExpressionLabel,
}

pub fn predictions_csv(predictions: &[Prediction]) -> String {
    let mut out = String::from("path,frame_index,true_label,predicted_label\n");
    for p in predictions {
        let frame = p.frame_index.map(|f| f.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{frame},{},{}",
            p.path,
            p.true_label.code(),
            p.predicted_label.code()
        )
        .unwrap();
    }
    out
}

pub fn write_predictions(predictions: &[Prediction], path: &Path) -> Result<()> {
    std::fs::write(path, predictions_csv(predictions)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_tally() {
        let mut m = ConfusionMatrix::default();
        m.update_indices(&[], &[]).unwrap();
        assert_eq!(m.total(), 0);
        m.update_indices(&[0, 0, 4], &[0, 4, 4]).unwrap();
        assert_eq!(
            (m.cells()[0][0], m.cells()[0][4], m.cells()[4][4]),
            (1, 1, 1)
        );
        assert_eq!(m.total(), 3);
        assert!(m.update_indices(&[0], &[7]).is_err());
        assert!(m.update_indices(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn f1_conventions() {
        approx::assert_abs_diff_eq!(f1_from_counts(2, 1, 1), 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(f1_from_counts(0, 0, 0), 0.0);
        assert_eq!(f1_from_counts(0, 3, 0), 0.0);
        let mut m = ConfusionMatrix::default();
        m.update_indices(&[0, 1, 2, 3, 4, 5, 6], &[0, 1, 2, 3, 4, 5, 6])
            .unwrap();
        let r = expression_criterion(&m).unwrap();
        assert_eq!(r.per_class_f1, [1.0; 7]);
        assert_eq!(r.expression_criterion, 1.0);
    }

    #[test]
    fn empty_matrix_is_rejected() {
        assert!(matches!(
            expression_criterion(&ConfusionMatrix::default()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn table_and_json() {
        let r = EvalReport::from_parts([0.75, 0.09, 0.02, 0.22, 0.58, 0.27, 0.41], 0.63, [1; 7]);
        let table = emit_report(&r, ReportFormat::Table);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[1], "0.75 0.09 0.02 0.22 0.58 0.27 0.41");
        assert!(lines[2].ends_with("criterion 0.43"), "{}", lines[2]);
        let back = parse_report(&emit_report(&r, ReportFormat::Json)).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn predictions_file_layout() {
        let p = Prediction {
            path: "a/00001.jpg".into(),
            frame_index: Some(0),
            true_label: ExpressionLabel::FEAR,
            predicted_label: ExpressionLabel::NEUTRAL,
        };
        assert_eq!(
            predictions_csv(&[p]),
            "path,frame_index,true_label,predicted_label\na/00001.jpg,0,3,0\n"
        );
    }
}

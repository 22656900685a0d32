//! Confusion matrices, per-class precision/recall and training-curve CSV.

mod curves;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, LabeledDataset, Split};
use crate::nn::{ops, Model, NnError, Tensor};

pub use curves::{curves_to_csv, export_curves, parse_curves, read_curves, CURVES_HEADER};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error("dataset classes {dataset:?} differ from model classes {model:?}")]
    ClassMismatch { dataset: Vec<String>, model: Vec<String> },
    #[error("training log is empty")]
    EmptyLog,
    #[error("malformed curve CSV at line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let n = class_names.len();
        ConfusionMatrix {
            class_names,
            counts: vec![vec![0; n]; n],
        }
    }

    /// Tallies `(true, predicted)` pairs.
    pub fn from_pairs(class_names: Vec<String>, pairs: &[(usize, usize)]) -> Self {
        let mut m = ConfusionMatrix::new(class_names);
        for &(t, p) in pairs {
            m.record(t, p);
        }
        m
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// `trace / total`, or 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trace() as f64 / t as f64,
        }
    }

    /// Share of samples off the diagonal.
    pub fn off_diagonal_fraction(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => (t - self.trace()) as f64 / t as f64,
        }
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<u64> {
        (0..self.num_classes())
            .map(|c| self.counts.iter().map(|r| r[c]).sum())
            .collect()
    }

    /// Header row and first column carry class names; the corner cell is
    /// `true\predicted`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            out.push_str(name);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

/// Runs `predict` (image → class probabilities) over one split. `predict`
/// receives the sample's position in the dataset as well, for callers
/// whose predictions depend on it (e.g. seeded crops).
pub fn confusion_matrix_with(
    dataset: &LabeledDataset,
    split: Split,
    model_classes: &[String],
    mut predict: impl FnMut(usize, &Tensor) -> Result<Vec<f32>, EvalError>,
) -> Result<ConfusionMatrix, EvalError> {
    if dataset.class_names() != model_classes {
        return Err(EvalError::ClassMismatch {
            dataset: dataset.class_names().to_vec(),
            model: model_classes.to_vec(),
        });
    }
    let indices = dataset.indices(split);
    if indices.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    let mut m = ConfusionMatrix::new(model_classes.to_vec());
    for i in indices {
        let s = &dataset.samples()[i];
        let probs = predict(i, &s.image)?;
        m.record(s.label, ops::argmax(&probs));
    }
    Ok(m)
}

pub fn confusion_matrix(model: &Model, dataset: &LabeledDataset, split: Split) -> Result<ConfusionMatrix, EvalError> {
    confusion_matrix_with(dataset, split, model.class_names(), |_, image| {
        Ok(model.forward(image)?.into_data())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub accuracy: f64,
    /// Classes never predicted: precision is reported as 0.
    pub precision_undefined: Vec<bool>,
    /// Classes absent from the split: recall is reported as 0.
    pub recall_undefined: Vec<bool>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn report(matrix: &ConfusionMatrix) -> Report {
    let n = matrix.num_classes();
    let (cols, rows) = (matrix.column_sums(), matrix.row_sums());
    let (precision, precision_undefined) = (0..n).map(|c| ratio(matrix.counts[c][c], cols[c])).unzip();
    let (recall, recall_undefined) = (0..n).map(|c| ratio(matrix.counts[c][c], rows[c])).unzip();
    Report {
        classes: matrix.class_names.clone(),
        counts: matrix.counts.clone(),
        precision,
        recall,
        accuracy: matrix.accuracy(),
        precision_undefined,
        recall_undefined,
    }
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let width = self.classes.iter().map(String::len).max().unwrap_or(5).max(5);
        let mut out = format!("{:width$}  precision  recall  support\n", "class");
        for (i, name) in self.classes.iter().enumerate() {
            let flag = if self.precision_undefined[i] { "*" } else { " " };
            let support: u64 = self.counts[i].iter().sum();
            let _ = writeln!(
                out,
                "{name:width$}  {:>8.4}{flag}  {:>6.4}  {support:>7}",
                self.precision[i], self.recall[i]
            );
        }
        let total: u64 = self.counts.iter().flatten().sum();
        let _ = writeln!(out, "accuracy {:.4} over {total} samples", self.accuracy);
        if self.precision_undefined.iter().any(|&u| u) {
            out.push_str("* never predicted; precision undefined, shown as 0\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn two_by_two_arithmetic() {
        let m = ConfusionMatrix {
            class_names: names(2),
            counts: vec![vec![8, 2], vec![1, 9]],
        };
        let r = report(&m);
        assert_eq!(r.recall, [0.8, 0.9]);
        assert_eq!(r.precision, [8.0 / 9.0, 9.0 / 11.0]);
        assert_eq!(r.accuracy, 17.0 / 20.0);
        assert_eq!(m.off_diagonal_fraction(), 3.0 / 20.0);
    }

    #[test]
    fn diagonal_is_perfect() {
        let pairs: Vec<(usize, usize)> = (0..4).flat_map(|c| std::iter::repeat_n((c, c), 500)).collect();
        let m = ConfusionMatrix::from_pairs(names(4), &pairs);
        assert_eq!(m.total(), 2000);
        assert_eq!(m.row_sums(), [500; 4]);
        let r = report(&m);
        assert!(r.precision.iter().chain(&r.recall).all(|&v| v == 1.0));
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn zero_column_is_flagged_not_nan() {
        let m = ConfusionMatrix::from_pairs(names(3), &[(0, 0), (1, 0), (2, 0)]);
        assert_eq!(m.column_sums(), [3, 0, 0]);
        let r = report(&m);
        assert_eq!(r.precision, [1.0 / 3.0, 0.0, 0.0]);
        assert_eq!(r.precision_undefined, [false, true, true]);
        assert!(r.to_json().contains("\"precision_undefined\""));
        assert!(!r.to_json().contains("NaN"));
        assert!(r.to_text().contains('*'));
    }

    #[test]
    fn csv_layout() {
        let m = ConfusionMatrix {
            class_names: vec!["a".into(), "b".into()],
            counts: vec![vec![3, 1], vec![0, 4]],
        };
        assert_eq!(m.to_csv(), "true\\predicted,a,b\na,3,1\nb,0,4\n");
    }

    #[test]
    fn json_schema_keys() {
        let m = ConfusionMatrix::from_pairs(names(2), &[(0, 0), (1, 1)]);
        let v: serde_json::Value = serde_json::from_str(&report(&m).to_json()).unwrap();
        for key in ["classes", "counts", "precision", "recall", "accuracy"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}

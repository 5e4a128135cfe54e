//! Detection-side types and models: per-event CRNN branches, the
//! query-driven assembly that runs one branch per separated track, and the
//! mixture-input baselines.

pub(crate) mod model;

pub use model::{
    base2_model, branch_forward, crnn_forward, Base1Model, CrnnParams, SeparatorRef, TqSedModel,
    TsedBranch,
};

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Ordered list of event labels. The order fixes query order, output column
/// order and label-matrix columns for the lifetime of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventVocabulary {
    labels: Vec<String>,
}

impl EventVocabulary {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("vocabulary must not be empty".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if l.trim().is_empty() {
                return Err(Error::Config(format!("label {i} is blank")));
            }
            if labels[..i].contains(l) {
                return Err(Error::Config(format!("duplicate label '{l}'")));
            }
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// T x K frame activity values in [0, 1]; columns follow the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMatrix {
    pub values: Array2<f64>,
    pub frame_hop_seconds: f64,
    pub labels: Vec<String>,
}

impl SoftLabelMatrix {
    pub fn new(values: Array2<f64>, frame_hop_seconds: f64, labels: Vec<String>) -> Result<Self> {
        if values.ncols() != labels.len() {
            return Err(Error::Shape(format!(
                "{} columns for {} labels",
                values.ncols(),
                labels.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(
                "label values must lie in [0, 1]".into(),
            ));
        }
        if !(frame_hop_seconds > 0.0) {
            return Err(Error::InvalidInput("frame hop must be positive".into()));
        }
        Ok(Self {
            values,
            frame_hop_seconds,
            labels,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn classes(&self) -> usize {
        self.values.ncols()
    }

    /// CSV with a header row of class names; one row per frame.
    pub fn to_csv(&self) -> String {
        let mut out = self.labels.join(",");
        out.push('\n');
        for row in self.values.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path, frame_hop_seconds: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "empty label file".into(),
        })?;
        let labels: Vec<String> = header.split(',').map(|s| s.to_string()).collect();
        let k = labels.len();
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != k {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("{} cells, expected {k}", cells.len()),
                });
            }
            for c in cells {
                rows.push(c.parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })?);
            }
        }
        let t = rows.len() / k;
        let values = Array2::from_shape_vec((t, k), rows)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(values, frame_hop_seconds, labels)
    }
}

/// CRNN branch hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsedBranchConfig {
    /// Channels of each of the three convolution blocks; one of 16, 32, 64,
    /// 128 in the reference sweep, smaller values are allowed for desk runs.
    pub conv_filters: usize,
    pub n_mels: usize,
    /// Bidirectional GRU width per direction; `None` picks conv_filters / 2,
    /// which lands the 128-filter branch near the reference parameter count.
    pub gru_hidden: Option<usize>,
    pub dropout_rate: f64,
}

impl Default for TsedBranchConfig {
    fn default() -> Self {
        Self {
            conv_filters: 128,
            n_mels: 64,
            gru_hidden: None,
            dropout_rate: 0.2,
        }
    }
}

impl TsedBranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_filters == 0 {
            return Err(Error::Config("conv_filters must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.n_mels == 0 || !self.n_mels.is_multiple_of(64) {
            return Err(Error::Config(
                "n_mels must be a positive multiple of 64 (three 4x frequency pools)".into(),
            ));
        }
        Ok(())
    }

    pub fn gru_hidden_size(&self) -> usize {
        self.gru_hidden.unwrap_or((self.conv_filters / 2).max(1))
    }
}

/// Mean squared difference between two aligned score matrices.
pub fn mse_loss(pred: &SoftLabelMatrix, label: &SoftLabelMatrix) -> Result<f64> {
    if pred.values.dim() != label.values.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs label {:?}",
            pred.values.dim(),
            label.values.dim()
        )));
    }
    if pred.labels != label.labels {
        return Err(Error::Shape("vocabulary mismatch".into()));
    }
    let n = pred.values.len() as f64;
    Ok(pred
        .values
        .iter()
        .zip(label.values.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn vocabulary_rejects_duplicates_and_blanks() {
        assert!(EventVocabulary::new(vec![]).is_err());
        assert!(EventVocabulary::new(vec!["a".into(), "a".into()]).is_err());
        assert!(EventVocabulary::new(vec!["a".into(), " ".into()]).is_err());
        let v = EventVocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(v.index_of("b"), Some(1));
    }

    #[test]
    fn mse_examples() {
        let labels = vec!["a".to_string(), "b".to_string()];
        let x = SoftLabelMatrix::new(Array2::zeros((3, 2)), 0.2, labels.clone()).unwrap();
        let y = SoftLabelMatrix::new(Array2::ones((3, 2)), 0.2, labels.clone()).unwrap();
        assert_eq!(mse_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(mse_loss(&x, &y).unwrap(), 1.0);

        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = Array2::from_shape_fn((5, 2), |_| rng.random_range(0.0..1.0));
        let b = Array2::from_shape_fn((5, 2), |_| rng.random_range(0.0..1.0));
        let oracle: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 10.0;
        let got = mse_loss(
            &SoftLabelMatrix::new(a, 0.2, labels.clone()).unwrap(),
            &SoftLabelMatrix::new(b, 0.2, labels.clone()).unwrap(),
        )
        .unwrap();
        assert!((got - oracle).abs() < 1e-12);

        let other = SoftLabelMatrix::new(
            Array2::zeros((3, 2)),
            0.2,
            vec!["a".into(), "c".into()],
        )
        .unwrap();
        assert!(matches!(mse_loss(&x, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn label_csv_round_trip_is_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let values = Array2::from_shape_fn((7, 3), |_| rng.random_range(0.0..1.0));
        let m = SoftLabelMatrix::new(
            values,
            0.2,
            vec!["x".into(), "y".into(), "z".into()],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        m.write_csv(&path).unwrap();
        let back = SoftLabelMatrix::read_csv(&path, 0.2).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let bad = Array2::from_shape_vec((1, 1), vec![1.5]).unwrap();
        assert!(SoftLabelMatrix::new(bad, 0.2, vec!["a".into()]).is_err());
    }
}

//! Labelled datasets shared by synthesis and experiments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{Inputs, TokenBatch};
use crate::gufm::{GufmError, GufmLoss, GufmProblem};
use crate::numerics::{one_hot, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("samples {0} and {1} are identical inputs")]
    DuplicateSample(usize, usize),
    #[error("identical contexts at positions {0} and {1} carry different labels")]
    InconsistentLabels(usize, usize),
    #[error("{0}")]
    Invalid(String),
}

/// Inputs, labels and the partition of samples that must share a feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Inputs,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Equivalence classes of sample indices (identical contexts).
    pub classes: Vec<Vec<usize>>,
}

/// Shape summary written next to experiment outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub samples: usize,
    pub classes: usize,
    pub equivalence_classes: usize,
}

impl Dataset {
    /// Dense inputs (`d₀ × N`). Every column must be distinct.
    pub fn dense(x0: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if x0.cols() != labels.len() {
            return Err(DataError::Invalid(format!("{} columns but {} labels", x0.cols(), labels.len())));
        }
        check_labels(&labels, num_classes)?;
        let cols = x0.columns();
        for i in 0..cols.len() {
            for j in 0..i {
                if cols[i] == cols[j] {
                    return Err(DataError::DuplicateSample(j, i));
                }
            }
        }
        let classes = (0..labels.len()).map(|i| vec![i]).collect();
        Ok(Dataset { inputs: Inputs::Dense(x0), labels, num_classes, classes })
    }

    /// Token sequences with one label per position. Positions whose
    /// contexts coincide form one equivalence class and must agree on the label.
    pub fn tokens(batch: TokenBatch, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        batch.validate().map_err(|e| DataError::Invalid(e.to_string()))?;
        if batch.num_positions() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} positions but {} labels",
                batch.num_positions(),
                labels.len()
            )));
        }
        check_labels(&labels, num_classes)?;
        let contexts = batch.contexts();
        let mut classes: Vec<Vec<usize>> = Vec::new();
        let mut index: std::collections::HashMap<&[usize], usize> = std::collections::HashMap::new();
        for (i, ctx) in contexts.iter().enumerate() {
            match index.get(ctx) {
                Some(&c) => {
                    let first = classes[c][0];
                    if labels[first] != labels[i] {
                        return Err(DataError::InconsistentLabels(first, i));
                    }
                    classes[c].push(i);
                }
                None => {
                    index.insert(ctx, classes.len());
                    classes.push(vec![i]);
                }
            }
        }
        Ok(Dataset { inputs: Inputs::Tokens(batch), labels, num_classes, classes })
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn targets(&self) -> Matrix {
        one_hot(&self.labels, self.num_classes)
    }

    pub fn gufm_problem(&self, dim: usize, lambda: f64, loss: GufmLoss) -> Result<GufmProblem, GufmError> {
        GufmProblem::with_classes(self.labels.clone(), self.num_classes, dim, lambda, loss, self.classes.clone())
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            samples: self.num_samples(),
            classes: self.num_classes,
            equivalence_classes: self.classes.len(),
        }
    }
}

fn check_labels(labels: &[usize], k: usize) -> Result<(), DataError> {
    match labels.iter().find(|&&y| y >= k) {
        Some(y) => Err(DataError::Invalid(format!("label {y} out of range for {k} classes"))),
        None if labels.is_empty() => Err(DataError::Invalid("no samples".into())),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_rejects_duplicates() {
        let x = Matrix::from_columns(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(Dataset::dense(x, vec![0, 1], 2), Err(DataError::DuplicateSample(0, 1)));
    }

    #[test]
    fn identical_contexts_share_a_class() {
        let batch = TokenBatch { vocab: 2, context: 3, sequences: vec![vec![0, 1, 1], vec![0, 1]] };
        let ds = Dataset::tokens(batch.clone(), vec![0, 1, 0, 0, 1], 2).unwrap();
        assert_eq!(ds.classes, vec![vec![0, 3], vec![1, 4], vec![2]]);
        assert_eq!(
            Dataset::tokens(batch, vec![0, 1, 0, 1, 1], 2),
            Err(DataError::InconsistentLabels(0, 3))
        );
    }
}

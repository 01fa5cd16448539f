//! Generalized unconstrained features model.
//!
//! Features are free columns constrained to the zero-mean sphere of radius
//! `√d`, optionally tied together by an equivalence relation; the classifier
//! carries weight decay.

mod closed_form;
mod numeric;
mod stability;

use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::arch::{Container, LossKind};
use crate::metrics::{report, MetricsError, NcReport};
use crate::numerics::{cross_entropy, mse, norm, one_hot, Matrix};

pub use closed_form::{
    ce_phi, ce_rho, etf_directions, orthonormal_directions, unscaled_mse_norm, solve_ce_closed_form,
    solve_closed_form, solve_mse_closed_form, zero_sum_basis, mse_optimal_norm,
};
pub use numeric::{solve_numeric, solve_numeric_from, NumericOptions};
pub use stability::{aligned_distance, stability_probe, ProbeOptions, StabilityRow};

/// Threshold below which a centered class average counts as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GufmError {
    #[error("equivalence class {0} averages to the zero vector after centering")]
    DegenerateClass(usize),
    #[error("feature dimension {d} is too small: need at least {needed}")]
    DimensionTooSmall { d: usize, needed: usize },
    #[error("loss became non-finite")]
    NonFinite,
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

type LossFn = dyn Fn(&Matrix, &Matrix) -> (f64, Matrix) + Send + Sync;

/// Fit loss on the logits `WX`.
#[derive(Clone)]
pub enum GufmLoss {
    Ce,
    Mse,
    /// Any differentiable loss returning its value and gradient in the logits.
    Custom(Arc<LossFn>),
}

impl fmt::Debug for GufmLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GufmLoss::Ce => f.write_str("Ce"),
            GufmLoss::Mse => f.write_str("Mse"),
            GufmLoss::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl GufmLoss {
    pub fn eval(&self, logits: &Matrix, targets: &Matrix) -> (f64, Matrix) {
        match self {
            GufmLoss::Ce => cross_entropy(logits, targets),
            GufmLoss::Mse => mse(logits, targets),
            GufmLoss::Custom(f) => f(logits, targets),
        }
    }

    fn kind(&self) -> Option<LossKind> {
        match self {
            GufmLoss::Ce => Some(LossKind::Ce),
            GufmLoss::Mse => Some(LossKind::Mse),
            GufmLoss::Custom(_) => None,
        }
    }
}

impl From<LossKind> for GufmLoss {
    fn from(k: LossKind) -> Self {
        match k {
            LossKind::Ce => GufmLoss::Ce,
            LossKind::Mse => GufmLoss::Mse,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GufmProblem {
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// `K × N` one-hot targets.
    pub targets: Matrix,
    pub dim: usize,
    pub lambda: f64,
    pub loss: GufmLoss,
    /// Partition of the sample indices into equivalence classes.
    pub classes: Vec<Vec<usize>>,
}

impl GufmProblem {
    /// Problem with every sample in its own equivalence class.
    pub fn new(
        labels: Vec<usize>,
        num_classes: usize,
        dim: usize,
        lambda: f64,
        loss: GufmLoss,
    ) -> Result<Self, GufmError> {
        let classes = (0..labels.len()).map(|i| vec![i]).collect();
        Self::with_classes(labels, num_classes, dim, lambda, loss, classes)
    }

    /// `n` samples per class, labels in class order.
    pub fn balanced(
        num_classes: usize,
        per_class: usize,
        dim: usize,
        lambda: f64,
        loss: GufmLoss,
    ) -> Result<Self, GufmError> {
        let labels = (0..num_classes).flat_map(|k| std::iter::repeat_n(k, per_class)).collect();
        Self::new(labels, num_classes, dim, lambda, loss)
    }

    pub fn with_classes(
        labels: Vec<usize>,
        num_classes: usize,
        dim: usize,
        lambda: f64,
        loss: GufmLoss,
        classes: Vec<Vec<usize>>,
    ) -> Result<Self, GufmError> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(GufmError::Invalid(format!("λ must be positive, got {lambda}")));
        }
        if dim < 2 || num_classes == 0 || labels.is_empty() {
            return Err(GufmError::Invalid("need d ≥ 2, K ≥ 1 and at least one sample".into()));
        }
        let n = labels.len();
        if n % num_classes != 0 {
            return Err(GufmError::Invalid("classes must be balanced".into()));
        }
        let mut counts = vec![0usize; num_classes];
        for &y in &labels {
            if y >= num_classes {
                return Err(GufmError::Invalid(format!("label {y} out of range")));
            }
            counts[y] += 1;
        }
        if counts.iter().any(|&c| c != n / num_classes) {
            return Err(GufmError::Invalid("classes must be balanced".into()));
        }
        let mut seen = vec![false; n];
        for class in &classes {
            if class.is_empty() {
                return Err(GufmError::Invalid("empty equivalence class".into()));
            }
            for &i in class {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(GufmError::Invalid("equivalence classes must partition the samples".into()));
                }
            }
            if loss.kind().is_some() && class.iter().any(|&i| labels[i] != labels[class[0]]) {
                return Err(GufmError::Invalid("equivalence class mixes labels".into()));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(GufmError::Invalid("equivalence classes must cover every sample".into()));
        }
        let targets = one_hot(&labels, num_classes);
        Ok(GufmProblem { labels, num_classes, targets, dim, lambda, loss, classes })
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }
}

/// Averages every equivalence class, centers it and rescales it to norm `√d`.
pub fn project_feasible(x_raw: &Matrix, classes: &[Vec<usize>]) -> Result<Matrix, GufmError> {
    let d = x_raw.rows();
    let radius = (d as f64).sqrt();
    let mut x = Matrix::zeros(d, x_raw.cols());
    for (c, class) in classes.iter().enumerate() {
        let mut v = vec![0.0; d];
        for &j in class {
            for (i, vi) in v.iter_mut().enumerate() {
                *vi += x_raw[(i, j)];
            }
        }
        let mean = v.iter().sum::<f64>() / d as f64;
        v.iter_mut().for_each(|vi| *vi -= mean);
        let len = norm(&v);
        if len < DEGENERATE_NORM * class.len() as f64 {
            return Err(GufmError::DegenerateClass(c));
        }
        v.iter_mut().for_each(|vi| *vi *= radius / len);
        for &j in class {
            x.set_column(j, &v);
        }
    }
    Ok(x)
}

/// Fit loss on `WX` plus `(λ/2)‖W‖²`.
pub fn gufm_loss(w: &Matrix, x: &Matrix, problem: &GufmProblem) -> f64 {
    problem.loss.eval(&w.matmul(x), &problem.targets).0 + 0.5 * problem.lambda * w.frobenius_sq()
}

/// Largest violation of the feasibility constraints.
pub fn feasibility_error(x: &Matrix, classes: &[Vec<usize>]) -> f64 {
    let radius = (x.rows() as f64).sqrt();
    let mut worst: f64 = 0.0;
    for j in 0..x.cols() {
        let col = x.column(j);
        worst = worst.max((col.iter().sum::<f64>() / col.len() as f64).abs());
        worst = worst.max((norm(&col) - radius).abs());
    }
    for class in classes {
        for &j in &class[1..] {
            for i in 0..x.rows() {
                worst = worst.max((x[(i, j)] - x[(i, class[0])]).abs());
            }
        }
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GufmSolution {
    pub w: Matrix,
    pub x: Matrix,
    pub loss: f64,
    /// Collapse metrics; absent when they are undefined for the pair.
    pub certificate: Option<NcReport>,
}

impl GufmSolution {
    pub fn new(w: Matrix, x: Matrix, problem: &GufmProblem) -> Self {
        let loss = gufm_loss(&w, &x, problem);
        let kind = problem.loss.kind().unwrap_or(LossKind::Ce);
        let certificate = report(&w, &x, &problem.labels, kind, false).ok();
        GufmSolution { w, x, loss, certificate }
    }

    pub fn to_container(&self) -> Container {
        Container::from_tensors(
            vec![("gufm.w".into(), self.w.clone()), ("gufm.x".into(), self.x.clone())],
            serde_json::json!({ "loss": self.loss, "certificate": self.certificate }),
        )
    }
}

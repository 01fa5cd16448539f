//! Neural-collapse metrics of a classifier and its input features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::LossKind;
use crate::numerics::{dot, norm, Matrix};

/// Traces and Gram norms at or below this are treated as zero.
pub const DEGENERACY_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("classes are unbalanced: class {class} has {count} samples, expected {expected}")]
    Unbalanced { class: usize, count: usize, expected: usize },
    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("between-class variability is degenerate (trace {0:e})")]
    DegenerateBetweenClass(f64),
    #[error("classifier Gram matrix is zero")]
    ZeroGram,
    #[error("zero vector: {0}")]
    ZeroVector(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Class means and variability matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    /// `d × K` class means stacked column-wise.
    pub means: Matrix,
    pub global_mean: Vec<f64>,
    pub sigma_w: Matrix,
    pub sigma_b: Matrix,
}

impl ClassStats {
    pub fn class_mean(&self, k: usize) -> Vec<f64> {
        self.means.column(k)
    }
}

/// Exact empirical moments for balanced labels.
pub fn class_statistics(
    features: &Matrix,
    labels: &[usize],
    num_classes: usize,
) -> Result<ClassStats, MetricsError> {
    let (d, n_total) = features.shape();
    if labels.len() != n_total {
        return Err(MetricsError::Shape(format!("{} labels for {n_total} samples", labels.len())));
    }
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(MetricsError::LabelOutOfRange { label: y, classes: num_classes });
        }
        counts[y] += 1;
    }
    let expected = n_total / num_classes.max(1);
    if let Some(class) = counts.iter().position(|&c| c != expected || c == 0) {
        return Err(MetricsError::Unbalanced { class, count: counts[class], expected });
    }
    let mut means = Matrix::zeros(d, num_classes);
    for (j, &y) in labels.iter().enumerate() {
        for i in 0..d {
            means[(i, y)] += features[(i, j)];
        }
    }
    let means = means.scale(1.0 / expected as f64);
    let global_mean: Vec<f64> = (0..d).map(|i| means.row_slice(i).iter().sum::<f64>() / num_classes as f64).collect();

    let mut sigma_w = Matrix::zeros(d, d);
    for (j, &y) in labels.iter().enumerate() {
        let diff: Vec<f64> = (0..d).map(|i| features[(i, j)] - means[(i, y)]).collect();
        outer_add(&mut sigma_w, &diff);
    }
    let mut sigma_b = Matrix::zeros(d, d);
    for k in 0..num_classes {
        let diff: Vec<f64> = (0..d).map(|i| means[(i, k)] - global_mean[i]).collect();
        outer_add(&mut sigma_b, &diff);
    }
    Ok(ClassStats {
        means,
        global_mean,
        sigma_w: sigma_w.scale(1.0 / n_total as f64),
        sigma_b: sigma_b.scale(1.0 / num_classes as f64),
    })
}

fn outer_add(acc: &mut Matrix, v: &[f64]) {
    for (a, &va) in v.iter().enumerate() {
        for (b, &vb) in v.iter().enumerate() {
            acc[(a, b)] += va * vb;
        }
    }
}

/// `tr Σ_W / tr Σ_B`.
pub fn nc1(stats: &ClassStats) -> Result<f64, MetricsError> {
    let between = stats.sigma_b.trace();
    if between <= DEGENERACY_TOL {
        return Err(MetricsError::DegenerateBetweenClass(between));
    }
    Ok(stats.sigma_w.trace() / between)
}

/// Reference frame for the NC2A distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EtfForm {
    /// `I − 𝟙𝟙ᵀ/K`, the Gram matrix of a simplex ETF.
    #[default]
    Centered,
    /// `I − 𝟙𝟙ᵀ` taken literally, which has a zero diagonal.
    Literal,
}

pub fn etf_matrix(k: usize, form: EtfForm) -> Matrix {
    let off = match form {
        EtfForm::Centered => 1.0 / k as f64,
        EtfForm::Literal => 1.0,
    };
    Matrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { 0.0 } - off)
}

/// Optimal `c ≥ 0` and the relative distance `min_c ‖G − cE‖ / ‖G‖`.
pub fn scaled_distance(gram: &Matrix, reference: &Matrix) -> Result<(f64, f64), MetricsError> {
    let g_norm = gram.frobenius();
    if g_norm <= DEGENERACY_TOL {
        return Err(MetricsError::ZeroGram);
    }
    let ee = reference.frobenius_sq();
    let c = if ee > 0.0 { (gram.dot(reference) / ee).max(0.0) } else { 0.0 };
    let mut diff = gram.clone();
    diff.axpy(-c, reference);
    Ok((c, diff.frobenius() / g_norm))
}

pub fn nc2a(w: &Matrix) -> Result<f64, MetricsError> {
    nc2a_with(w, EtfForm::Centered)
}

pub fn nc2a_with(w: &Matrix, form: EtfForm) -> Result<f64, MetricsError> {
    let gram = w.matmul_t(w);
    Ok(scaled_distance(&gram, &etf_matrix(w.rows(), form))?.1)
}

pub fn nc2b(w: &Matrix) -> Result<f64, MetricsError> {
    let gram = w.matmul_t(w);
    Ok(scaled_distance(&gram, &Matrix::identity(w.rows()))?.1)
}

/// One minus the mean cosine between each sample and its class's classifier row.
pub fn nc3(w: &Matrix, features: &Matrix, labels: &[usize]) -> Result<f64, MetricsError> {
    if w.cols() != features.rows() || labels.len() != features.cols() {
        return Err(MetricsError::Shape("classifier, features and labels disagree".into()));
    }
    let mut total = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        if y >= w.rows() {
            return Err(MetricsError::LabelOutOfRange { label: y, classes: w.rows() });
        }
        let x = features.column(j);
        let row = w.row_slice(y);
        let (nx, nw) = (norm(&x), norm(row));
        if nx == 0.0 {
            return Err(MetricsError::ZeroVector(format!("feature column {j}")));
        }
        if nw == 0.0 {
            return Err(MetricsError::ZeroVector(format!("classifier row {y}")));
        }
        total += dot(&x, row) / (nx * nw);
    }
    Ok(1.0 - total / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nc2Kind {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NcReport {
    pub nc1: f64,
    pub nc2a: f64,
    pub nc2b: f64,
    pub nc3: f64,
    pub which_nc2: Nc2Kind,
}

impl NcReport {
    /// The NC2 variant that applies to the loss and classifier in use.
    pub fn nc2(&self) -> f64 {
        match self.which_nc2 {
            Nc2Kind::A => self.nc2a,
            Nc2Kind::B => self.nc2b,
        }
    }

    /// Largest of NC1, the applicable NC2 and NC3.
    pub fn max_selected(&self) -> f64 {
        self.nc1.max(self.nc2()).max(self.nc3)
    }
}

/// All four metrics; NC2B is the applicable NC2 only for bias-free MSE.
pub fn report(
    w: &Matrix,
    features: &Matrix,
    labels: &[usize],
    loss: LossKind,
    last_bias: bool,
) -> Result<NcReport, MetricsError> {
    let stats = class_statistics(features, labels, w.rows())?;
    Ok(NcReport {
        nc1: nc1(&stats)?,
        nc2a: nc2a(w)?,
        nc2b: nc2b(w)?,
        nc3: nc3(w, features, labels)?,
        which_nc2: if loss == LossKind::Mse && !last_bias { Nc2Kind::B } else { Nc2Kind::A },
    })
}

/// Decimal with 17 significant digits, enough to round-trip any `f64`.
pub fn format_sig17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

pub const CSV_HEADER: [&str; 7] = ["depth", "seed", "loss", "nc1", "nc2a", "nc2b", "nc3"];

/// One CSV record: depth, seed, loss, nc1, nc2a, nc2b, nc3.
pub fn csv_record(depth: usize, seed: u64, loss: f64, r: &NcReport) -> Vec<String> {
    let mut out = vec![depth.to_string(), seed.to_string()];
    out.extend([loss, r.nc1, r.nc2a, r.nc2b, r.nc3].map(format_sig17));
    out
}

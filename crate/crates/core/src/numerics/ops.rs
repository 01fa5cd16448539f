//! Column-wise primitives shared by the tape and the closed-form code paths.

use super::{Matrix, NumericsError};

/// Variance stabilizer used while training.
pub const TRAIN_LN_EPS: f64 = 1e-5;

/// How LayerNorm treats the variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LnMode {
    /// Adds `eps` to the variance; never fails.
    Train { eps: f64 },
    /// No stabilizer. Output columns have norm exactly `√d`; a constant
    /// column is an error.
    Exact,
}

impl LnMode {
    pub fn train() -> Self {
        LnMode::Train { eps: TRAIN_LN_EPS }
    }

    pub fn eps(self) -> f64 {
        match self {
            LnMode::Train { eps } => eps,
            LnMode::Exact => 0.0,
        }
    }
}

/// Per-column statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LnCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

/// Centers every column and divides by its population standard deviation.
pub fn layer_norm(x: &Matrix, mode: LnMode) -> Result<LnCache, NumericsError> {
    let (d, n) = x.shape();
    let mut normalized = Matrix::zeros(d, n);
    let mut inv_std = Vec::with_capacity(n);
    for j in 0..n {
        let col = x.column(j);
        let mean = col.iter().sum::<f64>() / d as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let denom = var + mode.eps();
        if !(denom > 0.0) {
            return Err(NumericsError::ZeroVariance { column: j });
        }
        let s = 1.0 / denom.sqrt();
        for (i, v) in col.iter().enumerate() {
            normalized[(i, j)] = (v - mean) * s;
        }
        inv_std.push(s);
    }
    Ok(LnCache { normalized, inv_std })
}

/// Gradient of LayerNorm given the cached forward pass.
pub fn layer_norm_backward(cache: &LnCache, upstream: &Matrix) -> Matrix {
    let (d, n) = upstream.shape();
    let mut out = Matrix::zeros(d, n);
    for j in 0..n {
        let g = upstream.column(j);
        let xh = cache.normalized.column(j);
        let mean_g = g.iter().sum::<f64>() / d as f64;
        let mean_gx = g.iter().zip(&xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for i in 0..d {
            out[(i, j)] = cache.inv_std[j] * (g[i] - mean_g - xh[i] * mean_gx);
        }
    }
    out
}

/// Column-stochastic causal attention weights.
///
/// Entry `(i, j)` is the weight position `j` puts on position `i`; rows
/// `i > j` are masked and come out as exact zeros.
pub fn causal_softmax(scores: &Matrix) -> Matrix {
    let (c, c2) = scores.shape();
    assert_eq!(c, c2, "attention scores must be square");
    let mut out = Matrix::zeros(c, c);
    for j in 0..c {
        let max = (0..=j).map(|i| scores[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for i in 0..=j {
            let e = (scores[(i, j)] - max).exp();
            out[(i, j)] = e;
            total += e;
        }
        for i in 0..=j {
            out[(i, j)] /= total;
        }
    }
    out
}

/// Backward of [`causal_softmax`] given its output.
pub fn causal_softmax_backward(probs: &Matrix, upstream: &Matrix) -> Matrix {
    let c = probs.rows();
    let mut out = Matrix::zeros(c, c);
    for j in 0..c {
        let inner: f64 = (0..=j).map(|i| probs[(i, j)] * upstream[(i, j)]).sum();
        for i in 0..=j {
            out[(i, j)] = probs[(i, j)] * (upstream[(i, j)] - inner);
        }
    }
    out
}

/// Builds a `K × N` one-hot label matrix.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Matrix {
    let mut y = Matrix::zeros(num_classes, labels.len());
    for (j, &k) in labels.iter().enumerate() {
        y[(k, j)] = 1.0;
    }
    y
}

/// Mean over columns of `-log softmax(logits)[true class]`, with the
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &Matrix, targets: &Matrix) -> (f64, Matrix) {
    assert_eq!(logits.shape(), targets.shape(), "cross entropy shape mismatch");
    let (k, n) = logits.shape();
    let mut grad = Matrix::zeros(k, n);
    let mut total = 0.0;
    for j in 0..n {
        let max = (0..k).map(|i| logits[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = (0..k).map(|i| (logits[(i, j)] - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        for i in 0..k {
            let p = (logits[(i, j)] - log_z).exp();
            let y = targets[(i, j)];
            total -= y * (logits[(i, j)] - log_z);
            grad[(i, j)] = (p - y) / n as f64;
        }
    }
    (total / n as f64, grad)
}

/// `‖logits − targets‖²_F / (2N)` and its gradient.
pub fn mse(logits: &Matrix, targets: &Matrix) -> (f64, Matrix) {
    assert_eq!(logits.shape(), targets.shape(), "mse shape mismatch");
    let n = logits.cols() as f64;
    let diff = logits.sub(targets);
    (diff.frobenius_sq() / (2.0 * n), diff.scale(1.0 / n))
}

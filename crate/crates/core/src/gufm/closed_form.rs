//! Collapsed optima for cross-entropy and squared loss.

use super::{GufmError, GufmLoss, GufmProblem, GufmSolution};
use crate::numerics::{dot, Matrix};

/// Orthonormal basis (`d × (d−1)`) of the hyperplane `𝟙ᵀx = 0`, obtained by
/// Gram–Schmidt on the projected standard basis.
pub fn zero_sum_basis(d: usize) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d.saturating_sub(1));
    for k in 0..d {
        if basis.len() + 1 == d {
            break;
        }
        let mut v: Vec<f64> = (0..d).map(|i| if i == k { 1.0 } else { 0.0 } - 1.0 / d as f64).collect();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(vi, bi)| *vi -= c * bi);
            }
        }
        let len = dot(&v, &v).sqrt();
        if len > 1e-8 {
            basis.push(v.into_iter().map(|vi| vi / len).collect());
        }
    }
    Matrix::from_columns(&basis)
}

/// `K` unit rows in the zero-sum hyperplane of `ℝ^d` with pairwise inner
/// products `−1/(K−1)`.
pub fn etf_directions(k: usize, d: usize) -> Result<Matrix, GufmError> {
    if k < 2 || d < k {
        return Err(GufmError::DimensionTooSmall { d, needed: k.max(2) });
    }
    let qk = zero_sum_basis(k);
    let qd = zero_sum_basis(d);
    let scale = (k as f64 / (k as f64 - 1.0)).sqrt();
    let mut u = Matrix::zeros(k, d);
    for row in 0..k {
        // Coordinates of the centered basis vector e_row − 𝟙/K in the basis of ℝ^K.
        let coords: Vec<f64> = (0..k - 1).map(|c| scale * qk[(row, c)]).collect();
        for i in 0..d {
            u[(row, i)] = (0..k - 1).map(|c| qd[(i, c)] * coords[c]).sum();
        }
    }
    Ok(u)
}

/// `K` orthonormal rows in the zero-sum hyperplane of `ℝ^d`.
pub fn orthonormal_directions(k: usize, d: usize) -> Result<Matrix, GufmError> {
    if d < k + 1 {
        return Err(GufmError::DimensionTooSmall { d, needed: k + 1 });
    }
    let q = zero_sum_basis(d);
    Ok(Matrix::from_fn(k, d, |r, i| q[(i, r)]))
}

/// Classifier row norm minimizing `½(1 − z√d)² + (λK/2)z²`.
pub fn mse_optimal_norm(d: usize, k: usize, lambda: f64) -> f64 {
    let d = d as f64;
    d.sqrt() / (d + lambda * k as f64)
}

/// The row norm `1/(√d(1+λK))`, which drops a factor of `d` relative to the optimum.
/// It coincides with [`mse_optimal_norm`] only when `d = 1`.
pub fn unscaled_mse_norm(d: usize, k: usize, lambda: f64) -> f64 {
    1.0 / ((d as f64).sqrt() * (1.0 + lambda * k as f64))
}

fn features_from(directions: &Matrix, labels: &[usize]) -> Matrix {
    let d = directions.cols();
    let radius = (d as f64).sqrt();
    Matrix::from_fn(d, labels.len(), |i, j| radius * directions[(labels[j], i)])
}

/// Orthonormal zero-sum classifier rows scaled by the optimal norm; every
/// feature is `√d` times its class's row direction.
pub fn solve_mse_closed_form(problem: &GufmProblem) -> Result<GufmSolution, GufmError> {
    if !matches!(problem.loss, GufmLoss::Mse) {
        return Err(GufmError::Invalid("closed form applies to squared loss only".into()));
    }
    let u = orthonormal_directions(problem.num_classes, problem.dim)?;
    let z = mse_optimal_norm(problem.dim, problem.num_classes, problem.lambda);
    let x = features_from(&u, &problem.labels);
    Ok(GufmSolution::new(u.scale(z), x, problem))
}

/// `log(1 + (K−1)e^{−ρ√d K/(K−1)}) + (λK/2)ρ²`.
pub fn ce_phi(rho: f64, d: usize, k: usize, lambda: f64) -> f64 {
    let kf = k as f64;
    let a = (d as f64).sqrt() * kf / (kf - 1.0);
    ((kf - 1.0) * (-a * rho).exp()).ln_1p() + 0.5 * lambda * kf * rho * rho
}

fn ce_phi_prime(rho: f64, d: usize, k: usize, lambda: f64) -> f64 {
    let kf = k as f64;
    let a = (d as f64).sqrt() * kf / (kf - 1.0);
    let e = (kf - 1.0) * (-a * rho).exp();
    -a * e / (1.0 + e) + lambda * kf * rho
}

/// Minimizer of [`ce_phi`] by golden-section search to `1e−12` in `ρ`.
pub fn ce_rho(d: usize, k: usize, lambda: f64) -> f64 {
    let mut hi = 1.0;
    while ce_phi_prime(hi, d, k, lambda) <= 0.0 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let f = |r: f64| ce_phi(r, d, k, lambda);
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > 1e-12 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

/// Closed-form optimum for cross-entropy or MSE; custom losses have none.
pub fn solve_closed_form(problem: &GufmProblem) -> Result<GufmSolution, GufmError> {
    match problem.loss {
        GufmLoss::Ce => solve_ce_closed_form(problem),
        GufmLoss::Mse => solve_mse_closed_form(problem),
        GufmLoss::Custom(_) => Err(GufmError::Invalid("custom losses need the numeric solver".into())),
    }
}

/// Simplex-ETF classifier scaled by the optimal `ρ`; every feature is `√d`
/// times its class's direction.
pub fn solve_ce_closed_form(problem: &GufmProblem) -> Result<GufmSolution, GufmError> {
    if !matches!(problem.loss, GufmLoss::Ce) {
        return Err(GufmError::Invalid("closed form applies to cross-entropy only".into()));
    }
    let u = etf_directions(problem.num_classes, problem.dim)?;
    let rho = ce_rho(problem.dim, problem.num_classes, problem.lambda);
    let x = features_from(&u, &problem.labels);
    Ok(GufmSolution::new(u.scale(rho), x, problem))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gufm::{feasibility_error, gufm_loss};

    #[test]
    fn bases_are_orthonormal_and_zero_sum() {
        for d in 2..7 {
            let q = zero_sum_basis(d);
            assert_eq!(q.shape(), (d, d - 1));
            assert!(q.t_matmul(&q).sub(&Matrix::identity(d - 1)).max_abs() < 1e-14);
            assert!(Matrix::filled(1, d, 1.0).matmul(&q).max_abs() < 1e-14);
        }
        let u = etf_directions(4, 6).unwrap();
        let g = u.matmul_t(&u);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { -1.0 / 3.0 };
                assert!((g[(i, j)] - want).abs() < 1e-14);
            }
        }
        assert!(etf_directions(4, 3).is_err());
        assert!(orthonormal_directions(3, 3).is_err());
    }

    #[test]
    fn mse_optimum_norms() {
        // Printed formula at (4, 2, 0.25) and the actual minimizer.
        assert!((unscaled_mse_norm(4, 2, 0.25) - 1.0 / 3.0).abs() < 1e-15);
        assert!((mse_optimal_norm(4, 2, 0.25) - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(unscaled_mse_norm(1, 3, 0.2), mse_optimal_norm(1, 3, 0.2));
        assert!(mse_optimal_norm(4, 2, 1e9) < 1e-8);

        let p = GufmProblem::balanced(2, 2, 4, 0.25, GufmLoss::Mse).unwrap();
        let sol = solve_mse_closed_form(&p).unwrap();
        for k in 0..2 {
            let row = sol.w.row(k);
            assert!((dot(&row, &row).sqrt() - 4.0 / 9.0).abs() < 1e-15);
        }
        assert!(feasibility_error(&sol.x, &p.classes) < 1e-14);
        let cert = sol.certificate.unwrap();
        assert!(cert.nc1 < 1e-10 && cert.nc2b < 1e-10 && cert.nc3 < 1e-10);
        // ½(1 − z√d)² + λK z²/2 at z = 4/9.
        let z: f64 = 4.0 / 9.0;
        let want = 0.5 * (1.0 - 2.0 * z).powi(2) + 0.25 * z * z;
        assert!((sol.loss - want).abs() < 1e-15);
    }

    #[test]
    fn ce_optimum() {
        let p = GufmProblem::balanced(4, 2, 8, 0.05, GufmLoss::Ce).unwrap();
        let sol = solve_ce_closed_form(&p).unwrap();
        let rho = ce_rho(8, 4, 0.05);
        assert!((sol.loss - ce_phi(rho, 8, 4, 0.05)).abs() < 1e-13);
        let cert = sol.certificate.unwrap();
        assert!(cert.nc1 < 1e-10 && cert.nc2a < 1e-10 && cert.nc3 < 1e-10);
        // Large λ drives ρ to 0 and the loss to log K.
        let rho_big = ce_rho(8, 4, 1e8);
        assert!(rho_big < 1e-7);
        assert!((ce_phi(rho_big, 8, 4, 1e8) - 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn scaling_the_classifier_only_hurts() {
        for loss in [GufmLoss::Ce, GufmLoss::Mse] {
            let p = GufmProblem::balanced(3, 2, 6, 0.1, loss.clone()).unwrap();
            let sol = match loss {
                GufmLoss::Ce => solve_ce_closed_form(&p),
                _ => solve_mse_closed_form(&p),
            }
            .unwrap();
            for t in 1..=40 {
                let c = 0.05 * t as f64;
                if (c - 1.0).abs() < 1e-9 {
                    continue;
                }
                assert!(gufm_loss(&sol.w.scale(c), &sol.x, &p) > sol.loss, "c = {c}");
            }
        }
    }
}

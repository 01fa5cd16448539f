//! Empirical stability of near-optimal solutions: how far can a feasible
//! pair wander from the optimum set while losing at most `ε`?

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    gufm_loss, project_feasible, solve_ce_closed_form, solve_mse_closed_form, zero_sum_basis,
    GufmError, GufmLoss, GufmProblem, GufmSolution,
};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeOptions {
    /// Random perturbation directions per `ε`.
    pub directions: usize,
    /// Largest step explored along a direction.
    pub t_max: f64,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions { directions: 64, t_max: 10.0, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub epsilon: f64,
    /// Largest aligned distance among the sampled `ε`-optimal pairs.
    pub distance: f64,
    /// Disagreement between the two halves of the direction sample.
    pub noise: f64,
}

/// Frobenius distance from `(w, x)` to the orbit of `(w_opt, x_opt)` under
/// orthogonal maps of the zero-sum hyperplane, via orthogonal Procrustes on
/// the stacked rows `[W; Xᵀ]`.
pub fn aligned_distance(w: &Matrix, x: &Matrix, w_opt: &Matrix, x_opt: &Matrix) -> f64 {
    let d = w.cols();
    let q = zero_sum_basis(d);
    let a = stack(w, x);
    let b = stack(w_opt, x_opt);
    let aq = a.matmul(&q);
    let bq = b.matmul(&q);
    // Part of `a` along 𝟙, which no rotation of the hyperplane can reach.
    let off_plane = a.sub(&aq.matmul_t(&q)).frobenius_sq();
    let m = bq.t_matmul(&aq).to_nalgebra();
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("U requested"), svd.v_t.expect("Vᵀ requested"));
    let r = Matrix::from_nalgebra(&(u * v_t));
    (aq.sub(&bq.matmul(&r)).frobenius_sq() + off_plane).sqrt()
}

fn stack(w: &Matrix, x: &Matrix) -> Matrix {
    let xt = x.transpose();
    let mut data = w.data().to_vec();
    data.extend_from_slice(xt.data());
    Matrix::from_vec(w.rows() + xt.rows(), w.cols(), data).expect("stacked shape")
}

fn closed_form(problem: &GufmProblem) -> Result<GufmSolution, GufmError> {
    match problem.loss {
        GufmLoss::Ce => solve_ce_closed_form(problem),
        GufmLoss::Mse => solve_mse_closed_form(problem),
        GufmLoss::Custom(_) => Err(GufmError::Invalid("no closed-form optimum for a custom loss".into())),
    }
}

/// For each `ε`, walks from the closed-form optimum along random directions
/// until the loss gap first exceeds `ε` and records the largest aligned
/// distance reached while the gap was still within `ε`.
pub fn stability_probe(
    problem: &GufmProblem,
    epsilons: &[f64],
    options: &ProbeOptions,
) -> Result<Vec<StabilityRow>, GufmError> {
    let opt = closed_form(problem)?;
    let (k, d, n) = (problem.num_classes, problem.dim, problem.num_samples());
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let directions: Vec<(Matrix, Matrix)> = (0..options.directions.max(2))
        .map(|_| {
            let dw = Matrix::from_fn(k, d, |_, _| StandardNormal.sample(&mut rng));
            let dx = Matrix::from_fn(d, n, |_, _| StandardNormal.sample(&mut rng));
            let len = (dw.frobenius_sq() + dx.frobenius_sq()).sqrt();
            (dw.scale(1.0 / len), dx.scale(1.0 / len))
        })
        .collect();
    let point = |dir: &(Matrix, Matrix), t: f64| -> Result<(Matrix, Matrix), GufmError> {
        let mut w = opt.w.clone();
        w.axpy(t, &dir.0);
        let mut x = opt.x.clone();
        x.axpy(t, &dir.1);
        Ok((w, project_feasible(&x, &problem.classes)?))
    };
    let gap = |p: &(Matrix, Matrix)| gufm_loss(&p.0, &p.1, problem) - opt.loss;

    epsilons
        .iter()
        .map(|&eps| {
            let per_direction: Vec<f64> = directions
                .par_iter()
                .map(|dir| -> Result<f64, GufmError> {
                    if eps <= 0.0 {
                        return Ok(0.0);
                    }
                    let (mut lo, mut hi) = (0.0, 1e-6);
                    while hi < options.t_max && gap(&point(dir, hi)?) <= eps {
                        lo = hi;
                        hi *= 1.5;
                    }
                    if hi >= options.t_max && gap(&point(dir, options.t_max)?) <= eps {
                        lo = options.t_max;
                    } else {
                        for _ in 0..60 {
                            let mid = 0.5 * (lo + hi);
                            if gap(&point(dir, mid)?) <= eps {
                                lo = mid;
                            } else {
                                hi = mid;
                            }
                        }
                    }
                    let (w, x) = point(dir, lo)?;
                    Ok(aligned_distance(&w, &x, &opt.w, &opt.x))
                })
                .collect::<Result<_, _>>()?;
            let half = per_direction.len() / 2;
            let max = |s: &[f64]| s.iter().copied().fold(0.0, f64::max);
            Ok(StabilityRow {
                epsilon: eps,
                distance: max(&per_direction),
                noise: (max(&per_direction[..half]) - max(&per_direction[half..])).abs(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alignment_removes_rotations() {
        let p = GufmProblem::balanced(3, 2, 6, 0.1, GufmLoss::Ce).unwrap();
        let opt = solve_ce_closed_form(&p).unwrap();
        // A rotation in the plane of two zero-sum basis vectors.
        let q = zero_sum_basis(6);
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let mut rot = Matrix::identity(6);
        let (u, v) = (q.column(0), q.column(2));
        for i in 0..6 {
            for j in 0..6 {
                rot[(i, j)] += (c - 1.0) * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j]);
            }
        }
        let w = opt.w.matmul_t(&rot);
        let x = rot.matmul(&opt.x);
        assert!(w.sub(&opt.w).max_abs() > 1e-2);
        assert!(aligned_distance(&w, &x, &opt.w, &opt.x) < 1e-12);
        let shifted = opt.w.add(&Matrix::filled(3, 6, 0.1));
        let dist = aligned_distance(&shifted, &opt.x, &opt.w, &opt.x);
        assert!((dist - (18.0f64 * 0.01).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn distances_shrink_with_epsilon() {
        let p = GufmProblem::balanced(2, 2, 4, 0.25, GufmLoss::Mse).unwrap();
        let eps: Vec<f64> = (0..7).map(|i| 1e-2 / 2f64.powi(i)).chain([0.0]).collect();
        let rows = stability_probe(&p, &eps, &ProbeOptions { directions: 24, ..Default::default() }).unwrap();
        assert_eq!(rows.last().unwrap().distance, 0.0);
        for pair in rows.windows(2) {
            assert!(pair[1].distance <= pair[0].distance + 2.0 * pair[0].noise.max(pair[1].noise));
        }
    }
}

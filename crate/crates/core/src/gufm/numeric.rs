//! Projected gradient descent, an optimizer-agnostic reference for the
//! closed forms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{project_feasible, GufmError, GufmProblem, GufmSolution};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericOptions {
    pub restarts: usize,
    pub steps: usize,
    /// Step size at iteration `t` is `base_step/√(t+1)`.
    pub base_step: f64,
    /// Extra iterations at the constant step `base_step` after the decaying
    /// phase.
    pub polish_steps: usize,
    pub seed: u64,
}

impl Default for NumericOptions {
    fn default() -> Self {
        NumericOptions { restarts: 8, steps: 4000, base_step: 0.1, polish_steps: 20_000, seed: 0 }
    }
}

/// Best of `restarts` projected-gradient runs from random feasible starts.
/// Restarts run in parallel; the result depends only on `options.seed`.
pub fn solve_numeric(problem: &GufmProblem, options: &NumericOptions) -> Result<GufmSolution, GufmError> {
    let runs: Vec<Result<GufmSolution, GufmError>> = (0..options.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(r as u64);
            let (k, d, n) = (problem.num_classes, problem.dim, problem.num_samples());
            let w = Matrix::from_fn(k, d, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z / (d as f64).sqrt()
            });
            let raw = Matrix::from_fn(d, n, |_, _| StandardNormal.sample(&mut rng));
            let x = project_feasible(&raw, &problem.classes)?;
            solve_numeric_from(problem, w, x, options)
        })
        .collect();
    let mut best: Option<GufmSolution> = None;
    for run in runs {
        let sol = run?;
        if best.as_ref().is_none_or(|b| sol.loss < b.loss) {
            best = Some(sol);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Projected gradient descent from `(w, x)`; returns the lowest-loss
/// feasible iterate.
///
/// The feature step is the per-sample gradient (the averaged loss's
/// gradient times `N`) times `d`. Feature curvature scales like `‖W‖²`,
/// which is `O(1/d)` near the optimum, so an unscaled step crawls.
pub fn solve_numeric_from(
    problem: &GufmProblem,
    mut w: Matrix,
    x: Matrix,
    options: &NumericOptions,
) -> Result<GufmSolution, GufmError> {
    let mut x = project_feasible(&x, &problem.classes)?;
    let n = problem.num_samples() as f64;
    let d = problem.dim as f64;
    let objective = |w: &Matrix, x: &Matrix| -> (f64, Matrix) {
        let (fit, g) = problem.loss.eval(&w.matmul(x), &problem.targets);
        (fit + 0.5 * problem.lambda * w.frobenius_sq(), g)
    };
    let (mut loss, mut g) = objective(&w, &x);
    let mut best = (loss, w.clone(), x.clone());
    for t in 0..options.steps + options.polish_steps {
        if !loss.is_finite() {
            return Err(GufmError::NonFinite);
        }
        let eta = if t < options.steps {
            options.base_step / ((t + 1) as f64).sqrt()
        } else {
            options.base_step
        };
        let mut grad_w = g.matmul_t(&x);
        grad_w.axpy(problem.lambda, &w);
        let grad_x = w.t_matmul(&g);
        w.axpy(-eta, &grad_w);
        let mut moved = x.clone();
        moved.axpy(-eta * n * d, &grad_x);
        x = project_feasible(&moved, &problem.classes)?;
        (loss, g) = objective(&w, &x);
        if loss < best.0 {
            best = (loss, w.clone(), x.clone());
        }
    }
    if !loss.is_finite() {
        return Err(GufmError::NonFinite);
    }
    let (_, w, x) = best;
    Ok(GufmSolution::new(w, x, problem))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gufm::{feasibility_error, solve_ce_closed_form, solve_mse_closed_form, GufmLoss};

    #[test]
    fn mse_matches_closed_form() {
        let p = GufmProblem::balanced(2, 2, 4, 0.25, GufmLoss::Mse).unwrap();
        let exact = solve_mse_closed_form(&p).unwrap();
        let num = solve_numeric(&p, &NumericOptions::default()).unwrap();
        assert!(num.loss >= exact.loss - 1e-6);
        assert!((num.loss - exact.loss).abs() < 1e-6, "{} vs {}", num.loss, exact.loss);
        assert!(feasibility_error(&num.x, &p.classes) < 1e-10);
    }

    #[test]
    fn ce_output_collapses() {
        let p = GufmProblem::balanced(3, 2, 8, 0.05, GufmLoss::Ce).unwrap();
        let num = solve_numeric(&p, &NumericOptions::default()).unwrap();
        let exact = solve_ce_closed_form(&p).unwrap();
        assert!(num.loss >= exact.loss - 1e-6);
        let cert = num.certificate.unwrap();
        assert!(cert.nc1 < 1e-3 && cert.nc2a < 1e-3 && cert.nc3 < 1e-3, "{cert:?}");
    }

    #[test]
    fn optimum_is_stationary() {
        let p = GufmProblem::balanced(3, 2, 6, 0.1, GufmLoss::Mse).unwrap();
        let exact = solve_mse_closed_form(&p).unwrap();
        let opts = NumericOptions { steps: 200, polish_steps: 0, ..NumericOptions::default() };
        let out = solve_numeric_from(&p, exact.w.clone(), exact.x.clone(), &opts).unwrap();
        assert!(out.w.sub(&exact.w).max_abs() < 1e-8);
        assert!(out.x.sub(&exact.x).max_abs() < 1e-8);
    }

    #[test]
    fn deterministic_given_seed() {
        let p = GufmProblem::balanced(2, 2, 4, 0.25, GufmLoss::Ce).unwrap();
        let opts = NumericOptions { steps: 300, polish_steps: 0, restarts: 3, ..NumericOptions::default() };
        assert_eq!(solve_numeric(&p, &opts).unwrap(), solve_numeric(&p, &opts).unwrap());
    }
}

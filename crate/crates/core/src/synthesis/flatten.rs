//! Rotating a GUFM optimum within its orbit so the target vectors have no
//! strongly negative entries.
//!
//! Stage-2 layers act on a group member through `σ(·)` of an affine map whose
//! coordinates are proportional to `1 + cm·h̄ᵢ` near the cap boundary. Targets
//! with entries well below `−1` get clipped there. Any orthogonal map that
//! fixes `𝟙` leaves the GUFM loss unchanged, so we pick a flat representative.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::gufm::zero_sum_basis;
use crate::numerics::{dot, Matrix};

fn score(rot: &Matrix, targets: &[Vec<f64>]) -> f64 {
    targets
        .iter()
        .map(|h| {
            let r = rot.matmul(&Matrix::column_vector(h));
            let (lo, hi) = r.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            lo - 0.01 * hi
        })
        .fold(f64::INFINITY, f64::min)
}

/// Gram–Schmidt on a Gaussian matrix.
fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for c in &cols {
                let p = dot(&v, c);
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
            }
        }
        let len = dot(&v, &v).sqrt();
        if len > 1e-6 {
            cols.push(v.into_iter().map(|a| a / len).collect());
        }
    }
    Matrix::from_columns(&cols)
}

/// `Q M Qᵀ + 𝟙𝟙ᵀ/d` for the zero-sum basis `Q`.
fn lift(m: &Matrix, q: &Matrix) -> Matrix {
    let d = q.rows();
    let mut r = q.matmul(m).matmul_t(q);
    for i in 0..d {
        for j in 0..d {
            r[(i, j)] += 1.0 / d as f64;
        }
    }
    r
}

/// Orthogonal `d × d` map fixing `𝟙` that maximizes the smallest entry of
/// the rotated targets (ties broken toward a small largest entry): a random
/// search over `trials` rotations refined by random Givens moves.
/// Deterministic in `seed`; `trials == 0` returns the identity.
pub fn flatten_rotation(targets: &[Vec<f64>], trials: usize, seed: u64) -> Matrix {
    let d = targets.first().map_or(0, Vec::len);
    if trials == 0 || d < 3 || targets.is_empty() {
        return Matrix::identity(d);
    }
    let q = zero_sum_basis(d);
    let n = d - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_m = Matrix::identity(n);
    let mut best = score(&lift(&best_m, &q), targets);
    for _ in 0..trials {
        let m = random_orthogonal(n, &mut rng);
        let s = score(&lift(&m, &q), targets);
        if s > best {
            (best, best_m) = (s, m);
        }
    }
    let mut step = 0.2;
    for it in 0..trials {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        if i == j {
            continue;
        }
        let theta = step * rng.sample::<f64, _>(StandardNormal);
        let mut m = best_m.clone();
        let (s, c) = theta.sin_cos();
        for r in 0..n {
            let (a, b) = (m[(r, i)], m[(r, j)]);
            m[(r, i)] = c * a - s * b;
            m[(r, j)] = s * a + c * b;
        }
        let sc = score(&lift(&m, &q), targets);
        if sc > best {
            (best, best_m) = (sc, m);
        }
        if it % 200 == 199 {
            step *= 0.7;
        }
    }
    lift(&best_m, &q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gufm::etf_directions;

    #[test]
    fn rotation_is_orthogonal_and_fixes_ones() {
        let u = etf_directions(3, 8).unwrap();
        let targets: Vec<Vec<f64>> = (0..3).map(|k| u.row(k).iter().map(|v| v * 8f64.sqrt()).collect()).collect();
        let r = flatten_rotation(&targets, 200, 1);
        assert!(r.t_matmul(&r).sub(&Matrix::identity(8)).max_abs() < 1e-12);
        let ones = r.matmul(&Matrix::filled(8, 1, 1.0));
        assert!(ones.sub(&Matrix::filled(8, 1, 1.0)).max_abs() < 1e-12);
        let before = score(&Matrix::identity(8), &targets);
        assert!(score(&r, &targets) >= before);
        assert_eq!(r, flatten_rotation(&targets, 200, 1));
    }
}

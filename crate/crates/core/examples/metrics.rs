//! Collapse metrics of a perfectly collapsed feature set and of a noisy one.

use collapse_lab::arch::LossKind;
use collapse_lab::gufm::etf_directions;
use collapse_lab::metrics::report;
use collapse_lab::numerics::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let (k, n, d) = (4, 5, 6);
    let labels: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, n)).collect();
    // Rows of a simplex ETF; every feature sits on its class row.
    let w = etf_directions(k, d).unwrap();
    let collapsed = Matrix::from_fn(d, k * n, |i, j| w[(labels[j], i)]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noisy = Matrix::from_fn(d, k * n, |i, j| collapsed[(i, j)] + rng.random_range(-0.3..0.3));

    for (name, x) in [("collapsed", &collapsed), ("noisy", &noisy)] {
        let r = report(&w, x, &labels, LossKind::Ce, false).unwrap();
        println!("{name:>9}: nc1 {:.3e}  nc2a {:.3e}  nc2b {:.3e}  nc3 {:.3e}", r.nc1, r.nc2a, r.nc2b, r.nc3);
    }
}

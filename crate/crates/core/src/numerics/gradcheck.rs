//! Central-difference gradient checking.

use super::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error.
    pub max_rel_error: f64,
    /// `(tensor, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Compares `analytic` against central differences of `value` at `theta`.
///
/// The per-coordinate error is `|g_ad − g_fd| / (|g_ad| + |g_fd| + 1e-12)`.
pub fn finite_diff_check(
    theta: &[Matrix],
    step: f64,
    value: impl Fn(&[Matrix]) -> f64,
    analytic: impl Fn(&[Matrix]) -> Vec<Matrix>,
) -> GradCheckReport {
    let grads = analytic(theta);
    assert_eq!(grads.len(), theta.len(), "one gradient per parameter tensor");
    let mut probe = theta.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0 };
    for (t, grad) in grads.iter().enumerate() {
        assert_eq!(grad.shape(), theta[t].shape(), "gradient shape mismatch");
        for k in 0..theta[t].data().len() {
            let base = theta[t].data()[k];
            probe[t].data_mut()[k] = base + step;
            let up = value(&probe);
            probe[t].data_mut()[k] = base - step;
            let down = value(&probe);
            probe[t].data_mut()[k] = base;

            let fd = (up - down) / (2.0 * step);
            let ad = grad.data()[k];
            let err = (ad - fd).abs() / (ad.abs() + fd.abs() + 1e-12);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((t, k));
            }
        }
    }
    report
}

//! Piecewise-geodesic curves on the zero-mean sphere of radius `√d`.

use serde::{Deserialize, Serialize};

use crate::numerics::{dot, norm};

/// Angle between two nonzero vectors.
pub fn angle(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Great-circle arc `cos θ · start + sin θ · dir` for `θ ∈ [0, angle]`,
/// where `start ⟂ dir` and both have norm `√d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeodesicArc {
    pub start: Vec<f64>,
    pub dir: Vec<f64>,
    pub angle: f64,
}

impl GeodesicArc {
    /// Shortest arc from `from` to `to`; `fallback` supplies the direction
    /// when the endpoints are antipodal.
    pub fn between(from: &[f64], to: &[f64], fallback: impl FnOnce() -> Vec<f64>) -> Self {
        let radius = norm(from);
        let c = dot(from, to) / (radius * norm(to));
        let mut dir: Vec<f64> = to.iter().zip(from).map(|(t, f)| t - c * f * norm(to) / radius).collect();
        let mut len = norm(&dir);
        if len < 1e-9 * radius {
            dir = fallback();
            let p = dot(&dir, from) / (radius * radius);
            dir.iter_mut().zip(from).for_each(|(v, f)| *v -= p * f);
            len = norm(&dir);
        }
        dir.iter_mut().for_each(|v| *v *= radius / len);
        GeodesicArc { start: from.to_vec(), dir, angle: c.clamp(-1.0, 1.0).acos() }
    }

    pub fn point(&self, theta: f64) -> Vec<f64> {
        let (s, c) = theta.sin_cos();
        self.start.iter().zip(&self.dir).map(|(a, b)| c * a + s * b).collect()
    }

    pub fn end(&self) -> Vec<f64> {
        self.point(self.angle)
    }

    /// `max_{θ ∈ [lo, hi]} yᵀ point(θ)` in closed form.
    pub fn max_dot(&self, y: &[f64], lo: f64, hi: f64) -> f64 {
        let a = dot(y, &self.start);
        let b = dot(y, &self.dir);
        let f = |t: f64| a * t.cos() + b * t.sin();
        let mut best = f(lo).max(f(hi));
        let peak = b.atan2(a);
        for k in -1..=2 {
            let t = peak + k as f64 * std::f64::consts::TAU;
            if t > lo && t < hi {
                best = best.max(a.hypot(b));
            }
        }
        best
    }
}

/// Chain of arcs parametrized by accumulated angle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub arcs: Vec<GeodesicArc>,
}

impl Curve {
    pub fn length(&self) -> f64 {
        self.arcs.iter().map(|a| a.angle).sum()
    }

    pub fn point(&self, tau: f64) -> Vec<f64> {
        let mut rest = tau.max(0.0);
        for (i, arc) in self.arcs.iter().enumerate() {
            if rest <= arc.angle || i + 1 == self.arcs.len() {
                return arc.point(rest.min(arc.angle));
            }
            rest -= arc.angle;
        }
        unreachable!("curve has at least one arc")
    }

    /// `max yᵀx` over curve points with parameter in `[lo, hi]`.
    pub fn max_dot(&self, y: &[f64], lo: f64, hi: f64) -> f64 {
        let mut offset = 0.0;
        let mut best = f64::NEG_INFINITY;
        for arc in &self.arcs {
            let (a, b) = ((lo - offset).max(0.0), (hi - offset).min(arc.angle));
            if a <= b {
                best = best.max(arc.max_dot(y, a, b));
            }
            offset += arc.angle;
        }
        best
    }

    /// Points spaced at most `step` apart in parameter over `[lo, hi]`,
    /// including arc junctions.
    pub fn samples(&self, lo: f64, hi: f64, step: f64) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        if hi < lo {
            return out;
        }
        let mut knots = vec![lo, hi];
        let mut offset = 0.0;
        for arc in &self.arcs {
            offset += arc.angle;
            if offset > lo && offset < hi {
                knots.push(offset);
            }
        }
        knots.sort_by(f64::total_cmp);
        for w in knots.windows(2) {
            let n = ((w[1] - w[0]) / step).ceil().max(1.0) as usize;
            for s in 0..n {
                out.push(self.point(w[0] + (w[1] - w[0]) * s as f64 / n as f64));
            }
        }
        out.push(self.point(hi));
        out
    }

    /// Number of junctions between arcs.
    pub fn corners(&self) -> usize {
        self.arcs.len().saturating_sub(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_point(v: &[f64]) -> Vec<f64> {
        let d = v.len() as f64;
        let mean = v.iter().sum::<f64>() / d;
        let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
        let n = norm(&c);
        c.iter().map(|x| x * d.sqrt() / n).collect()
    }

    #[test]
    fn arcs_stay_on_the_sphere_and_hit_the_target() {
        let a = sphere_point(&[1.0, 2.0, -0.5, 0.3, 0.0, 1.1]);
        let b = sphere_point(&[-1.0, 0.2, 0.5, 0.9, 0.4, -0.1]);
        let arc = GeodesicArc::between(&a, &b, || unreachable!());
        assert!(distance(&arc.end(), &b) < 1e-12);
        for t in 0..=10 {
            let p = arc.point(arc.angle * t as f64 / 10.0);
            assert!((norm(&p) - 6f64.sqrt()).abs() < 1e-12);
            assert!(p.iter().sum::<f64>().abs() < 1e-12);
        }
        assert!((arc.angle - angle(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn closed_form_max_matches_dense_scan() {
        let a = sphere_point(&[1.0, 2.0, -0.5, 0.3]);
        let b = sphere_point(&[-1.0, 0.2, 0.5, 0.9]);
        let y = sphere_point(&[0.3, -0.2, 0.9, 0.1]);
        let arc = GeodesicArc::between(&a, &b, || unreachable!());
        let scan = (0..=100_000)
            .map(|t| dot(&y, &arc.point(arc.angle * t as f64 / 100_000.0)))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((arc.max_dot(&y, 0.0, arc.angle) - scan).abs() < 1e-8);
    }

    #[test]
    fn antipodal_endpoints_use_fallback() {
        let a = sphere_point(&[1.0, -1.0, 0.0, 0.0]);
        let b: Vec<f64> = a.iter().map(|x| -x).collect();
        let arc = GeodesicArc::between(&a, &b, || vec![0.0, 0.0, 1.0, -1.0]);
        assert!((arc.angle - std::f64::consts::PI).abs() < 1e-12);
        assert!(distance(&arc.end(), &b) < 1e-12);
    }

    #[test]
    fn curves_concatenate() {
        let a = sphere_point(&[1.0, 2.0, -0.5, 0.3]);
        let w = sphere_point(&[0.0, -1.0, 2.0, 0.3]);
        let h = sphere_point(&[-1.0, 0.2, 0.5, 0.9]);
        let c = Curve {
            arcs: vec![
                GeodesicArc::between(&a, &w, || unreachable!()),
                GeodesicArc::between(&w, &h, || unreachable!()),
            ],
        };
        assert!(distance(&c.point(c.length()), &h) < 1e-12);
        assert!(distance(&c.point(c.arcs[0].angle), &w) < 1e-12);
        let scan = c.samples(0.0, c.length(), 1e-4).iter().map(|p| dot(&a, p)).fold(f64::NEG_INFINITY, f64::max);
        assert!((c.max_dot(&a, 0.0, c.length()) - scan).abs() < 1e-6);
        assert_eq!(c.corners(), 1);
    }
}

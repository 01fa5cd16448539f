//! Curve planning: one oriented curve per distinct sample from its embedded
//! position to its target, plus the margin `m` that keeps every moving
//! sample's activation half-space clear of all other samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::sphere::{angle, Curve, GeodesicArc};
use super::SynthesisError;
use crate::numerics::{dot, norm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanOptions {
    pub c: f64,
    pub floor: f64,
    /// Random-waypoint detours tried in total.
    pub detour_retries: usize,
    pub seed: u64,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions { c: 2.0, floor: 1e-6, detour_retries: 32, seed: 0 }
    }
}

/// Curve of one distinct sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    /// Dataset columns sharing this embedded point.
    pub members: Vec<usize>,
    pub label: usize,
    pub group: usize,
    pub start: Vec<f64>,
    pub target: Vec<f64>,
    pub curve: Curve,
    /// Curve parameter of `x̄`, the unique point with `x̄ᵀh = d(1−cm)`.
    pub bar_param: f64,
    pub bar_point: Vec<f64>,
    /// Starts inside the cap already and skips stage 1.
    pub parked: bool,
    pub detoured: bool,
}

/// Largest normalized inner products behind each condition, recorded for
/// the ledger (each must be at most `1 − m`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    /// Every arc is a great circle of the `√d` sphere.
    pub great_circles: bool,
    /// Largest `x_bᵀx/d` over earlier curves `x ∈ 𝒢_a`, `a < b`.
    pub later_start_vs_curve: f64,
    /// Largest `xᵀy/d` over `x ∈ 𝒢̄_b`, `y ∈ 𝒢_a \ 𝒢̄_a`, `a < b`.
    pub moving_vs_parked: f64,
    pub longest_angle: f64,
    /// `10cm`, at most `(d − max h̄ᵀh̄')/d`.
    pub cap_separation_lhs: f64,
    pub cap_separation_rhs: f64,
    /// Stage-2 layers of one group vanish on every other group's cap.
    pub stage2_exclusion: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePlan {
    pub dim: usize,
    pub samples: Vec<SamplePlan>,
    /// Distinct targets `h̄_j`.
    pub groups: Vec<Vec<f64>>,
    pub m: f64,
    pub c: f64,
    /// Curvature of a great circle of radius `√d`; detour corners are
    /// counted separately.
    pub curvature_bound: f64,
    pub corners: usize,
    pub detours: usize,
    pub conditions: ConditionSummary,
}

impl CurvePlan {
    pub fn group_members(&self, j: usize) -> Vec<usize> {
        (0..self.samples.len()).filter(|&s| self.samples[s].group == j).collect()
    }

    /// Sample ids in dataset-column order.
    pub fn sample_of_column(&self, n: usize) -> Vec<usize> {
        let mut map = vec![usize::MAX; n];
        for (s, p) in self.samples.iter().enumerate() {
            for &i in &p.members {
                map[i] = s;
            }
        }
        map
    }
}

/// `(x̄ parameter, starts parked)`, or `None` when the curve enters the cap
/// before its final arc.
fn bar_param(curve: &Curve, h: &[f64], cm: f64) -> Option<(f64, bool)> {
    let d = dot(h, h);
    let thr = d * (1.0 - cm);
    if dot(&curve.arcs[0].start, h) >= thr {
        return Some((0.0, true));
    }
    let last = curve.arcs.len() - 1;
    let mut offset = 0.0;
    for arc in &curve.arcs[..last] {
        if arc.max_dot(h, 0.0, arc.angle) >= thr {
            return None;
        }
        offset += arc.angle;
    }
    let theta_c = (1.0 - cm).acos();
    let arc = &curve.arcs[last];
    (arc.angle > theta_c).then(|| (offset + arc.angle - theta_c, false))
}

struct Candidate {
    curve: Curve,
    detoured: bool,
}

struct Planner<'a> {
    d: f64,
    starts: &'a [Vec<f64>],
    targets: &'a [Vec<f64>],
    groups: &'a [Vec<f64>],
    c: f64,
}

enum Violation {
    /// Curve to reroute.
    Curve(usize),
    /// Not fixable by rerouting.
    Global,
}

/// Coarsest sampling step along a curve; refined to keep the Lipschitz
/// slack below the gap `d·m(c−1)` between the cap and the margin.
const SAMPLE_STEP: f64 = 2e-3;

/// Grid index probed by detours while no margin works yet.
const PROBE_INDEX: usize = 12;

impl Planner<'_> {
    fn bars(&self, curves: &[Candidate], m: f64) -> Option<Vec<(f64, bool)>> {
        curves.iter().zip(self.targets).map(|(cv, h)| bar_param(&cv.curve, h, self.c * m)).collect()
    }

    fn later_start_vs_curve(&self, curves: &[Candidate], a: usize, b: usize) -> f64 {
        let cv = &curves[a].curve;
        cv.max_dot(&self.starts[b], 0.0, cv.length())
    }

    /// Conservative `max xᵀy` for `x ∈ 𝒢̄_b`, `y ∈ 𝒢_a \ 𝒢̄_a`: dense samples of
    /// `y`, closed-form maximum over `x`, padded by the Lipschitz slack.
    fn moving_vs_parked(&self, curves: &[Candidate], bars: &[(f64, bool)], a: usize, b: usize, m: f64) -> f64 {
        let ca = &curves[a].curve;
        let cb = &curves[b].curve;
        let step = SAMPLE_STEP.min(m * (self.c - 1.0) / 8.0);
        ca.samples(bars[a].0, ca.length(), step)
            .iter()
            .map(|y| cb.max_dot(y, 0.0, bars[b].0))
            .fold(f64::NEG_INFINITY, f64::max)
            + 0.5 * self.d * step
    }

    fn stage2_exclusion(&self, m: f64) -> bool {
        let cm = self.c * m;
        let theta_c = (1.0 - cm).acos();
        let rhs = self.d * (1.0 - 2.0 * cm) - 1e-9 * self.d;
        for (j, hj) in self.groups.iter().enumerate() {
            let (lo, hi) = hj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            for (jj, hjj) in self.groups.iter().enumerate() {
                if j == jj {
                    continue;
                }
                let phi = angle(hj, hjj);
                let t_max = self.d * (phi - theta_c).max(0.0).cos();
                let t_min = self.d * (phi + theta_c).min(std::f64::consts::PI).cos();
                for t in [t_min, t_max] {
                    for hi_ in [lo, hi] {
                        if t * (1.0 + cm * hi_) > rhs {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }

    fn check(&self, curves: &[Candidate], cond2: &[Vec<f64>], m: f64) -> Result<(), Violation> {
        if !self.stage2_exclusion(m) {
            return Err(Violation::Global);
        }
        let Some(bars) = self.bars(curves, m) else {
            let bad = curves
                .iter()
                .zip(self.targets)
                .position(|(cv, h)| bar_param(&cv.curve, h, self.c * m).is_none())
                .expect("some curve failed");
            return Err(Violation::Curve(bad));
        };
        let thr = self.d * (1.0 - m);
        let n = curves.len();
        for b in 0..n {
            for a in 0..b {
                if cond2[a][b] > thr {
                    return Err(Violation::Curve(a));
                }
            }
        }
        for b in 0..n {
            for a in 0..b {
                if self.moving_vs_parked(curves, &bars, a, b, m) > thr {
                    return Err(Violation::Curve(b));
                }
            }
        }
        Ok(())
    }

    /// Number of failing checks at margin `m`; `usize::MAX` for a global
    /// failure.
    fn violations(&self, curves: &[Candidate], cond2: &[Vec<f64>], m: f64) -> usize {
        if !self.stage2_exclusion(m) {
            return usize::MAX;
        }
        let cm = self.c * m;
        let bars: Vec<Option<(f64, bool)>> =
            curves.iter().zip(self.targets).map(|(cv, h)| bar_param(&cv.curve, h, cm)).collect();
        let mut count = bars.iter().filter(|b| b.is_none()).count();
        let thr = self.d * (1.0 - m);
        let n = curves.len();
        for b in 0..n {
            for a in 0..b {
                count += usize::from(cond2[a][b] > thr);
            }
        }
        if count == 0 {
            let bars: Vec<(f64, bool)> = bars.into_iter().flatten().collect();
            for b in 0..n {
                for a in 0..b {
                    count += usize::from(self.moving_vs_parked(curves, &bars, a, b, m) > thr);
                }
            }
        }
        count
    }

    fn cond2_table(&self, curves: &[Candidate]) -> Vec<Vec<f64>> {
        let n = curves.len();
        (0..n)
            .map(|a| (0..n).map(|b| if a < b { self.later_start_vs_curve(curves, a, b) } else { f64::NEG_INFINITY }).collect())
            .collect()
    }

    /// Largest grid margin satisfying every condition, with its grid index.
    fn best_margin(&self, curves: &[Candidate], cap: f64, floor: f64) -> Option<(f64, usize)> {
        let cond2 = self.cond2_table(curves);
        (0..)
            .map(|k| (cap * 2f64.powf(-(k as f64) / 4.0), k))
            .take_while(|&(m, _)| m >= floor)
            .find(|&(m, _)| self.check(curves, &cond2, m).is_ok())
    }
}

fn random_sphere_point(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mean = v.iter().sum::<f64>() / d as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let s = (d as f64).sqrt() / norm(&v);
    v.iter_mut().for_each(|x| *x *= s);
    v
}

/// Plans curves from the columns of `x1` to the columns of `targets`.
///
/// Columns with identical embedded points become one plan sample; samples
/// are ordered by `(label, first column)`. Curves start as great-circle
/// arcs; when the margin grid stalls below its cap, the curve blamed by the
/// first failing condition is rerouted through a random waypoint orthogonal
/// to its target, and the detour is kept only if the margin improves (or,
/// before any margin works, if fewer checks fail).
pub fn plan_curves(
    x1: &Matrix,
    targets: &Matrix,
    labels: &[usize],
    options: &PlanOptions,
) -> Result<CurvePlan, SynthesisError> {
    let (d, n) = x1.shape();
    if targets.shape() != (d, n) || labels.len() != n {
        return Err(SynthesisError::Invalid("features, targets and labels disagree in shape".into()));
    }
    if options.c <= 1.0 {
        return Err(SynthesisError::Invalid("c must exceed 1".into()));
    }
    let df = d as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (labels[i], i));
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut starts: Vec<Vec<f64>> = Vec::new();
    let mut sample_targets: Vec<Vec<f64>> = Vec::new();
    for &i in &order {
        let col = x1.column(i);
        let tgt = targets.column(i);
        if let Some(s) = starts.iter().position(|s| *s == col) {
            if sample_targets[s] != tgt {
                return Err(SynthesisError::Invalid(format!("column {i} shares a feature but not a target")));
            }
            members[s].push(i);
        } else {
            starts.push(col);
            sample_targets.push(tgt);
            members.push(vec![i]);
        }
    }
    for v in starts.iter().chain(&sample_targets) {
        if v.iter().sum::<f64>().abs() > 1e-9 * df || (dot(v, v) - df).abs() > 1e-9 * df {
            return Err(SynthesisError::Invalid("points must lie on the zero-sum sphere of radius √d".into()));
        }
    }
    let mut groups: Vec<Vec<f64>> = Vec::new();
    let group_of: Vec<usize> = sample_targets
        .iter()
        .map(|h| match groups.iter().position(|g| super::distance(g, h) <= 1e-9 * df.sqrt()) {
            Some(j) => j,
            None => {
                groups.push(h.clone());
                groups.len() - 1
            }
        })
        .collect();

    let max_group_dot = (0..groups.len())
        .flat_map(|j| (0..groups.len()).filter(move |&k| k != j).map(move |k| (j, k)))
        .map(|(j, k)| dot(&groups[j], &groups[k]))
        .fold(-df, f64::max);
    let cap_rhs = (df - max_group_dot) / df;
    // Every curve passes through its own start, so the closest pair of
    // starts bounds the margin no matter how curves are routed.
    let max_start_dot = (0..starts.len())
        .flat_map(|b| (0..b).map(move |a| (a, b)))
        .map(|(a, b)| dot(&starts[a], &starts[b]))
        .fold(-df, f64::max);
    let cap = (cap_rhs / (10.0 * options.c)).min((df - max_start_dot) / df);

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let geodesic = |from: &[f64], to: &[f64], rng: &mut ChaCha8Rng| {
        GeodesicArc::between(from, to, || random_sphere_point(d, rng))
    };
    let mut curves: Vec<Candidate> = starts
        .iter()
        .zip(&sample_targets)
        .map(|(s, h)| Candidate { curve: Curve { arcs: vec![geodesic(s, h, &mut rng)] }, detoured: false })
        .collect();
    let planner = Planner { d: df, starts: &starts, targets: &sample_targets, groups: &groups, c: options.c };

    let grid = |k: usize| cap * 2f64.powf(-(k as f64) / 4.0);
    let mut best = planner.best_margin(&curves, cap, options.floor);
    let mut detours = 0;
    for _ in 0..options.detour_retries {
        let probe = match best {
            Some((_, 0)) => break,
            Some((_, k)) => grid(k - 1),
            None => grid(PROBE_INDEX).max(options.floor),
        };
        let cond2 = planner.cond2_table(&curves);
        let s = match planner.check(&curves, &cond2, probe) {
            Err(Violation::Curve(s)) => s,
            _ => break,
        };
        let count = planner.violations(&curves, &cond2, probe);
        // Waypoints orthogonal to the target give the final arc a fresh
        // approach direction.
        let h = &sample_targets[s];
        let mut w = random_sphere_point(d, &mut rng);
        let p = dot(&w, h) / df;
        w.iter_mut().zip(h).for_each(|(a, b)| *a -= p * b);
        let scale = df.sqrt() / norm(&w);
        w.iter_mut().for_each(|a| *a *= scale);
        let first = geodesic(&starts[s], &w, &mut rng);
        let second = geodesic(&w, h, &mut rng);
        let previous = std::mem::replace(
            &mut curves[s],
            Candidate { curve: Curve { arcs: vec![first, second] }, detoured: true },
        );
        let trial = planner.best_margin(&curves, cap, options.floor);
        let better = match (trial, best) {
            (Some((_, k)), Some((_, kb))) => k < kb,
            (Some(_), None) => true,
            (None, None) => planner.violations(&curves, &planner.cond2_table(&curves), probe) < count,
            _ => false,
        };
        if better {
            best = trial;
            detours += 1;
        } else {
            curves[s] = previous;
        }
    }
    let (m, _) = best.ok_or(SynthesisError::MarginBelowFloor { floor: options.floor })?;

    let bars = planner.bars(&curves, m).expect("checked at this margin");
    let cond2 = planner.cond2_table(&curves);
    let ns = curves.len();
    let mut summary = ConditionSummary {
        great_circles: curves.iter().all(|c| {
            c.curve.arcs.iter().all(|a| {
                dot(&a.start, &a.dir).abs() <= 1e-9 * df
                    && (dot(&a.start, &a.start) - df).abs() <= 1e-9 * df
                    && (dot(&a.dir, &a.dir) - df).abs() <= 1e-9 * df
            })
        }),
        later_start_vs_curve: f64::NEG_INFINITY,
        moving_vs_parked: f64::NEG_INFINITY,
        longest_angle: curves.iter().map(|c| c.curve.length()).fold(0.0, f64::max),
        cap_separation_lhs: 10.0 * options.c * m,
        cap_separation_rhs: cap_rhs,
        stage2_exclusion: planner.stage2_exclusion(m),
    };
    for b in 0..ns {
        for a in 0..b {
            summary.later_start_vs_curve = summary.later_start_vs_curve.max(cond2[a][b] / df);
            summary.moving_vs_parked = summary.moving_vs_parked.max(planner.moving_vs_parked(&curves, &bars, a, b, m) / df);
        }
    }
    let corners = curves.iter().map(|c| c.curve.corners()).sum();
    let samples = curves
        .into_iter()
        .enumerate()
        .map(|(s, cand)| {
            let (tau, parked) = bars[s];
            SamplePlan {
                members: members[s].clone(),
                label: labels[members[s][0]],
                group: group_of[s],
                start: starts[s].clone(),
                target: sample_targets[s].clone(),
                bar_point: if parked { starts[s].clone() } else { cand.curve.point(tau) },
                curve: cand.curve,
                bar_param: tau,
                parked,
                detoured: cand.detoured,
            }
        })
        .collect();
    Ok(CurvePlan {
        dim: d,
        samples,
        groups,
        m,
        c: options.c,
        curvature_bound: 1.0 / df.sqrt(),
        corners,
        detours,
        conditions: summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(v: &[f64]) -> Vec<f64> {
        let d = v.len() as f64;
        let mean = v.iter().sum::<f64>() / d;
        let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
        let s = d.sqrt() / norm(&c);
        c.iter().map(|x| x * s).collect()
    }

    #[test]
    fn cap_separation_for_two_antipodal_targets() {
        // max h̄ᵀh̄' = −d, so 10cm ≤ 2 and m ≤ 0.1 at c = 2.
        let h = sphere(&[1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        let g: Vec<f64> = h.iter().map(|v| -v).collect();
        let x1 = Matrix::from_columns(&[
            sphere(&[1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            sphere(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 1.0]),
        ]);
        let targets = Matrix::from_columns(&[h, g]);
        let plan = plan_curves(&x1, &targets, &[0, 1], &PlanOptions::default()).unwrap();
        assert!((plan.conditions.cap_separation_rhs - 2.0).abs() < 1e-12);
        assert!(plan.m <= 0.1 + 1e-15);
        assert!(plan.conditions.cap_separation_lhs <= plan.conditions.cap_separation_rhs + 1e-12);
    }

    #[test]
    fn antipodal_samples_with_orthogonal_targets() {
        let a = sphere(&[3.0, 1.0, -1.0, 0.5, 0.0, 0.2, -2.0, 0.7]);
        let b: Vec<f64> = a.iter().map(|v| -v).collect();
        let h1 = sphere(&[1.0, 1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        let h2 = sphere(&[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, -1.0, -1.0]);
        assert!(dot(&h1, &h2).abs() < 1e-12);
        let x1 = Matrix::from_columns(&[a, b]);
        let targets = Matrix::from_columns(&[h1, h2]);
        let plan = plan_curves(&x1, &targets, &[0, 1], &PlanOptions::default()).unwrap();
        assert!(plan.m > 0.0);
        let d = 8.0;
        // Dense check of the start-versus-curve condition.
        let (p0, p1) = (&plan.samples[0], &plan.samples[1]);
        for x in p0.curve.samples(0.0, p0.curve.length(), 1e-4) {
            assert!(dot(&p1.start, &x) <= d * (1.0 - plan.m) + 1e-9);
        }
        for x in p1.curve.samples(0.0, p1.bar_param, 1e-3) {
            for y in p0.curve.samples(p0.bar_param, p0.curve.length(), 1e-3) {
                assert!(dot(&x, &y) <= d * (1.0 - plan.m) + 1e-9);
            }
        }
        for p in &plan.samples {
            assert!((dot(&p.bar_point, &p.target) - d * (1.0 - plan.c * plan.m)).abs() < 1e-9);
            assert!(p.curve.length() <= 2.0 * std::f64::consts::PI);
        }
    }

    #[test]
    fn start_inside_cap_is_parked() {
        let h = sphere(&[1.0, -1.0, 0.5, -0.5]);
        let x = sphere(&[1.0, -1.0, 0.5, -0.49]);
        let g: Vec<f64> = h.iter().map(|v| -v).collect();
        let y = sphere(&[-1.0, 1.0, 0.3, -0.3]);
        let plan = plan_curves(
            &Matrix::from_columns(&[x.clone(), y]),
            &Matrix::from_columns(&[h, g]),
            &[0, 1],
            &PlanOptions::default(),
        )
        .unwrap();
        assert!(plan.samples[0].parked);
        assert_eq!(plan.samples[0].bar_param, 0.0);
        assert_eq!(plan.samples[0].bar_point, x);
    }

    #[test]
    fn identical_columns_share_a_sample() {
        let a = sphere(&[1.0, 2.0, 0.0, -1.0]);
        let b = sphere(&[0.0, -1.0, 2.0, 1.0]);
        let h = sphere(&[1.0, -1.0, 1.0, -1.0]);
        let g: Vec<f64> = h.iter().map(|v| -v).collect();
        let plan = plan_curves(
            &Matrix::from_columns(&[a.clone(), b, a]),
            &Matrix::from_columns(&[h.clone(), g, h]),
            &[0, 1, 0],
            &PlanOptions::default(),
        )
        .unwrap();
        assert_eq!(plan.samples.len(), 2);
        assert_eq!(plan.samples[0].members, vec![0, 2]);
        assert_eq!(plan.sample_of_column(3), vec![0, 1, 0]);
    }
}

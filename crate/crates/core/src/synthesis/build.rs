//! Layer formulas and full ResNet assemblies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::flatten::flatten_rotation;
use super::plan::{plan_curves, CurvePlan, PlanOptions};
use super::sphere::{angle, distance};
use super::{BlockOwner, BoundLedger, Contraction, Stage1Step, SynthesisConfig, SynthesisError};
use crate::arch::{Inputs, ResBlock, ResNetParams, Variant};
use crate::data::Dataset;
use crate::gufm::GufmSolution;
use crate::numerics::{layer_norm, LnMode, Matrix, NumericsError};

/// First layer `X₁ = LN(W₀X₀ + b₀)` and the separation it achieved.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Embedding {
    #[serde(skip)]
    pub w: Matrix,
    #[serde(skip)]
    pub b: Matrix,
    #[serde(skip)]
    pub x1: Matrix,
    pub attempts: usize,
    pub min_pairwise_distance: f64,
    pub min_target_distance: f64,
}

const SEPARATION: f64 = 1e-6;

fn min_pairwise(x: &Matrix) -> f64 {
    let cols = x.columns();
    let mut best = f64::INFINITY;
    for i in 0..cols.len() {
        for j in 0..i {
            best = best.min(distance(&cols[i], &cols[j]));
        }
    }
    best
}

fn min_cross(x: &Matrix, y: &Matrix) -> f64 {
    let (a, b) = (x.columns(), y.columns());
    a.iter().flat_map(|u| b.iter().map(move |v| distance(u, v))).fold(f64::INFINITY, f64::min)
}

/// Draws `W₀ ~ N(0, 1/d₀)` and `b₀ ~ N(0, 1)` until the embedded columns are
/// pairwise separated and away from every column of `avoid`.
pub fn embed_first_layer(
    x0: &Matrix,
    d: usize,
    avoid: &Matrix,
    seed: u64,
    retries: usize,
) -> Result<Embedding, SynthesisError> {
    if min_pairwise(x0) == 0.0 {
        return Err(SynthesisError::Invalid("input columns must be distinct".into()));
    }
    let d0 = x0.rows();
    for attempt in 0..retries.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        let scale = 1.0 / (d0 as f64).sqrt();
        let w = Matrix::from_fn(d, d0, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let b = Matrix::from_fn(d, 1, |_, _| rng.sample(StandardNormal));
        let Ok(cache) = layer_norm(&w.matmul(x0).add_column_broadcast(&b), LnMode::Exact) else {
            continue;
        };
        let x1 = cache.normalized;
        let pair = min_pairwise(&x1);
        let cross = min_cross(&x1, avoid);
        if pair > SEPARATION && cross > SEPARATION {
            return Ok(Embedding {
                w,
                b,
                x1,
                attempts: attempt + 1,
                min_pairwise_distance: pair,
                min_target_distance: cross,
            });
        }
    }
    Err(SynthesisError::CollisionPersists { attempts: retries.max(1) })
}

/// Stage-1 layer moving the sample at `x` by the chord
/// `αm√d/(2√(d+m²/4))` along the unit direction `direction`:
/// `W = α(𝟙 + (m/2)D)xᵀ/(√d·√(d+m²/4))`, `b = −(1−m/2)α√d/√(d+m²/4)·𝟙`.
pub fn build_stage1_layer(x: &[f64], direction: &[f64], m: f64, alpha: f64) -> (Matrix, Matrix) {
    let d = x.len() as f64;
    let r = (d + m * m / 4.0).sqrt();
    let w = Matrix::from_fn(x.len(), x.len(), |i, j| alpha * (1.0 + 0.5 * m * direction[i]) * x[j] / (d.sqrt() * r));
    let b = Matrix::filled(x.len(), 1, -(1.0 - 0.5 * m) * alpha * d.sqrt() / r);
    (w, b)
}

/// Stage-2 layer pulling every sample of the cap around `h̄` toward it:
/// `W = α(𝟙 + cm·h̄)h̄ᵀ/(‖𝟙 + cm·h̄‖√d)`, `b = −(1−2cm)α√d/‖𝟙 + cm·h̄‖·𝟙`.
pub fn build_stage2_layer(hbar: &[f64], m: f64, c: f64, alpha: f64) -> (Matrix, Matrix) {
    let d = hbar.len() as f64;
    let u: Vec<f64> = hbar.iter().map(|h| 1.0 + c * m * h).collect();
    let nu = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let w = Matrix::from_fn(hbar.len(), hbar.len(), |i, j| alpha * u[i] * hbar[j] / (nu * d.sqrt()));
    let b = Matrix::filled(hbar.len(), 1, -(1.0 - 2.0 * c * m) * alpha * d.sqrt() / nu);
    (w, b)
}

/// Two-layer block with the same map as the one-layer block `(w, b)` on the
/// columns of `inputs`: `W₁ = W/√α`, `b₁ = b/√α`, `W₂ = √α·P` with `P` the
/// projector onto the span of the hidden activations, `α = ‖W‖_F`.
pub fn rn2_block_from_rn1(w: &Matrix, b: &Matrix, inputs: &Matrix) -> ResBlock {
    let d = w.rows();
    let alpha = w.frobenius();
    if alpha == 0.0 {
        return ResBlock::Two {
            w1: Matrix::zeros(d, d),
            b1: b.clone(),
            w2: Matrix::zeros(d, d),
            b2: Matrix::zeros(d, 1),
        };
    }
    let root = alpha.sqrt();
    let w1 = w.scale(1.0 / root);
    let b1 = b.scale(1.0 / root);
    let hidden = w1.matmul(inputs).add_column_broadcast(&b1).map(|v| v.max(0.0));
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for col in hidden.columns() {
        let size = crate::numerics::norm(&col);
        if size == 0.0 {
            continue;
        }
        let mut v = col;
        for _ in 0..2 {
            for q in &basis {
                let p = crate::numerics::dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
            }
        }
        let rest = crate::numerics::norm(&v);
        if rest > 1e-10 * size {
            basis.push(v.into_iter().map(|a| a / rest).collect());
        }
    }
    let w2 = Matrix::from_fn(d, d, |i, j| root * basis.iter().map(|q| q[i] * q[j]).sum::<f64>());
    ResBlock::Two { w1, b1, w2, b2: Matrix::zeros(d, 1) }
}

/// Result of one block: first-layer pre-activations, branch output and the
/// post-LayerNorm stream, computed exactly as the forward pass does.
pub(super) struct Step {
    pub pre: Matrix,
    pub out: Matrix,
}

pub(super) fn apply_block(block: &ResBlock, x: &Matrix) -> Result<Step, NumericsError> {
    let (pre, delta) = match block {
        ResBlock::One { w, b } => {
            let pre = w.matmul(x).add_column_broadcast(b);
            let delta = pre.map(|v| v.max(0.0));
            (pre, delta)
        }
        ResBlock::Two { w1, b1, w2, b2 } => {
            let pre = w1.matmul(x).add_column_broadcast(b1);
            let delta = w2.matmul(&pre.map(|v| v.max(0.0))).add_column_broadcast(b2);
            (pre, delta)
        }
    };
    let mut out = layer_norm(&x.add(&delta), LnMode::Exact)?.normalized;
    for j in 0..delta.cols() {
        if (0..delta.rows()).all(|i| delta[(i, j)] == 0.0) {
            out.set_column(j, &x.column(j));
        }
    }
    Ok(Step { pre, out })
}

pub(super) fn block_sq_norm(block: &ResBlock) -> f64 {
    match block {
        ResBlock::One { w, .. } => w.frobenius_sq(),
        ResBlock::Two { w1, w2, .. } => w1.frobenius_sq() + w2.frobenius_sq(),
    }
}

/// Blocks of both stages, driven by the realized positions of the samples.
pub(super) struct Stages {
    pub blocks: Vec<ResBlock>,
    /// One-layer counterparts (identical to `blocks` for one-layer variants).
    pub reference: Vec<ResBlock>,
    pub ledger: BoundLedger,
}

/// Builds all stage blocks on the plan-sample columns `x1` (in plan order).
pub(super) fn build_stages(
    x1: &Matrix,
    plan: &CurvePlan,
    config: &SynthesisConfig,
    variant: Variant,
    block_offset: usize,
) -> Result<Stages, SynthesisError> {
    let d = plan.dim;
    let df = d as f64;
    let (m, c) = (plan.m, plan.c);
    let (l1, l2) = (config.l1, config.l2);
    let two = variant.two_layer_mlp();
    let r = (df + m * m / 4.0).sqrt();
    let mut x = x1.clone();
    let mut blocks = Vec::new();
    let mut reference = Vec::new();
    let mut owners = Vec::new();
    let mut steps = Vec::new();
    let mut stage1_alpha = Vec::new();
    let (mut stage1_sq, mut stage2_sq) = (0.0, 0.0);

    let mut push = |w: Matrix, b: Matrix, x: &mut Matrix, owner: BlockOwner| -> Result<Matrix, SynthesisError> {
        let one = ResBlock::One { w: w.clone(), b: b.clone() };
        let block = if two { rn2_block_from_rn1(&w, &b, x) } else { one.clone() };
        let step = apply_block(&block, x)?;
        let before = std::mem::replace(x, step.out);
        let sq = block_sq_norm(&block);
        blocks.push(block);
        reference.push(one);
        owners.push(owner);
        match owner {
            BlockOwner::Stage1 { .. } => stage1_sq += sq,
            BlockOwner::Stage2 { .. } => stage2_sq += sq,
            BlockOwner::Prologue => {}
        }
        Ok(before)
    };

    for (s, sp) in plan.samples.iter().enumerate() {
        let phi = sp.bar_param;
        let alpha = if sp.parked { 0.0 } else { 4.0 * df.sqrt() * phi / (l1 as f64 * m) };
        stage1_alpha.push(alpha);
        let chord = alpha * m * df.sqrt() / (2.0 * r);
        let mut tau = 0.0;
        let mut done = sp.parked;
        for layer in 0..l1 {
            let owner = BlockOwner::Stage1 { sample: s, layer, active: !done };
            if done {
                push(Matrix::zeros(d, d), Matrix::zeros(d, 1), &mut x, owner)?;
                continue;
            }
            let cur = x.column(s);
            let to_bar = distance(&cur, &sp.bar_point);
            let (next, next_tau, clamped) = if to_bar <= chord {
                (sp.bar_point.clone(), phi, true)
            } else {
                let (mut lo, mut hi) = (tau, phi);
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if distance(&sp.curve.point(mid), &cur) < chord {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                (sp.curve.point(hi), hi, false)
            };
            let len = distance(&next, &cur);
            if len == 0.0 {
                done = true;
                push(Matrix::zeros(d, d), Matrix::zeros(d, 1), &mut x, BlockOwner::Stage1 { sample: s, layer, active: false })?;
                continue;
            }
            let dir: Vec<f64> = next.iter().zip(&cur).map(|(a, b)| (a - b) / len).collect();
            let alpha_l = 2.0 * len * r / (m * df.sqrt());
            let (w, b) = build_stage1_layer(&cur, &dir, m, alpha_l);
            push(w, b, &mut x, owner)?;
            steps.push(Stage1Step {
                sample: s,
                layer,
                block: block_offset + s * l1 + layer,
                alpha: alpha_l,
                advance: angle(&cur, &x.column(s)),
                advance_bound: m * alpha_l / (4.0 * df.sqrt()),
                tau: next_tau,
                planned: next,
                clamped,
            });
            tau = next_tau;
            done = clamped;
        }
    }

    let alpha2 = 16.0 * df.sqrt() * (l2 as f64).ln() / (c * m * l2 as f64);
    let mut contractions = Vec::new();
    for (j, hbar) in plan.groups.iter().enumerate() {
        let members = plan.group_members(j);
        let initial: Vec<f64> = members.iter().map(|&s| angle(&x.column(s), hbar)).collect();
        for layer in 0..l2 {
            let (w, b) = build_stage2_layer(hbar, m, c, alpha2);
            push(w, b, &mut x, BlockOwner::Stage2 { group: j, layer })?;
        }
        let rate = (1.0 - alpha2 * c * m / (16.0 * df.sqrt())).powi(l2 as i32);
        for (&s, &b0) in members.iter().zip(&initial) {
            contractions.push(Contraction {
                group: j,
                sample: s,
                initial_angle: b0,
                final_angle: angle(&x.column(s), hbar),
                bound: 2.0 * b0 / l2 as f64,
                rate_bound: rate * b0,
            });
        }
    }

    let n = plan.samples.len();
    let (b1, b2) = BoundLedger::bounds(variant, d, n, l1, l2, config.lambda, m);
    let ledger = BoundLedger {
        variant,
        dim: d,
        samples: n,
        groups: plan.groups.len(),
        l1,
        l2,
        lambda: config.lambda,
        m,
        c,
        stage1_reg_sum: 0.5 * config.lambda * stage1_sq,
        stage1_bound: b1,
        stage2_reg_sum: 0.5 * config.lambda * stage2_sq,
        stage2_bound: b2,
        stage1_alpha,
        stage2_alpha: alpha2,
        steps,
        contractions,
        owners,
        gamma: None,
        prologue_reg_sum: None,
    };
    Ok(Stages { blocks, reference, ledger })
}

/// Target-flattening rotation, rotated classifier and rotated targets.
pub(super) fn rotated_solution(solution: &GufmSolution, config: &SynthesisConfig) -> (Matrix, Matrix, Matrix) {
    let mut distinct: Vec<Vec<f64>> = Vec::new();
    for col in solution.x.columns() {
        if !distinct.iter().any(|g| distance(g, &col) <= 1e-9) {
            distinct.push(col);
        }
    }
    let rot = flatten_rotation(&distinct, config.flatten_trials, config.seed);
    let w = solution.w.matmul_t(&rot);
    let h = rot.matmul(&solution.x);
    (rot, w, h)
}

pub(super) fn plan_options(config: &SynthesisConfig) -> PlanOptions {
    PlanOptions { c: config.c, floor: config.margin_floor, detour_retries: config.detour_retries, seed: config.seed }
}

/// Plan-sample columns of `x` (first member of each sample).
pub(super) fn sample_columns(x: &Matrix, plan: &CurvePlan) -> Matrix {
    Matrix::from_columns(&plan.samples.iter().map(|s| x.column(s.members[0])).collect::<Vec<_>>())
}

/// A synthesized ResNet together with everything needed to audit it.
#[derive(Clone, Debug)]
pub struct ResNetSynthesis {
    pub params: ResNetParams,
    pub plan: CurvePlan,
    pub ledger: BoundLedger,
    pub embedding: Embedding,
    /// Orthogonal map applied to the GUFM solution before planning.
    pub rotation: Matrix,
    /// Rotated targets, one column per dataset sample.
    pub targets: Matrix,
    /// One-layer counterparts of the residual blocks.
    pub reference_blocks: Vec<ResBlock>,
}

fn synthesize_resnet(
    dataset: &Dataset,
    solution: &GufmSolution,
    config: &SynthesisConfig,
    variant: Variant,
) -> Result<ResNetSynthesis, SynthesisError> {
    config.validate()?;
    let Inputs::Dense(x0) = &dataset.inputs else {
        return Err(SynthesisError::Invalid("ResNet synthesis needs dense inputs".into()));
    };
    let d = solution.x.rows();
    if solution.x.cols() != dataset.num_samples() || solution.w.shape() != (dataset.num_classes, d) {
        return Err(SynthesisError::Invalid("solution does not match the dataset".into()));
    }
    let (rotation, w_last, targets) = rotated_solution(solution, config);
    let embedding = embed_first_layer(x0, d, &targets, config.seed, config.embed_retries)?;
    let plan = plan_curves(&embedding.x1, &targets, &dataset.labels, &plan_options(config))?;
    let stages = build_stages(&sample_columns(&embedding.x1, &plan), &plan, config, variant, 0)?;
    let params = ResNetParams {
        embed_w: embedding.w.clone(),
        embed_b: embedding.b.clone(),
        blocks: stages.blocks,
        last_w: w_last,
        last_b: None,
    };
    Ok(ResNetSynthesis {
        params,
        plan,
        ledger: stages.ledger,
        embedding,
        rotation,
        targets,
        reference_blocks: stages.reference,
    })
}

/// One-linear-layer ResNet with `N·L₁ + K̄·L₂ + 1` blocks whose penultimate
/// features approach the (rotated) GUFM optimum.
pub fn synthesize_rn1(
    dataset: &Dataset,
    solution: &GufmSolution,
    config: &SynthesisConfig,
) -> Result<ResNetSynthesis, SynthesisError> {
    synthesize_resnet(dataset, solution, config, Variant::Rn1)
}

/// Two-layer variant of [`synthesize_rn1`]: every block reproduces the
/// one-layer block's map while splitting its weight across two layers.
pub fn synthesize_rn2(
    dataset: &Dataset,
    solution: &GufmSolution,
    config: &SynthesisConfig,
) -> Result<ResNetSynthesis, SynthesisError> {
    synthesize_resnet(dataset, solution, config, Variant::Rn2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(v: &[f64]) -> Vec<f64> {
        let d = v.len() as f64;
        let mean = v.iter().sum::<f64>() / d;
        let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
        let s = d.sqrt() / crate::numerics::norm(&c);
        c.iter().map(|x| x * s).collect()
    }

    #[test]
    fn stage1_post_activation_on_owner() {
        let x = sphere(&[1.0, 2.0, -1.0, 0.5, 0.0, -0.3]);
        let y = sphere(&[0.5, 2.0, -1.0, 0.1, 0.3, -0.3]);
        let mut dir: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
        let len = crate::numerics::norm(&dir);
        dir.iter_mut().for_each(|v| *v /= len);
        let (m, alpha) = (0.05, 0.7);
        let (w, b) = build_stage1_layer(&x, &dir, m, alpha);
        let post = w.matmul(&Matrix::column_vector(&x)).add_column_broadcast(&b).map(|v| v.max(0.0));
        let d = 6.0f64;
        let s = alpha * m * d.sqrt() / (2.0 * (d + m * m / 4.0).sqrt());
        for i in 0..6 {
            assert!((post[(i, 0)] - s * (1.0 + dir[i])).abs() < 1e-14);
        }
        assert!((w.frobenius() - alpha).abs() < 1e-12);
    }

    #[test]
    fn stage1_excludes_samples_beyond_the_margin() {
        let x = sphere(&[1.0, 2.0, -1.0, 0.5, 0.0, -0.3]);
        let z = sphere(&[-1.0, 0.0, 2.0, 0.5, 0.0, -0.3]);
        let d = 6.0;
        let m = 1.0 - crate::numerics::dot(&x, &z) / d - 1e-3;
        let dir = sphere(&[0.0, 1.0, 0.0, 0.0, 0.0, -1.0]).iter().map(|v| v / d.sqrt()).collect::<Vec<_>>();
        let (w, b) = build_stage1_layer(&x, &dir, m, 3.0);
        let pre = w.matmul(&Matrix::column_vector(&z)).add_column_broadcast(&b);
        assert!(pre.data().iter().all(|&v| v < 0.0));
    }

    #[test]
    fn stage2_shifts_members_along_target() {
        let h = sphere(&[1.0, -1.0, 0.5, -0.5, 0.2, -0.2]);
        let d = 6.0;
        let (m, c, alpha) = (0.02, 2.0, 1.5);
        let (w, b) = build_stage2_layer(&h, m, c, alpha);
        assert!((w.frobenius() - alpha).abs() < 1e-12);
        // A member on the cap boundary.
        let y = sphere(&[1.0, -0.9, 0.5, -0.5, 0.25, -0.2]);
        assert!(crate::numerics::dot(&y, &h) > d * (1.0 - c * m));
        let post = w.matmul(&Matrix::column_vector(&y)).add_column_broadcast(&b).map(|v| v.max(0.0));
        let mean = post.data().iter().sum::<f64>() / d;
        let centered: Vec<f64> = post.data().iter().map(|v| v - mean).collect();
        assert!(angle(&centered, &h) < 1e-9);
        // A far sample.
        let z: Vec<f64> = h.iter().map(|v| -v).collect();
        let pre = w.matmul(&Matrix::column_vector(&z)).add_column_broadcast(&b);
        assert!(pre.data().iter().all(|&v| v < 0.0));
    }

    #[test]
    fn two_layer_block_matches_one_layer_block() {
        let x = Matrix::from_columns(&[
            sphere(&[1.0, 2.0, -1.0, 0.5]),
            sphere(&[-1.0, 0.3, 0.2, 0.5]),
            sphere(&[0.0, 1.0, -1.0, 0.1]),
        ]);
        let dir = sphere(&[0.0, 1.0, 0.0, -1.0]).iter().map(|v| v / 2.0).collect::<Vec<_>>();
        let (w, b) = build_stage1_layer(&x.column(0), &dir, 0.05, 0.4);
        let one = apply_block(&ResBlock::One { w: w.clone(), b: b.clone() }, &x).unwrap();
        let two = apply_block(&rn2_block_from_rn1(&w, &b, &x), &x).unwrap();
        assert!(one.out.sub(&two.out).max_abs() < 1e-12);
    }

    #[test]
    fn embedding_separates_columns() {
        let x0 = Matrix::from_fn(4, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 + j as f64 * 0.1);
        let e = embed_first_layer(&x0, 8, &Matrix::zeros(8, 1).add(&Matrix::filled(8, 1, 0.0)), 3, 16).unwrap();
        assert!(e.min_pairwise_distance > 1e-6);
        let dup = Matrix::from_columns(&[x0.column(0), x0.column(0)]);
        assert!(embed_first_layer(&dup, 8, &Matrix::zeros(8, 1), 3, 16).is_err());
    }
}

//! Replays a synthesized network and checks every promise of the
//! construction, returning one machine-readable record per assertion.

use serde::{Deserialize, Serialize};

use super::build::{apply_block, block_sq_norm, sample_columns};
use super::plan::CurvePlan;
use super::sphere::{angle, distance};
use super::{BlockOwner, BoundLedger, SynthesisError};
use crate::arch::{forward_resnet, forward_transformer, Attention, Mlp, NormPlacement, ResBlock, ResNetParams, TokenBatch, TransformerParams};
use crate::numerics::{dot, LnMode, Matrix};

/// Tolerance on the "pre-activation ≤ 0" exclusivity check.
pub const EXCLUSION_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub limit: f64,
    /// Individual checks folded into this record.
    pub checks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub passed: bool,
    pub assertions: Vec<Assertion>,
}

impl VerificationReport {
    fn new(assertions: Vec<Assertion>) -> Self {
        VerificationReport { passed: assertions.iter().all(|a| a.passed), assertions }
    }

    pub fn get(&self, name: &str) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.name == name)
    }

    pub fn failures(&self) -> Vec<&Assertion> {
        self.assertions.iter().filter(|a| !a.passed).collect()
    }
}

/// Accumulates `worst` against an upper `limit`.
struct Upper {
    name: &'static str,
    worst: f64,
    limit: f64,
    checks: usize,
    ok: bool,
}

impl Upper {
    fn new(name: &'static str, limit: f64) -> Self {
        Upper { name, worst: f64::NEG_INFINITY, limit, checks: 0, ok: true }
    }

    fn observe(&mut self, value: f64, ok: bool) {
        self.worst = self.worst.max(value);
        self.checks += 1;
        self.ok &= ok && value.is_finite();
    }

    fn finish(self) -> Assertion {
        Assertion { name: self.name.into(), passed: self.ok, worst: self.worst, limit: self.limit, checks: self.checks }
    }
}

fn block_alpha(block: &ResBlock) -> f64 {
    match block {
        ResBlock::One { w, .. } => w.frobenius(),
        ResBlock::Two { w1, .. } => w1.frobenius_sq(),
    }
}

fn column_equal(a: &Matrix, b: &Matrix, j: usize) -> bool {
    (0..a.rows()).all(|i| a[(i, j)] == b[(i, j)])
}

/// Core checks on the stage blocks, starting from the plan-sample columns
/// `x1`. Returns the assertions and the final stream.
fn verify_stages(
    x1: &Matrix,
    blocks: &[ResBlock],
    plan: &CurvePlan,
    ledger: &BoundLedger,
    reference: Option<&[ResBlock]>,
) -> Result<(Vec<Assertion>, Matrix), SynthesisError> {
    let d = plan.dim as f64;
    let (m, c) = (plan.m, plan.c);
    let ns = plan.samples.len();
    let mut out = Vec::new();

    let schedule_ok = blocks.len() == ledger.owners.len()
        && blocks.len() == ns * ledger.l1 + plan.groups.len() * ledger.l2;
    out.push(Assertion {
        name: "schedule".into(),
        passed: schedule_ok,
        worst: blocks.len() as f64,
        limit: (ns * ledger.l1 + plan.groups.len() * ledger.l2) as f64,
        checks: 1,
    });
    if !schedule_ok {
        return Ok((out, x1.clone()));
    }

    let cond = &plan.conditions;
    let conditions_ok = cond.great_circles
        && cond.later_start_vs_curve <= 1.0 - m
        && cond.moving_vs_parked <= 1.0 - m
        && cond.longest_angle <= 2.0 * std::f64::consts::PI
        && cond.cap_separation_lhs <= cond.cap_separation_rhs + 1e-12
        && cond.stage2_exclusion
        && plan.samples.iter().all(|s| (dot(&s.bar_point, &s.target) - d * (1.0 - c * m)).abs() <= 1e-9 * d || s.parked);
    out.push(Assertion {
        name: "curve_conditions".into(),
        passed: conditions_ok,
        worst: cond.later_start_vs_curve.max(cond.moving_vs_parked),
        limit: 1.0 - m,
        checks: 6,
    });

    let mut excl1 = Upper::new("stage1_exclusivity", EXCLUSION_TOL);
    let mut excl2 = Upper::new("stage2_exclusivity", EXCLUSION_TOL);
    let mut advance = Upper::new("angle_advance", 0.0);
    let mut fidelity = Upper::new("trajectory_fidelity", 1e-8);
    let mut parks = Upper::new("stage1_parks", 1e-9);
    let mut equiv = Upper::new("rn2_equivalence", 1e-10);
    let mut contraction = Upper::new("contraction", 0.0);
    let mut rate = Upper::new("contraction_rate", 0.0);
    let mut final_ball = Upper::new("final_features", 0.0);

    let mut steps = ledger.steps.iter().peekable();
    let mut x = x1.clone();
    let mut sq = (0.0, 0.0);
    let mut initial = vec![0.0; ns];
    for (l, block) in blocks.iter().enumerate() {
        let owner = ledger.owners[l];
        if let BlockOwner::Stage2 { group, layer: 0 } = owner {
            for s in plan.group_members(group) {
                initial[s] = angle(&x.column(s), &plan.groups[group]);
            }
        }
        let step = apply_block(block, &x)?;
        if let Some(reference) = reference {
            let other = apply_block(&reference[l], &x)?;
            equiv.observe(other.out.sub(&step.out).max_abs(), other.out.sub(&step.out).max_abs() <= 1e-10);
        }
        let moving: Option<usize> = match owner {
            BlockOwner::Stage1 { sample, active: true, .. } => Some(sample),
            _ => None,
        };
        let members: Vec<usize> = match owner {
            BlockOwner::Stage2 { group, .. } => plan.group_members(group),
            BlockOwner::Stage1 { .. } => moving.into_iter().collect(),
            BlockOwner::Prologue => Vec::new(),
        };
        for t in 0..ns {
            if members.contains(&t) {
                continue;
            }
            let worst = (0..step.pre.rows()).map(|i| step.pre[(i, t)]).fold(f64::NEG_INFINITY, f64::max);
            let ok = worst <= EXCLUSION_TOL && column_equal(&step.out, &x, t);
            let tracker = if matches!(owner, BlockOwner::Stage2 { .. }) { &mut excl2 } else { &mut excl1 };
            // An all-zero block has zero pre-activations; report them as ≤ 0.
            tracker.observe(worst.max(-1.0), ok);
        }
        match owner {
            BlockOwner::Stage1 { .. } => sq.0 += block_sq_norm(block),
            BlockOwner::Stage2 { .. } => sq.1 += block_sq_norm(block),
            BlockOwner::Prologue => {}
        }
        if let Some(s) = moving {
            let alpha = block_alpha(block);
            let bound = m * alpha / (4.0 * d.sqrt());
            let adv = angle(&x.column(s), &step.out.column(s));
            advance.observe(bound * (1.0 - 1e-6) - adv, adv >= bound * (1.0 - 1e-6));
            match steps.next() {
                Some(rec) if rec.sample == s => {
                    let on_curve = distance(&plan.samples[s].curve.point(rec.tau), &rec.planned);
                    let err = distance(&step.out.column(s), &rec.planned).max(if rec.clamped { 0.0 } else { on_curve });
                    fidelity.observe(err, err <= 1e-8);
                }
                _ => fidelity.observe(f64::INFINITY, false),
            }
        }
        x = step.out;
        if let BlockOwner::Stage1 { sample, layer, .. } = owner {
            if layer + 1 == ledger.l1 {
                let sp = &plan.samples[sample];
                let gap = d * (1.0 - c * m) - dot(&x.column(sample), &sp.target);
                parks.observe(gap / d, gap <= 1e-9 * d);
            }
        }
    }
    for rec in &ledger.contractions {
        let b0 = initial[rec.sample];
        let fin = angle(&x.column(rec.sample), &plan.groups[rec.group]);
        let bound = 2.0 * b0 / ledger.l2 as f64;
        contraction.observe(fin - bound, fin <= bound + 1e-12);
        let r = (1.0 - ledger.stage2_alpha * c * m / (16.0 * d.sqrt())).powi(ledger.l2 as i32) * b0;
        rate.observe(fin - r, fin <= r + 1e-12);
        let chord = 2.0 * d.sqrt() * (bound / 2.0).sin();
        let dist = distance(&x.column(rec.sample), &plan.samples[rec.sample].target);
        final_ball.observe(dist - chord, dist <= chord + 1e-12);
    }

    let lambda = ledger.lambda;
    let recomputed = (0.5 * lambda * sq.0, 0.5 * lambda * sq.1);
    let consistent = (recomputed.0 - ledger.stage1_reg_sum).abs() <= 1e-9 * (1.0 + recomputed.0)
        && (recomputed.1 - ledger.stage2_reg_sum).abs() <= 1e-9 * (1.0 + recomputed.1);
    out.push(Assertion {
        name: "ledger_consistent".into(),
        passed: consistent,
        worst: (recomputed.0 - ledger.stage1_reg_sum).abs().max((recomputed.1 - ledger.stage2_reg_sum).abs()),
        limit: 1e-9,
        checks: 2,
    });
    out.push(Assertion {
        name: "stage1_bound".into(),
        passed: recomputed.0 <= ledger.stage1_bound,
        worst: recomputed.0,
        limit: ledger.stage1_bound,
        checks: 1,
    });
    out.push(Assertion {
        name: "stage2_bound".into(),
        passed: recomputed.1 <= ledger.stage2_bound,
        worst: recomputed.1,
        limit: ledger.stage2_bound,
        checks: 1,
    });
    out.extend([excl1.finish(), excl2.finish(), advance.finish(), fidelity.finish(), parks.finish()]);
    if reference.is_some() {
        out.push(equiv.finish());
    }
    out.extend([contraction.finish(), rate.finish(), final_ball.finish()]);
    Ok((out, x))
}

fn consistency(name: &str, forward: &Matrix, stepped: &Matrix) -> Assertion {
    let err = forward.sub(stepped).max_abs();
    Assertion { name: name.into(), passed: err <= 1e-12, worst: err, limit: 1e-12, checks: 1 }
}

/// Replays a synthesized ResNet on `x0` and checks the construction.
/// `reference` holds one-layer counterparts of two-layer blocks.
pub fn verify_construction(
    params: &ResNetParams,
    x0: &Matrix,
    plan: &CurvePlan,
    ledger: &BoundLedger,
    reference: Option<&[ResBlock]>,
) -> Result<VerificationReport, SynthesisError> {
    let fwd = forward_resnet(params, x0, NormPlacement::Post, LnMode::Exact, true)?;
    let layers = fwd.layers.expect("captured");
    let x1 = sample_columns(&layers[0], plan);
    let (mut asserts, last) = verify_stages(&x1, &params.blocks, plan, ledger, reference)?;
    asserts.push(consistency("forward_consistency", &sample_columns(&fwd.features, plan), &last));
    Ok(VerificationReport::new(asserts))
}

/// Transformer counterpart of [`verify_construction`]; the first block is
/// the prologue and every later attention layer must be zero.
pub fn verify_transformer(
    params: &TransformerParams,
    batch: &TokenBatch,
    plan: &CurvePlan,
    ledger: &BoundLedger,
    reference: Option<&[ResBlock]>,
) -> Result<VerificationReport, SynthesisError> {
    let fwd = forward_transformer(params, batch, NormPlacement::Post, LnMode::Exact, true)?;
    let layers = fwd.layers.expect("captured");
    let x1 = sample_columns(&layers[0], plan);
    let mut zero_attention = true;
    let blocks: Vec<ResBlock> = params.blocks[1..]
        .iter()
        .map(|b| {
            zero_attention &= match &b.attn {
                Attention::Fused { vo, qk } => vo.is_zero() && qk.is_zero(),
                Attention::Split { v, o, q, k } => v.is_zero() && o.is_zero() && q.is_zero() && k.is_zero(),
            };
            match &b.mlp {
                Mlp::One { w, b } => ResBlock::One { w: w.clone(), b: b.clone() },
                Mlp::Two { w1, b1, w2, b2 } => {
                    ResBlock::Two { w1: w1.clone(), b1: b1.clone(), w2: w2.clone(), b2: b2.clone() }
                }
            }
        })
        .collect();
    let prologue_mlp_zero = match &params.blocks[0].mlp {
        Mlp::One { w, b } => w.is_zero() && b.is_zero(),
        Mlp::Two { w1, b1, w2, b2 } => w1.is_zero() && b1.is_zero() && w2.is_zero() && b2.is_zero(),
    };
    let mut stage_ledger = ledger.clone();
    stage_ledger.owners.retain(|o| !matches!(o, BlockOwner::Prologue));
    let (mut asserts, last) = verify_stages(&x1, &blocks, plan, &stage_ledger, reference)?;
    asserts.push(Assertion {
        name: "later_attention_zero".into(),
        passed: zero_attention && prologue_mlp_zero,
        worst: 0.0,
        limit: 0.0,
        checks: params.blocks.len(),
    });
    asserts.push(consistency("forward_consistency", &sample_columns(&fwd.features, plan), &last));
    Ok(VerificationReport::new(asserts))
}

//! Depth-driven constructions that steer every sample onto a collapsed
//! GUFM optimum, and checks of every quantitative bound they promise.
//!
//! A synthesized network has an embedding layer, then a first stage that
//! moves one sample at a time along a planned curve until it enters a small
//! cap around its target, then a second stage that contracts each group of
//! samples sharing a target onto it.

mod build;
mod flatten;
mod gap;
mod plan;
mod sphere;
mod transformer;
mod verify;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchError, Inputs, Network, Variant};
use crate::data::{DataError, Dataset};
use crate::gufm::{GufmError, GufmSolution};
use crate::numerics::NumericsError;

pub use build::{
    build_stage1_layer, build_stage2_layer, embed_first_layer, rn2_block_from_rn1, synthesize_rn1,
    synthesize_rn2, Embedding, ResNetSynthesis,
};
pub use flatten::flatten_rotation;
pub use gap::{loss_gap_curve, GapCurve, GapRow};
pub use plan::{plan_curves, CurvePlan, PlanOptions, SamplePlan};
pub use sphere::{angle, distance, Curve, GeodesicArc};
pub use transformer::{
    prologue_margin, synthesize_transformer, transformer_prologue, Prologue, TransformerSynthesis,
};
pub use verify::{verify_construction, verify_transformer, Assertion, VerificationReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthesisError {
    #[error("embedded samples still collide after {attempts} draws")]
    CollisionPersists { attempts: usize },
    #[error("no margin above the floor {floor} satisfies the curve conditions")]
    MarginBelowFloor { floor: f64 },
    #[error("feature dimension {d} is too small: need at least {needed}")]
    DimensionTooSmall { d: usize, needed: usize },
    #[error("invalid synthesis input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Gufm(#[from] GufmError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    /// Stage-1 layers per sample.
    pub l1: usize,
    /// Stage-2 layers per target group.
    pub l2: usize,
    pub lambda: f64,
    pub variant: Variant,
    /// Prologue scale; `None` picks `min(0.1, min(L₁, L₂)^{−1/4})`.
    pub gamma: Option<f64>,
    pub seed: u64,
    /// Cap multiplier `c > 1`.
    pub c: f64,
    pub margin_floor: f64,
    pub detour_retries: usize,
    pub embed_retries: usize,
    /// Random rotations tried when flattening the targets; 0 disables it.
    pub flatten_trials: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            l1: 50,
            l2: 50,
            lambda: 0.005,
            variant: Variant::Rn1,
            gamma: None,
            seed: 0,
            c: 2.0,
            margin_floor: 1e-6,
            detour_retries: 32,
            embed_retries: 16,
            flatten_trials: 2000,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        let bad = |m: &str| Err(SynthesisError::Invalid(m.to_string()));
        if self.l1 == 0 || self.l2 == 0 {
            return bad("L₁ and L₂ must be at least 1");
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("λ must be positive");
        }
        if !(self.c > 1.0) {
            return bad("c must exceed 1");
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g <= 0.1) {
                return bad("γ must lie in (0, 0.1]");
            }
        }
        if !(self.margin_floor > 0.0) {
            return bad("margin floor must be positive");
        }
        Ok(())
    }

    pub fn gamma_value(&self) -> f64 {
        self.gamma.unwrap_or_else(|| 0.1f64.min((self.l1.min(self.l2) as f64).powf(-0.25)))
    }
}

/// Role of one residual block in the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum BlockOwner {
    /// Transformer block holding the attention prologue.
    Prologue,
    /// Moves plan sample `sample`; `active` is false once it has parked.
    Stage1 { sample: usize, layer: usize, active: bool },
    Stage2 { group: usize, layer: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Step {
    pub sample: usize,
    pub layer: usize,
    pub block: usize,
    pub alpha: f64,
    /// Realized angle between consecutive positions.
    pub advance: f64,
    /// `mα/(4√d)`.
    pub advance_bound: f64,
    /// Curve parameter of the planned next point.
    pub tau: f64,
    pub planned: Vec<f64>,
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contraction {
    pub group: usize,
    pub sample: usize,
    pub initial_angle: f64,
    pub final_angle: f64,
    /// `2β⁰/L₂`.
    pub bound: f64,
    /// `(1 − αcm/(16√d))^{L₂}·β⁰`.
    pub rate_bound: f64,
}

/// Regularization sums, the bounds they must respect, and per-layer records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundLedger {
    pub variant: Variant,
    pub dim: usize,
    /// Distinct samples moved in stage 1.
    pub samples: usize,
    pub groups: usize,
    pub l1: usize,
    pub l2: usize,
    pub lambda: f64,
    pub m: f64,
    pub c: f64,
    /// `λ/2` times the squared norms of the stage-1 weights.
    pub stage1_reg_sum: f64,
    pub stage1_bound: f64,
    pub stage2_reg_sum: f64,
    pub stage2_bound: f64,
    /// Constant stage-1 step size per sample (0 for parked samples).
    pub stage1_alpha: Vec<f64>,
    pub stage2_alpha: f64,
    pub steps: Vec<Stage1Step>,
    pub contractions: Vec<Contraction>,
    pub owners: Vec<BlockOwner>,
    pub gamma: Option<f64>,
    pub prologue_reg_sum: Option<f64>,
}

impl BoundLedger {
    pub fn sums_within_bounds(&self) -> bool {
        self.stage1_reg_sum <= self.stage1_bound && self.stage2_reg_sum <= self.stage2_bound
    }

    /// Stage bounds: the one-layer forms, or the two-layer forms whose
    /// hidden penalty stays of constant order.
    pub fn bounds(variant: Variant, d: usize, n: usize, l1: usize, l2: usize, lambda: f64, m: f64) -> (f64, f64) {
        let (d, n, l1, l2) = (d as f64, n as f64, l1 as f64, l2 as f64);
        let pi = std::f64::consts::PI;
        let log_l2 = l2.ln();
        if variant.two_layer_mlp() {
            (16.0 * d.sqrt() * pi * lambda * n / m, 16.0 * n * d.sqrt() * log_l2 * lambda / m)
        } else {
            (
                32.0 * d * pi * pi * lambda * n / (l1 * m * m),
                128.0 * n * d * lambda * log_l2 * log_l2 / (m * m * l2),
            )
        }
    }
}

/// Output of [`synthesize`], whichever family the variant belongs to.
#[derive(Clone, Debug)]
pub enum Synthesis {
    ResNet(ResNetSynthesis),
    Transformer(TransformerSynthesis),
}

impl Synthesis {
    pub fn network(&self) -> Network {
        match self {
            Synthesis::ResNet(s) => Network::ResNet(s.params.clone()),
            Synthesis::Transformer(s) => Network::Transformer(s.params.clone()),
        }
    }

    pub fn ledger(&self) -> &BoundLedger {
        match self {
            Synthesis::ResNet(s) => &s.ledger,
            Synthesis::Transformer(s) => &s.ledger,
        }
    }

    /// Replays the construction on the dataset it was built for.
    pub fn verify(&self, dataset: &Dataset) -> Result<VerificationReport, SynthesisError> {
        match (self, &dataset.inputs) {
            (Synthesis::ResNet(s), Inputs::Dense(x0)) => {
                let reference = (s.ledger.variant == Variant::Rn2).then_some(s.reference_blocks.as_slice());
                verify_construction(&s.params, x0, &s.plan, &s.ledger, reference)
            }
            (Synthesis::Transformer(s), Inputs::Tokens(batch)) => {
                let reference = s.ledger.variant.two_layer_mlp().then_some(s.reference_blocks.as_slice());
                verify_transformer(&s.params, batch, &s.plan, &s.ledger, reference)
            }
            _ => Err(SynthesisError::Invalid("dataset does not match the synthesized network".into())),
        }
    }
}

/// Dispatches on `config.variant`.
pub fn synthesize(
    dataset: &Dataset,
    solution: &GufmSolution,
    config: &SynthesisConfig,
) -> Result<Synthesis, SynthesisError> {
    Ok(match config.variant {
        Variant::Rn1 => Synthesis::ResNet(synthesize_rn1(dataset, solution, config)?),
        Variant::Rn2 => Synthesis::ResNet(synthesize_rn2(dataset, solution, config)?),
        _ => Synthesis::Transformer(synthesize_transformer(dataset, solution, config)?),
    })
}

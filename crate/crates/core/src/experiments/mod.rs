//! End-to-end training experiments at desk scale.

mod data;
mod gradcheck;
mod sweep;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchError, LossKind, NormPlacement, Variant};
use crate::data::DataError;
use crate::metrics::MetricsError;

pub use data::{class_mean_separation, make_synthetic_classification, make_synthetic_language};
pub use gradcheck::{gradcheck_architecture, GradCheckConfig, GradCheckRow};
pub use sweep::{
    depth_sweep, flatness_experiment, init_network, trend_test, DroppedRun, FlatnessReport, Metric, SweepResult,
    SweepRow, SweepSidecar, TrendResult, SWEEP_HEADER,
};
pub use train::{measure, train, Optimizer, TrainOptions, TrainOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("objective or gradient became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error("invalid experiment setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Classification { classes: usize, per_class: usize, input_dim: usize, seed: u64 },
    Language { vocab: usize, context: usize, classes: usize, sequences: usize, rule_seed: u64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    #[default]
    Constant,
    /// `λ/L` at depth `L`.
    InverseDepth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub architecture: Variant,
    /// Block counts to sweep.
    pub depths: Vec<usize>,
    pub width: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub lambda_schedule: LambdaSchedule,
    pub loss: LossKind,
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub momentum: f64,
    pub optimizer: Optimizer,
    pub placement: NormPlacement,
    pub last_bias: bool,
    pub data: DataSpec,
}

impl Default for TrainConfig {
    /// The desk-scale RN1 protocol.
    fn default() -> Self {
        TrainConfig {
            architecture: Variant::Rn1,
            depths: vec![2, 3, 5, 8, 13],
            width: 32,
            learning_rate: 0.05,
            lambda: 0.005,
            lambda_schedule: LambdaSchedule::Constant,
            loss: LossKind::Ce,
            steps: 2000,
            seeds: vec![0, 1, 2],
            momentum: 0.9,
            optimizer: Optimizer::Gd,
            placement: NormPlacement::Post,
            last_bias: false,
            data: DataSpec::Classification { classes: 4, per_class: 16, input_dim: 16, seed: 0 },
        }
    }
}

impl TrainConfig {
    /// The default protocol with RN2 at half the weight decay.
    pub fn two_layer_contrast() -> Self {
        TrainConfig { architecture: Variant::Rn2, lambda: 0.0025, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Invalid(m.to_string()));
        if self.depths.is_empty() || self.depths.contains(&0) {
            return bad("depths must be nonempty and positive");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is needed");
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("λ must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be non-negative");
        }
        if self.width == 0 {
            return bad("width must be positive");
        }
        let tokens = matches!(self.data, DataSpec::Language { .. });
        if tokens != self.architecture.is_transformer() {
            return bad("transformers need language data and ResNets need classification data");
        }
        Ok(())
    }

    pub fn lambda_at(&self, depth: usize) -> f64 {
        match self.lambda_schedule {
            LambdaSchedule::Constant => self.lambda,
            LambdaSchedule::InverseDepth => self.lambda / depth as f64,
        }
    }
}

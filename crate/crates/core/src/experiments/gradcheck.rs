//! Finite-difference checks of the objective gradient for every architecture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::arch::{
    init_resnet, init_transformer, objective, objective_and_gradient, Inputs, LossKind, Network, NormPlacement,
    Regularization, TokenBatch, Variant,
};
use crate::numerics::{finite_diff_check, one_hot, LnMode, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub width: usize,
    /// Blocks (ResNets count the embedding block).
    pub depth: usize,
    /// Samples, or token positions for transformers.
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub lambda: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            width: 8,
            depth: 3,
            samples: 4,
            step: 1e-5,
            tolerance: 1e-5,
            lambda: 0.01,
            loss: LossKind::Ce,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub variant: Variant,
    pub placement: NormPlacement,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub passed: bool,
}

/// Random network and data of the configured size, checked coordinatewise.
pub fn gradcheck_architecture(
    variant: Variant,
    placement: NormPlacement,
    config: &GradCheckConfig,
) -> Result<GradCheckRow, ExperimentError> {
    if config.width == 0 || config.depth == 0 || config.samples == 0 {
        return Err(ExperimentError::Invalid("width, depth and samples must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let classes = 3;
    let labels: Vec<usize> = (0..config.samples).map(|i| i % classes).collect();
    let (net, inputs) = if variant.is_transformer() {
        let vocab = 3;
        let batch = TokenBatch {
            vocab,
            context: config.samples,
            sequences: vec![(0..config.samples).map(|_| rng.random_range(0..vocab)).collect()],
        };
        let p = init_transformer(variant, vocab, config.samples, config.width, classes, config.depth, true, &mut rng);
        (Network::Transformer(p), Inputs::Tokens(batch))
    } else {
        let x = Matrix::from_fn(5, config.samples, |_, _| rng.random_range(-1.0..1.0));
        (Network::ResNet(init_resnet(variant, 5, config.width, classes, config.depth, false, &mut rng)), Inputs::Dense(x))
    };
    let targets = one_hot(&labels, classes);
    let reg = Regularization::uniform(config.lambda);
    let mode = LnMode::train();
    let (_, grads) = objective_and_gradient(&net, &inputs, &targets, config.loss, reg, placement, mode)?;
    let report = finite_diff_check(
        &net.flatten(),
        config.step,
        |t| objective(&net.unflatten(t), &inputs, &targets, config.loss, reg, placement, mode).unwrap_or(f64::NAN),
        |_| grads.clone(),
    );
    Ok(GradCheckRow {
        variant,
        placement,
        max_rel_error: report.max_rel_error,
        coordinates: report.coordinates,
        passed: report.max_rel_error < config.tolerance,
    })
}

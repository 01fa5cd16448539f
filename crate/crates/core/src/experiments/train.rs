//! Full-batch training on the regularized objective.

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::arch::{evaluate, objective_and_gradient, LossKind, Network, NormPlacement, Regularization};
use crate::data::Dataset;
use crate::metrics::{report, NcReport};
use crate::numerics::{LnMode, Matrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Gradient descent, with heavy-ball momentum when `momentum > 0`.
    #[default]
    Gd,
    /// Adam with the usual `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub steps: usize,
    pub momentum: f64,
    pub optimizer: Optimizer,
    pub lambda: f64,
    pub loss: LossKind,
    pub placement: NormPlacement,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            learning_rate: 0.005,
            steps: 2000,
            momentum: 0.0,
            optimizer: Optimizer::Gd,
            lambda: 0.005,
            loss: LossKind::Ce,
            placement: NormPlacement::Post,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Network,
    /// Objective before each step, then once more at the end.
    pub history: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_objective(&self) -> f64 {
        *self.history.last().expect("history holds at least the initial value")
    }
}

/// Minimizes fit loss plus `(λ/2)Σ‖W‖²` over the non-exempt weights.
pub fn train(net: &Network, dataset: &Dataset, options: &TrainOptions) -> Result<TrainOutcome, ExperimentError> {
    if !(options.lambda >= 0.0 && options.learning_rate >= 0.0) {
        return Err(ExperimentError::Invalid("λ and the learning rate must be non-negative".into()));
    }
    let targets = dataset.targets();
    let reg = Regularization::uniform(options.lambda);
    let mut theta = net.flatten();
    let zeros = || theta.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect::<Vec<_>>();
    let (mut m1, mut m2) = (zeros(), zeros());
    let mut history = Vec::with_capacity(options.steps + 1);
    let mut current = net.clone();
    for step in 0..=options.steps {
        let (value, grads) = objective_and_gradient(
            &current,
            &dataset.inputs,
            &targets,
            options.loss,
            reg,
            options.placement,
            LnMode::train(),
        )?;
        if !value.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(ExperimentError::NonFinite { step });
        }
        history.push(value);
        if step == options.steps {
            break;
        }
        let lr = options.learning_rate;
        for (i, g) in grads.iter().enumerate() {
            let update = match options.optimizer {
                Optimizer::Gd if options.momentum > 0.0 => {
                    m1[i] = m1[i].scale(options.momentum).add(g);
                    m1[i].scale(lr)
                }
                Optimizer::Gd => g.scale(lr),
                Optimizer::Adam => {
                    let t = (step + 1) as i32;
                    m1[i] = m1[i].scale(0.9).add(&g.scale(0.1));
                    m2[i] = m2[i].scale(0.999).add(&g.map(|v| 0.001 * v * v));
                    let (c1, c2) = (1.0 - 0.9f64.powi(t), 1.0 - 0.999f64.powi(t));
                    m1[i].zip_map(&m2[i], |a, b| lr * (a / c1) / ((b / c2).sqrt() + 1e-8))
                }
            };
            theta[i] = theta[i].sub(&update);
        }
        current = current.unflatten(&theta);
    }
    Ok(TrainOutcome { net: current, history })
}

/// Collapse metrics and accuracy of `net` on its training data, measured on
/// the penultimate features.
pub fn measure(
    net: &Network,
    dataset: &Dataset,
    loss: LossKind,
    placement: NormPlacement,
    mode: LnMode,
) -> Result<(NcReport, f64), ExperimentError> {
    let (logits, features) = evaluate(net, &dataset.inputs, placement, mode)?;
    let (w, bias) = match net {
        Network::ResNet(p) => (&p.last_w, p.last_b.is_some()),
        Network::Transformer(p) => (&p.last_w, p.last_b.is_some()),
    };
    let nc = report(w, &features, &dataset.labels, loss, bias)?;
    let correct = (0..logits.cols())
        .filter(|&j| {
            let col = logits.column(j);
            let best = (0..col.len()).fold(0, |b, i| if col[i] > col[b] { i } else { b });
            best == dataset.labels[j]
        })
        .count();
    Ok((nc, correct as f64 / logits.cols() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{init_resnet, RegClass, Variant};
    use crate::experiments::make_synthetic_classification;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Network, Dataset) {
        let ds = make_synthetic_classification(2, 3, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (Network::ResNet(init_resnet(Variant::Rn1, 4, 6, 2, 2, false, &mut rng)), ds)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (net, ds) = setup();
        let out = train(&net, &ds, &TrainOptions { learning_rate: 0.0, steps: 5, ..Default::default() }).unwrap();
        assert_eq!(out.net, net);
        assert_eq!(out.history.len(), 6);
        assert!(out.history.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn one_step_is_a_gradient_step() {
        let (net, ds) = setup();
        let opts = TrainOptions { learning_rate: 0.01, steps: 1, ..Default::default() };
        let (_, g) = objective_and_gradient(
            &net,
            &ds.inputs,
            &ds.targets(),
            opts.loss,
            Regularization::uniform(opts.lambda),
            opts.placement,
            LnMode::train(),
        )
        .unwrap();
        let out = train(&net, &ds, &opts).unwrap();
        for ((a, b), g) in net.flatten().iter().zip(out.net.flatten()).zip(&g) {
            assert_eq!(a.sub(&g.scale(0.01)), b);
        }
    }

    #[test]
    fn heavy_decay_shrinks_weights() {
        let (net, ds) = setup();
        let opts = TrainOptions { learning_rate: 0.01, steps: 30, lambda: 50.0, ..Default::default() };
        let out = train(&net, &ds, &opts).unwrap();
        let norm = |n: &Network| {
            n.named_tensors().iter().filter(|t| t.2 != RegClass::Exempt).map(|t| t.1.frobenius_sq()).sum::<f64>()
        };
        assert!(norm(&out.net) < 0.5 * norm(&net));
    }

    #[test]
    fn divergence_is_reported() {
        let (net, ds) = setup();
        let opts = TrainOptions { learning_rate: 1e200, steps: 5, lambda: 1.0, ..Default::default() };
        assert!(matches!(train(&net, &ds, &opts), Err(ExperimentError::NonFinite { .. })));
    }
}

//! Regularized training objective and identity-block deepening.

use serde::{Deserialize, Serialize};

use super::{
    forward_resnet, forward_resnet_tape, forward_transformer, forward_transformer_tape, ArchError,
    Attention, LossKind, Mlp, Network, NormPlacement, RegClass, ResBlock, ResNetParams, TokenBatch,
    TransformerParams, TxBlock,
};
use crate::numerics::{LnMode, Matrix, Tape, Var};

/// Weight-decay strengths: one for the classifier, one for every other
/// non-exempt weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    pub lambda_last: f64,
    pub lambda_rest: f64,
}

impl Regularization {
    pub fn uniform(lambda: f64) -> Self {
        Regularization { lambda_last: lambda, lambda_rest: lambda }
    }
}

/// Squared Frobenius norms split by regularization class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    pub last_sq: f64,
    pub hidden_sq: f64,
}

impl Penalty {
    pub fn value(&self, reg: Regularization) -> f64 {
        0.5 * reg.lambda_last * self.last_sq + 0.5 * reg.lambda_rest * self.hidden_sq
    }
}

/// Network inputs: dense columns for ResNets, token sequences for transformers.
#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    Dense(Matrix),
    Tokens(TokenBatch),
}

impl Inputs {
    pub fn num_samples(&self) -> usize {
        match self {
            Inputs::Dense(x) => x.cols(),
            Inputs::Tokens(b) => b.num_positions(),
        }
    }
}

pub fn penalty(net: &Network) -> Penalty {
    let mut p = Penalty::default();
    for (_, m, class) in net.named_tensors() {
        match class {
            RegClass::Last => p.last_sq += m.frobenius_sq(),
            RegClass::Hidden => p.hidden_sq += m.frobenius_sq(),
            RegClass::Exempt => {}
        }
    }
    p
}

/// Logits and classifier inputs of `net` on `inputs`.
pub fn evaluate(
    net: &Network,
    inputs: &Inputs,
    placement: NormPlacement,
    mode: LnMode,
) -> Result<(Matrix, Matrix), ArchError> {
    match (net, inputs) {
        (Network::ResNet(p), Inputs::Dense(x)) => {
            let out = forward_resnet(p, x, placement, mode, false)?;
            Ok((out.logits, out.features))
        }
        (Network::Transformer(p), Inputs::Tokens(b)) => {
            let out = forward_transformer(p, b, placement, mode, false)?;
            Ok((out.logits, out.features))
        }
        _ => Err(ArchError::Shape("input kind does not match the architecture".into())),
    }
}

/// Fit loss plus `(λ_last/2)‖W_L‖² + (λ_rest/2)Σ‖W‖²` over non-exempt weights.
pub fn objective(
    net: &Network,
    inputs: &Inputs,
    targets: &Matrix,
    loss: LossKind,
    reg: Regularization,
    placement: NormPlacement,
    mode: LnMode,
) -> Result<f64, ArchError> {
    let (logits, _) = evaluate(net, inputs, placement, mode)?;
    Ok(loss.eval(&logits, targets).0 + penalty(net).value(reg))
}

/// Objective value and its gradient with respect to every tensor of `net`,
/// in [`Network::flatten`] order.
pub fn objective_and_gradient(
    net: &Network,
    inputs: &Inputs,
    targets: &Matrix,
    loss: LossKind,
    reg: Regularization,
    placement: NormPlacement,
    mode: LnMode,
) -> Result<(f64, Vec<Matrix>), ArchError> {
    let mut tape = Tape::new();
    let (logits, vars, classes) = match (net, inputs) {
        (Network::ResNet(p), Inputs::Dense(x)) => {
            let vars = p.map(|m| tape.param(m.clone()));
            let x0 = tape.constant(x.clone());
            let out = forward_resnet_tape(&mut tape, &vars, x0, placement, mode, false)?;
            let (flat, classes) = split(vars.named_tensors());
            (out.logits, flat, classes)
        }
        (Network::Transformer(p), Inputs::Tokens(b)) => {
            let vars = p.map(|m| tape.param(m.clone()));
            let out = forward_transformer_tape(&mut tape, &vars, b, placement, mode, false)?;
            let (flat, classes) = split(vars.named_tensors());
            (out.logits, flat, classes)
        }
        _ => return Err(ArchError::Shape("input kind does not match the architecture".into())),
    };
    let mut total = match loss {
        LossKind::Ce => tape.cross_entropy(logits, targets),
        LossKind::Mse => tape.mse(logits, targets),
    };
    for (&v, class) in vars.iter().zip(&classes) {
        let lambda = match class {
            RegClass::Last => reg.lambda_last,
            RegClass::Hidden => reg.lambda_rest,
            RegClass::Exempt => continue,
        };
        if lambda != 0.0 {
            let sq = tape.sum_squares(v);
            let term = tape.scale(sq, 0.5 * lambda);
            total = tape.add(total, term);
        }
    }
    let value = tape.scalar(total);
    let mut grads = tape.backward(total);
    let grads = vars.iter().map(|&v| grads.take(v).expect("parameter gradient")).collect();
    Ok((value, grads))
}

fn split(named: Vec<(String, &Var, RegClass)>) -> (Vec<Var>, Vec<RegClass>) {
    named.into_iter().map(|(_, &v, c)| (v, c)).unzip()
}

/// Appends `extra` zero blocks before the classifier.
pub fn deepen_resnet(params: &ResNetParams, extra: usize) -> ResNetParams {
    let d = params.width();
    let hidden = match params.blocks.first() {
        Some(ResBlock::Two { w1, .. }) => Some(w1.rows()),
        _ => None,
    };
    let mut out = params.clone();
    for _ in 0..extra {
        out.blocks.push(match hidden {
            Some(h) => ResBlock::Two {
                w1: Matrix::zeros(h, d),
                b1: Matrix::zeros(h, 1),
                w2: Matrix::zeros(d, h),
                b2: Matrix::zeros(d, 1),
            },
            None => ResBlock::One { w: Matrix::zeros(d, d), b: Matrix::zeros(d, 1) },
        });
    }
    out
}

/// Appends `extra` blocks with zero attention and zero MLP weights.
pub fn deepen_transformer(params: &TransformerParams, extra: usize) -> TransformerParams {
    let mut out = params.clone();
    if let Some(template) = params.blocks.first() {
        let zero = template.map(|m| Matrix::zeros(m.rows(), m.cols()));
        out.blocks.extend(std::iter::repeat_n(zero, extra));
    } else {
        let d = params.width();
        let z = || Matrix::zeros(d, d);
        let block = TxBlock {
            attn: Attention::Fused { vo: z(), qk: z() },
            mlp: Mlp::One { w: z(), b: Matrix::zeros(d, 1) },
        };
        out.blocks.extend(std::iter::repeat_n(block, extra));
    }
    out
}

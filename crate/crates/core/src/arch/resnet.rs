//! ResNets with LayerNorm, one or two linear layers per residual branch.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ArchError, NormPlacement, RegClass, Variant};
use crate::numerics::{LnMode, Matrix, Tape, Var};

/// One residual block.
#[derive(Clone, Debug, PartialEq)]
pub enum ResBlock<T = Matrix> {
    One { w: T, b: T },
    Two { w1: T, b1: T, w2: T, b2: T },
}

/// Parameters of an `L`-block ResNet: an embedding layer, `L − 1`
/// residual blocks and a linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ResNetParams<T = Matrix> {
    pub embed_w: T,
    pub embed_b: T,
    pub blocks: Vec<ResBlock<T>>,
    pub last_w: T,
    pub last_b: Option<T>,
}

impl<T> ResBlock<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ResBlock<U> {
        match self {
            ResBlock::One { w, b } => ResBlock::One { w: f(w), b: f(b) },
            ResBlock::Two { w1, b1, w2, b2 } => {
                ResBlock::Two { w1: f(w1), b1: f(b1), w2: f(w2), b2: f(b2) }
            }
        }
    }

    /// Tensors in container order, with names relative to the block.
    pub fn tensors(&self) -> Vec<(&'static str, &T, RegClass)> {
        match self {
            ResBlock::One { w, b } => vec![("w", w, RegClass::Hidden), ("b", b, RegClass::Exempt)],
            ResBlock::Two { w1, b1, w2, b2 } => vec![
                ("w1", w1, RegClass::Hidden),
                ("b1", b1, RegClass::Exempt),
                ("w2", w2, RegClass::Hidden),
                ("b2", b2, RegClass::Exempt),
            ],
        }
    }
}

impl<T> ResNetParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ResNetParams<U> {
        ResNetParams {
            embed_w: f(&self.embed_w),
            embed_b: f(&self.embed_b),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            last_w: f(&self.last_w),
            last_b: self.last_b.as_ref().map(&mut f),
        }
    }

    /// Number of blocks `L` counting the embedding block.
    pub fn depth(&self) -> usize {
        self.blocks.len() + 1
    }

    pub fn named_tensors(&self) -> Vec<(String, &T, RegClass)> {
        let mut out = vec![
            ("embed.w".to_string(), &self.embed_w, RegClass::Exempt),
            ("embed.b".to_string(), &self.embed_b, RegClass::Exempt),
        ];
        for (l, block) in self.blocks.iter().enumerate() {
            for (name, t, class) in block.tensors() {
                out.push((format!("block{}.{name}", l + 1), t, class));
            }
        }
        out.push(("last.w".to_string(), &self.last_w, RegClass::Last));
        if let Some(b) = &self.last_b {
            out.push(("last.b".to_string(), b, RegClass::Exempt));
        }
        out
    }
}

impl ResNetParams {
    pub fn variant(&self) -> Variant {
        match self.blocks.first() {
            Some(ResBlock::Two { .. }) => Variant::Rn2,
            _ => Variant::Rn1,
        }
    }

    pub fn width(&self) -> usize {
        self.embed_w.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.embed_w.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.last_w.rows()
    }

    /// Flat list of tensors in container order.
    pub fn flatten(&self) -> Vec<Matrix> {
        self.named_tensors().into_iter().map(|(_, m, _)| m.clone()).collect()
    }

    /// Inverse of [`ResNetParams::flatten`] using `self` as the shape template.
    pub fn unflatten(&self, flat: &[Matrix]) -> ResNetParams {
        let mut it = flat.iter();
        self.map(|_| it.next().expect("flat parameter list too short").clone())
    }
}

/// Tape variables produced by one ResNet forward pass.
#[derive(Clone, Debug)]
pub struct ResNetForward {
    pub logits: Var,
    /// Inputs of the classifier.
    pub features: Var,
    /// `X₁ … X_L` when captured.
    pub layers: Vec<Var>,
}

/// Plain-matrix result of [`forward_resnet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ResNetOutput {
    pub logits: Matrix,
    pub features: Matrix,
    pub layers: Option<Vec<Matrix>>,
}

fn linear(tape: &mut Tape, w: Var, b: Var, x: Var) -> Var {
    let wx = tape.matmul(w, x);
    tape.add_bias(wx, b)
}

fn branch(tape: &mut Tape, block: &ResBlock<Var>, x: Var) -> Var {
    match block {
        ResBlock::One { w, b } => {
            let pre = linear(tape, *w, *b, x);
            tape.relu(pre)
        }
        ResBlock::Two { w1, b1, w2, b2 } => {
            let pre = linear(tape, *w1, *b1, x);
            let hidden = tape.relu(pre);
            linear(tape, *w2, *b2, hidden)
        }
    }
}

fn check_shapes(tape: &Tape, p: &ResNetParams<Var>, x0: Var) -> Result<(), ArchError> {
    let (d, d0) = tape.value(p.embed_w).shape();
    if tape.value(x0).rows() != d0 {
        return Err(ArchError::Shape(format!(
            "input has {} rows, embedding expects {d0}",
            tape.value(x0).rows()
        )));
    }
    if tape.value(p.last_w).cols() != d {
        return Err(ArchError::Shape("classifier width differs from block width".into()));
    }
    Ok(())
}

/// Records a ResNet forward pass on `tape`.
pub fn forward_resnet_tape(
    tape: &mut Tape,
    p: &ResNetParams<Var>,
    x0: Var,
    placement: NormPlacement,
    mode: LnMode,
    capture: bool,
) -> Result<ResNetForward, ArchError> {
    check_shapes(tape, p, x0)?;
    let mut layers = Vec::new();
    let embedded = linear(tape, p.embed_w, p.embed_b, x0);
    let mut x = tape.layer_norm(embedded, mode)?;
    if capture {
        layers.push(x);
    }
    for block in &p.blocks {
        x = match placement {
            NormPlacement::Post => {
                let delta = branch(tape, block, x);
                tape.residual_norm(x, delta, mode)?
            }
            NormPlacement::Pre => {
                let normed = tape.layer_norm(x, mode)?;
                let delta = branch(tape, block, normed);
                tape.add(x, delta)
            }
        };
        if capture {
            layers.push(x);
        }
    }
    let features = match placement {
        NormPlacement::Post => x,
        NormPlacement::Pre => tape.layer_norm(x, mode)?,
    };
    let mut logits = tape.matmul(p.last_w, features);
    if let Some(b) = p.last_b {
        logits = tape.add_bias(logits, b);
    }
    Ok(ResNetForward { logits, features, layers })
}

/// Evaluates a ResNet on the columns of `x0`.
pub fn forward_resnet(
    params: &ResNetParams,
    x0: &Matrix,
    placement: NormPlacement,
    mode: LnMode,
    capture: bool,
) -> Result<ResNetOutput, ArchError> {
    let mut tape = Tape::new();
    let vars = params.map(|m| tape.constant(m.clone()));
    let input = tape.constant(x0.clone());
    let out = forward_resnet_tape(&mut tape, &vars, input, placement, mode, capture)?;
    Ok(ResNetOutput {
        logits: tape.value(out.logits).clone(),
        features: tape.value(out.features).clone(),
        layers: capture.then(|| out.layers.iter().map(|&v| tape.value(v).clone()).collect()),
    })
}

/// He-style initialization: weight entries `N(0, 2/fan_in)`, zero biases.
pub fn init_resnet(
    variant: Variant,
    input_dim: usize,
    width: usize,
    num_classes: usize,
    depth: usize,
    last_bias: bool,
    rng: &mut impl Rng,
) -> ResNetParams {
    assert!(depth >= 1, "a ResNet has at least the embedding block");
    assert!(!variant.is_transformer(), "not a ResNet variant");
    let mut gaussian = |rows: usize, cols: usize| {
        let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("valid std");
        Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
    };
    let embed_w = gaussian(width, input_dim);
    let blocks = (1..depth)
        .map(|_| {
            if variant.two_layer_mlp() {
                ResBlock::Two {
                    w1: gaussian(width, width),
                    b1: Matrix::zeros(width, 1),
                    w2: gaussian(width, width),
                    b2: Matrix::zeros(width, 1),
                }
            } else {
                ResBlock::One { w: gaussian(width, width), b: Matrix::zeros(width, 1) }
            }
        })
        .collect();
    let last_w = gaussian(num_classes, width);
    ResNetParams {
        embed_w,
        embed_b: Matrix::zeros(width, 1),
        blocks,
        last_w,
        last_b: last_bias.then(|| Matrix::zeros(num_classes, 1)),
    }
}

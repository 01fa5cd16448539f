//! Single-head causal transformers with LayerNorm.
//!
//! A sample is one token position. Sequences of a batch are laid side by
//! side as columns, so every column-wise layer runs on the whole batch and
//! only attention works sequence by sequence.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ArchError, NormPlacement, RegClass, Variant};
use crate::numerics::{LnMode, Matrix, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub enum Attention<T = Matrix> {
    /// `W_VO` and `W_QK`.
    Fused { vo: T, qk: T },
    /// `W_V`, `W_O`, `W_Q`, `W_K`.
    Split { v: T, o: T, q: T, k: T },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mlp<T = Matrix> {
    One { w: T, b: T },
    Two { w1: T, b1: T, w2: T, b2: T },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TxBlock<T = Matrix> {
    pub attn: Attention<T>,
    pub mlp: Mlp<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams<T = Matrix> {
    /// `d × V` token embedding.
    pub token_embed: T,
    /// `d × C` positional embedding; column `p` serves position `p + 1`.
    pub pos_embed: T,
    pub blocks: Vec<TxBlock<T>>,
    pub last_w: T,
    pub last_b: Option<T>,
}

/// Token sequences sharing a vocabulary and a maximum context length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub vocab: usize,
    pub context: usize,
    pub sequences: Vec<Vec<usize>>,
}

impl TokenBatch {
    pub fn num_positions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// The prefix ending at every position, in column order.
    pub fn contexts(&self) -> Vec<&[usize]> {
        self.sequences.iter().flat_map(|s| (1..=s.len()).map(move |p| &s[..p])).collect()
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        for seq in &self.sequences {
            if seq.len() > self.context {
                return Err(ArchError::ContextTooLong { len: seq.len(), context: self.context });
            }
            if let Some(&token) = seq.iter().find(|&&t| t >= self.vocab) {
                return Err(ArchError::TokenOutOfRange { token, vocab: self.vocab });
            }
        }
        Ok(())
    }
}

impl<T> Attention<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Attention<U> {
        match self {
            Attention::Fused { vo, qk } => Attention::Fused { vo: f(vo), qk: f(qk) },
            Attention::Split { v, o, q, k } => {
                Attention::Split { v: f(v), o: f(o), q: f(q), k: f(k) }
            }
        }
    }
}

impl<T> Mlp<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Mlp<U> {
        match self {
            Mlp::One { w, b } => Mlp::One { w: f(w), b: f(b) },
            Mlp::Two { w1, b1, w2, b2 } => Mlp::Two { w1: f(w1), b1: f(b1), w2: f(w2), b2: f(b2) },
        }
    }
}

impl<T> TxBlock<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> TxBlock<U> {
        TxBlock { attn: self.attn.map(&mut f), mlp: self.mlp.map(&mut f) }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &T, RegClass)> {
        let mut out = match &self.attn {
            Attention::Fused { vo, qk } => {
                vec![("attn.vo", vo, RegClass::Hidden), ("attn.qk", qk, RegClass::Hidden)]
            }
            Attention::Split { v, o, q, k } => vec![
                ("attn.v", v, RegClass::Hidden),
                ("attn.o", o, RegClass::Hidden),
                ("attn.q", q, RegClass::Hidden),
                ("attn.k", k, RegClass::Hidden),
            ],
        };
        match &self.mlp {
            Mlp::One { w, b } => {
                out.push(("mlp.w", w, RegClass::Hidden));
                out.push(("mlp.b", b, RegClass::Exempt));
            }
            Mlp::Two { w1, b1, w2, b2 } => {
                out.push(("mlp.w1", w1, RegClass::Hidden));
                out.push(("mlp.b1", b1, RegClass::Exempt));
                out.push(("mlp.w2", w2, RegClass::Hidden));
                out.push(("mlp.b2", b2, RegClass::Exempt));
            }
        }
        out
    }
}

impl<T> TransformerParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> TransformerParams<U> {
        TransformerParams {
            token_embed: f(&self.token_embed),
            pos_embed: f(&self.pos_embed),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            last_w: f(&self.last_w),
            last_b: self.last_b.as_ref().map(&mut f),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &T, RegClass)> {
        let mut out = vec![
            ("embed.token".to_string(), &self.token_embed, RegClass::Exempt),
            ("embed.pos".to_string(), &self.pos_embed, RegClass::Exempt),
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

impl TransformerParams {
    pub fn variant(&self) -> Variant {
        let Some(block) = self.blocks.first() else {
            return Variant::T11;
        };
        match (&block.attn, &block.mlp) {
            (Attention::Fused { .. }, Mlp::One { .. }) => Variant::T11,
            (Attention::Fused { .. }, Mlp::Two { .. }) => Variant::T12,
            (Attention::Split { .. }, Mlp::One { .. }) => Variant::T21,
            (Attention::Split { .. }, Mlp::Two { .. }) => Variant::T22,
        }
    }

    pub fn width(&self) -> usize {
        self.token_embed.rows()
    }

    pub fn vocab(&self) -> usize {
        self.token_embed.cols()
    }

    pub fn context(&self) -> usize {
        self.pos_embed.cols()
    }

    pub fn flatten(&self) -> Vec<Matrix> {
        self.named_tensors().into_iter().map(|(_, m, _)| m.clone()).collect()
    }

    pub fn unflatten(&self, flat: &[Matrix]) -> TransformerParams {
        let mut it = flat.iter();
        self.map(|_| it.next().expect("flat parameter list too short").clone())
    }
}

#[derive(Clone, Debug)]
pub struct TransformerForward {
    pub logits: Var,
    /// Output of the final LayerNorm, one column per position.
    pub features: Var,
    /// Residual stream after every block (block outputs, before the next
    /// LayerNorm) when captured.
    pub layers: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerOutput {
    pub logits: Matrix,
    pub features: Matrix,
    pub layers: Option<Vec<Matrix>>,
}

/// One-hot encoding of every sequence, concatenated column-wise (`V × T`).
fn one_hot_tokens(batch: &TokenBatch) -> Matrix {
    let mut z = Matrix::zeros(batch.vocab, batch.num_positions());
    let mut col = 0;
    for seq in &batch.sequences {
        for &t in seq {
            z[(t, col)] = 1.0;
            col += 1;
        }
    }
    z
}

/// `W_e Z + W_p` for the whole batch.
pub fn embed_tokens(
    tape: &mut Tape,
    p: &TransformerParams<Var>,
    batch: &TokenBatch,
) -> Result<Var, ArchError> {
    batch.validate()?;
    let (d, v) = tape.value(p.token_embed).shape();
    let c = tape.value(p.pos_embed).cols();
    if v != batch.vocab || c < batch.context || tape.value(p.pos_embed).rows() != d {
        return Err(ArchError::Shape(format!(
            "embedding expects vocab {v} and context ≤ {c}, batch has vocab {} context {}",
            batch.vocab, batch.context
        )));
    }
    let z = tape.constant(one_hot_tokens(batch));
    let tokens = tape.matmul(p.token_embed, z);
    let positions: Vec<Var> =
        batch.sequences.iter().map(|s| tape.slice_cols(p.pos_embed, 0, s.len())).collect();
    let pos = tape.concat_cols(&positions);
    Ok(tape.add(tokens, pos))
}

fn linear(tape: &mut Tape, w: Var, b: Var, x: Var) -> Var {
    let wx = tape.matmul(w, x);
    tape.add_bias(wx, b)
}

/// `W_VO Z A(Z)` (or `W_O W_V Z A(Z)`) for every sequence, without the residual.
fn attention_delta(tape: &mut Tape, attn: &Attention<Var>, z: Var, lengths: &[usize]) -> Var {
    let d = tape.value(z).rows();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut parts = Vec::with_capacity(lengths.len());
    let mut offset = 0;
    for &len in lengths {
        let zs = tape.slice_cols(z, offset, len);
        offset += len;
        let zt = tape.transpose(zs);
        let scores = match attn {
            Attention::Fused { qk, .. } => {
                let qz = tape.matmul(*qk, zs);
                tape.matmul(zt, qz)
            }
            Attention::Split { q, k, .. } => {
                let qz = tape.matmul(*q, zs);
                let kz = tape.matmul(*k, zs);
                let kzt = tape.transpose(kz);
                tape.matmul(kzt, qz)
            }
        };
        let scores = tape.scale(scores, inv_sqrt_d);
        let weights = tape.causal_softmax(scores);
        let mixed = tape.matmul(zs, weights);
        let out = match attn {
            Attention::Fused { vo, .. } => tape.matmul(*vo, mixed),
            Attention::Split { v, o, .. } => {
                let vz = tape.matmul(*v, mixed);
                tape.matmul(*o, vz)
            }
        };
        parts.push(out);
    }
    tape.concat_cols(&parts)
}

fn mlp_delta(tape: &mut Tape, mlp: &Mlp<Var>, z: Var) -> Var {
    match mlp {
        Mlp::One { w, b } => {
            let pre = linear(tape, *w, *b, z);
            tape.relu(pre)
        }
        Mlp::Two { w1, b1, w2, b2 } => {
            let pre = linear(tape, *w1, *b1, z);
            let hidden = tape.relu(pre);
            linear(tape, *w2, *b2, hidden)
        }
    }
}

/// Records a transformer forward pass on `tape`.
pub fn forward_transformer_tape(
    tape: &mut Tape,
    p: &TransformerParams<Var>,
    batch: &TokenBatch,
    placement: NormPlacement,
    mode: LnMode,
    capture: bool,
) -> Result<TransformerForward, ArchError> {
    let lengths: Vec<usize> = batch.sequences.iter().map(Vec::len).collect();
    let embedded = embed_tokens(tape, p, batch)?;
    let mut layers = Vec::new();
    let features = match placement {
        NormPlacement::Post => {
            // The stream is carried as `base + delta` with `base` a LayerNorm
            // output, so every LayerNorm below is a residual LayerNorm.
            let mut base = tape.layer_norm(embedded, mode)?;
            let mut pending: Option<Var> = None;
            for block in &p.blocks {
                let z1 = match pending {
                    Some(delta) => tape.residual_norm(base, delta, mode)?,
                    None => base,
                };
                let attn = attention_delta(tape, &block.attn, z1, &lengths);
                let z2 = tape.residual_norm(z1, attn, mode)?;
                let delta = mlp_delta(tape, &block.mlp, z2);
                if capture {
                    layers.push(tape.add(z2, delta));
                }
                base = z2;
                pending = Some(delta);
            }
            match pending {
                Some(delta) => tape.residual_norm(base, delta, mode)?,
                None => base,
            }
        }
        NormPlacement::Pre => {
            let mut z = tape.layer_norm(embedded, mode)?;
            for block in &p.blocks {
                let normed = tape.layer_norm(z, mode)?;
                let attn = attention_delta(tape, &block.attn, normed, &lengths);
                z = tape.add(z, attn);
                let normed = tape.layer_norm(z, mode)?;
                let delta = mlp_delta(tape, &block.mlp, normed);
                z = tape.add(z, delta);
                if capture {
                    layers.push(z);
                }
            }
            tape.layer_norm(z, mode)?
        }
    };
    let mut logits = tape.matmul(p.last_w, features);
    if let Some(b) = p.last_b {
        logits = tape.add_bias(logits, b);
    }
    Ok(TransformerForward { logits, features, layers })
}

/// Evaluates a transformer on every position of `batch`.
pub fn forward_transformer(
    params: &TransformerParams,
    batch: &TokenBatch,
    placement: NormPlacement,
    mode: LnMode,
    capture: bool,
) -> Result<TransformerOutput, ArchError> {
    let mut tape = Tape::new();
    let vars = params.map(|m| tape.constant(m.clone()));
    let out = forward_transformer_tape(&mut tape, &vars, batch, placement, mode, capture)?;
    Ok(TransformerOutput {
        logits: tape.value(out.logits).clone(),
        features: tape.value(out.features).clone(),
        layers: capture.then(|| out.layers.iter().map(|&v| tape.value(v).clone()).collect()),
    })
}

/// Random transformer with `blocks` blocks; weights `N(0, 2/fan_in)`, zero biases.
#[allow(clippy::too_many_arguments)]
pub fn init_transformer(
    variant: Variant,
    vocab: usize,
    context: usize,
    width: usize,
    num_classes: usize,
    blocks: usize,
    last_bias: bool,
    rng: &mut impl Rng,
) -> TransformerParams {
    assert!(variant.is_transformer(), "not a transformer variant");
    let mut gaussian = |rows: usize, cols: usize| {
        let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("valid std");
        Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
    };
    let token_embed = gaussian(width, vocab);
    let pos_embed = gaussian(width, context);
    let blocks = (0..blocks)
        .map(|_| {
            let attn = if variant.split_attention() {
                Attention::Split {
                    v: gaussian(width, width),
                    o: gaussian(width, width),
                    q: gaussian(width, width),
                    k: gaussian(width, width),
                }
            } else {
                Attention::Fused { vo: gaussian(width, width), qk: gaussian(width, width) }
            };
            let mlp = if variant.two_layer_mlp() {
                Mlp::Two {
                    w1: gaussian(width, width),
                    b1: Matrix::zeros(width, 1),
                    w2: gaussian(width, width),
                    b2: Matrix::zeros(width, 1),
                }
            } else {
                Mlp::One { w: gaussian(width, width), b: Matrix::zeros(width, 1) }
            };
            TxBlock { attn, mlp }
        })
        .collect();
    TransformerParams {
        token_embed,
        pos_embed,
        blocks,
        last_w: gaussian(num_classes, width),
        last_b: last_bias.then(|| Matrix::zeros(num_classes, 1)),
    }
}

//! Transformer constructions: an attention prologue that gives every
//! distinct context a distinct representation, followed by the ResNet
//! stages run through the MLP branches with attention switched off.

use serde::{Deserialize, Serialize};

use super::build::{build_stages, plan_options, rotated_solution, sample_columns};
use super::plan::{plan_curves, CurvePlan};
use super::sphere::distance;
use super::{BlockOwner, BoundLedger, SynthesisConfig, SynthesisError};
use crate::arch::{
    forward_transformer, Attention, Inputs, Mlp, NormPlacement, ResBlock, TokenBatch, TransformerParams, TxBlock,
    Variant,
};
use crate::data::Dataset;
use crate::gufm::GufmSolution;
use crate::numerics::{layer_norm, LnMode, Matrix};

/// Embeddings and first block of a synthesized transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct Prologue {
    pub token_embed: Matrix,
    pub pos_embed: Matrix,
    pub block: TxBlock,
    pub gamma: f64,
    pub rotation_angle: f64,
}

/// Coefficients `(a, b)` with `a + b = −1` and `a² + b² = 4^{i+1} − 1`.
fn position_coefficients(i: usize) -> (f64, f64) {
    let s = 4f64.powi(i as i32 + 1);
    let root = (2.0 * s - 3.0).sqrt();
    ((-1.0 + root) / 2.0, (-1.0 - root) / 2.0)
}

/// Builds the prologue for vocabulary `v`, context length `c` and width `d`.
///
/// Tokens are lifted one-hot into the first `V` coordinates; position `p`
/// (0-based) adds `a·e_{2V} + b·e_{2V+1}` with `a² + b² = 4^{p+1} − 1`, so
/// after LayerNorm token `j` at position `p` carries `√d·2^{−(p+1)}` on
/// coordinate `j`. Attention scores are zero (uniform causal weights) and
/// the value/output map copies the token block into coordinates
/// `V..2V`, followed by a small rotation in the plane of coordinates
/// `V` and `2V`.
pub fn transformer_prologue(
    variant: Variant,
    v: usize,
    c: usize,
    d: usize,
    gamma: f64,
    rotation_angle: f64,
) -> Result<Prologue, SynthesisError> {
    if !variant.is_transformer() {
        return Err(SynthesisError::Invalid(format!("{variant} is not a transformer")));
    }
    if d < 2 * v + 2 {
        return Err(SynthesisError::DimensionTooSmall { d, needed: 2 * v + 2 });
    }
    if !(gamma > 0.0 && gamma <= 0.1) {
        return Err(SynthesisError::Invalid("γ must lie in (0, 0.1]".into()));
    }
    let token_embed = Matrix::from_fn(d, v, |i, j| if i == j { 1.0 } else { 0.0 });
    let mut pos_embed = Matrix::zeros(d, c);
    for p in 0..c {
        let (a, b) = position_coefficients(p);
        pos_embed[(2 * v, p)] = a;
        pos_embed[(2 * v + 1, p)] = b;
    }
    let mut shift = Matrix::zeros(d, d);
    let mut proj = Matrix::zeros(d, d);
    for j in 0..v {
        shift[(v + j, j)] = 1.0;
        proj[(v + j, v + j)] = 1.0;
    }
    let mut rot = Matrix::identity(d);
    let (s, co) = rotation_angle.sin_cos();
    rot[(v, v)] = co;
    rot[(2 * v, v)] = s;
    rot[(v, 2 * v)] = -s;
    rot[(2 * v, 2 * v)] = co;
    let attn = if variant.split_attention() {
        Attention::Split {
            v: shift.scale(gamma.sqrt()),
            o: rot.matmul(&proj).scale(gamma.sqrt()),
            q: Matrix::zeros(d, d),
            k: Matrix::zeros(d, d),
        }
    } else {
        Attention::Fused { vo: rot.matmul(&shift).scale(gamma), qk: Matrix::zeros(d, d) }
    };
    Ok(Prologue { token_embed, pos_embed, block: TxBlock { attn, mlp: zero_mlp(variant, d) }, gamma, rotation_angle })
}

fn zero_mlp(variant: Variant, d: usize) -> Mlp {
    if variant.two_layer_mlp() {
        Mlp::Two { w1: Matrix::zeros(d, d), b1: Matrix::zeros(d, 1), w2: Matrix::zeros(d, d), b2: Matrix::zeros(d, 1) }
    } else {
        Mlp::One { w: Matrix::zeros(d, d), b: Matrix::zeros(d, 1) }
    }
}

fn zero_attention(variant: Variant, d: usize) -> Attention {
    let z = || Matrix::zeros(d, d);
    if variant.split_attention() {
        Attention::Split { v: z(), o: z(), q: z(), k: z() }
    } else {
        Attention::Fused { vo: z(), qk: z() }
    }
}

impl Prologue {
    /// One-block network holding only the prologue, classifier zero.
    fn network(&self, classes: usize) -> TransformerParams {
        let d = self.token_embed.rows();
        TransformerParams {
            token_embed: self.token_embed.clone(),
            pos_embed: self.pos_embed.clone(),
            blocks: vec![self.block.clone()],
            last_w: Matrix::zeros(classes, d),
            last_b: None,
        }
    }

    /// First-block representation of every position of `batch`.
    pub fn features(&self, batch: &TokenBatch) -> Result<Matrix, SynthesisError> {
        Ok(forward_transformer(&self.network(1), batch, NormPlacement::Post, LnMode::Exact, false)?.features)
    }

    pub fn reg_sq(&self) -> f64 {
        match &self.block.attn {
            Attention::Fused { vo, qk } => vo.frobenius_sq() + qk.frobenius_sq(),
            Attention::Split { v, o, q, k } => v.frobenius_sq() + o.frobenius_sq() + q.frobenius_sq() + k.frobenius_sq(),
        }
    }
}

/// Brute-force separation of the prologue over every context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrologueMargin {
    pub contexts: usize,
    /// Smallest distance between token parts of prefix averages, over `√d`.
    pub m_tilde: f64,
    pub min_distance: f64,
    /// `γ√d·m̃`.
    pub bound: f64,
}

/// Enumerates all contexts of length `1..=C` and measures how far apart the
/// prologue places them.
pub fn prologue_margin(prologue: &Prologue, vocab: usize, context: usize) -> Result<PrologueMargin, SynthesisError> {
    let d = prologue.token_embed.rows();
    let mut sequences: Vec<Vec<usize>> = vec![vec![]];
    let mut all = Vec::new();
    for _ in 0..context {
        sequences = sequences
            .iter()
            .flat_map(|s| (0..vocab).map(move |t| [s.as_slice(), &[t]].concat()))
            .collect();
        all.extend(sequences.iter().cloned());
    }
    let batch = TokenBatch { vocab, context, sequences: all.clone() };
    let feats = prologue.features(&batch)?;
    let mut last = Vec::with_capacity(all.len());
    let mut offset = 0;
    for s in &all {
        offset += s.len();
        last.push(feats.column(offset - 1));
    }
    // Token part of the uniform prefix averages of the normalized embeddings.
    let mut averages = Vec::with_capacity(all.len());
    for s in &all {
        let emb = Matrix::from_fn(d, s.len(), |i, p| prologue.token_embed[(i, s[p])] + prologue.pos_embed[(i, p)]);
        let z = layer_norm(&emb, LnMode::Exact)?.normalized;
        let avg: Vec<f64> = (0..vocab).map(|i| (0..s.len()).map(|p| z[(i, p)]).sum::<f64>() / s.len() as f64).collect();
        averages.push(avg);
    }
    let (mut m_tilde, mut min_distance) = (f64::INFINITY, f64::INFINITY);
    for i in 0..all.len() {
        for j in 0..i {
            m_tilde = m_tilde.min(distance(&averages[i], &averages[j]) / (d as f64).sqrt());
            min_distance = min_distance.min(distance(&last[i], &last[j]));
        }
    }
    Ok(PrologueMargin {
        contexts: all.len(),
        m_tilde,
        min_distance,
        bound: prologue.gamma * (d as f64).sqrt() * m_tilde,
    })
}

#[derive(Clone, Debug)]
pub struct TransformerSynthesis {
    pub params: TransformerParams,
    pub plan: CurvePlan,
    pub ledger: BoundLedger,
    pub prologue: Prologue,
    pub rotation: Matrix,
    pub targets: Matrix,
    pub reference_blocks: Vec<ResBlock>,
}

/// Prologue plus the ResNet stages in the MLP branches; the classifier is
/// the rotated GUFM classifier with a zero bias.
pub fn synthesize_transformer(
    dataset: &Dataset,
    solution: &GufmSolution,
    config: &SynthesisConfig,
) -> Result<TransformerSynthesis, SynthesisError> {
    config.validate()?;
    let variant = config.variant;
    let Inputs::Tokens(batch) = &dataset.inputs else {
        return Err(SynthesisError::Invalid("transformer synthesis needs token inputs".into()));
    };
    let d = solution.x.rows();
    if solution.x.cols() != dataset.num_samples() || solution.w.shape() != (dataset.num_classes, d) {
        return Err(SynthesisError::Invalid("solution does not match the dataset".into()));
    }
    let gamma = config.gamma_value();
    let (rotation, w_last, targets) = rotated_solution(solution, config);

    let mut chosen = None;
    for attempt in 0..config.embed_retries.max(1) {
        let angle = 1e-3 / 2f64.powi(attempt as i32);
        let prologue = transformer_prologue(variant, batch.vocab, batch.context, d, gamma, angle)?;
        let mut x1 = prologue.features(batch)?;
        let mut ok = true;
        for class in &dataset.classes {
            let first = x1.column(class[0]);
            for &i in &class[1..] {
                ok &= distance(&first, &x1.column(i)) <= 1e-12;
                x1.set_column(i, &first);
            }
        }
        for (a, ca) in dataset.classes.iter().enumerate() {
            for cb in &dataset.classes[..a] {
                ok &= distance(&x1.column(ca[0]), &x1.column(cb[0])) > 1e-6;
            }
            for t in targets.columns() {
                ok &= distance(&x1.column(ca[0]), &t) > 1e-6;
            }
        }
        if ok {
            chosen = Some((prologue, x1));
            break;
        }
    }
    let (prologue, x1) = chosen.ok_or(SynthesisError::CollisionPersists { attempts: config.embed_retries.max(1) })?;
    let plan = plan_curves(&x1, &targets, &dataset.labels, &plan_options(config))?;
    let stages = build_stages(&sample_columns(&x1, &plan), &plan, config, variant, 1)?;
    let mut ledger = stages.ledger;
    ledger.owners.insert(0, BlockOwner::Prologue);
    ledger.gamma = Some(gamma);
    ledger.prologue_reg_sum = Some(0.5 * config.lambda * prologue.reg_sq());

    let mut blocks = vec![prologue.block.clone()];
    blocks.extend(stages.blocks.into_iter().map(|b| TxBlock {
        attn: zero_attention(variant, d),
        mlp: match b {
            ResBlock::One { w, b } => Mlp::One { w, b },
            ResBlock::Two { w1, b1, w2, b2 } => Mlp::Two { w1, b1, w2, b2 },
        },
    }));
    let params = TransformerParams {
        token_embed: prologue.token_embed.clone(),
        pos_embed: prologue.pos_embed.clone(),
        blocks,
        last_b: Some(Matrix::zeros(dataset.num_classes, 1)),
        last_w: w_last,
    };
    Ok(TransformerSynthesis {
        params,
        plan,
        ledger,
        prologue,
        rotation,
        targets,
        reference_blocks: stages.reference,
    })
}

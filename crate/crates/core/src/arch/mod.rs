//! Residual networks and causal transformers with LayerNorm.
//!
//! Parameter containers are generic over their storage so the same forward
//! code runs on plain matrices (placed on a throwaway tape) and on tape
//! variables during training.

mod container;
mod objective;
mod resnet;
mod transformer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::NumericsError;

pub use container::{Container, ContainerError, ContainerHeader, TensorInfo};
pub use objective::{
    deepen_resnet, deepen_transformer, evaluate, objective, objective_and_gradient, penalty, Inputs,
    Penalty, Regularization,
};
pub use resnet::{
    forward_resnet, forward_resnet_tape, init_resnet, ResBlock, ResNetForward, ResNetOutput,
    ResNetParams,
};
pub use transformer::{
    embed_tokens, forward_transformer, forward_transformer_tape, init_transformer, Attention,
    Mlp, TokenBatch, TransformerForward, TransformerOutput, TransformerParams, TxBlock,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence of length {len} exceeds context length {context}")]
    ContextTooLong { len: usize, context: usize },
    #[error("unknown tag {0:?}")]
    UnknownTag(String),
}

/// Where LayerNorm sits relative to the residual addition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    Post,
    Pre,
}

/// Architecture family: ResNets with one or two linear layers per block and
/// transformers named by (attention matrices, MLP layers).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Rn1,
    Rn2,
    T11,
    T12,
    T21,
    T22,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Rn1, Variant::Rn2, Variant::T11, Variant::T12, Variant::T21, Variant::T22];

    pub fn is_transformer(self) -> bool {
        !matches!(self, Variant::Rn1 | Variant::Rn2)
    }

    /// Two linear layers inside each MLP branch.
    pub fn two_layer_mlp(self) -> bool {
        matches!(self, Variant::Rn2 | Variant::T12 | Variant::T22)
    }

    /// Separate query/key and value/output matrices.
    pub fn split_attention(self) -> bool {
        matches!(self, Variant::T21 | Variant::T22)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Rn1 => "rn1",
            Variant::Rn2 => "rn2",
            Variant::T11 => "t11",
            Variant::T12 => "t12",
            Variant::T21 => "t21",
            Variant::T22 => "t22",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| ArchError::UnknownTag(s.to_string()))
    }
}

impl NormPlacement {
    pub fn tag(self) -> &'static str {
        match self {
            NormPlacement::Post => "post",
            NormPlacement::Pre => "pre",
        }
    }
}

impl fmt::Display for NormPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for NormPlacement {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "post" => Ok(NormPlacement::Post),
            "pre" => Ok(NormPlacement::Pre),
            _ => Err(ArchError::UnknownTag(s.to_string())),
        }
    }
}

/// Fit loss on the logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Mse,
}

impl LossKind {
    pub fn tag(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Mse => "mse",
        }
    }

    /// Loss value and its gradient with respect to the logits.
    pub fn eval(
        self,
        logits: &crate::numerics::Matrix,
        targets: &crate::numerics::Matrix,
    ) -> (f64, crate::numerics::Matrix) {
        match self {
            LossKind::Ce => crate::numerics::cross_entropy(logits, targets),
            LossKind::Mse => crate::numerics::mse(logits, targets),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for LossKind {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "mse" => Ok(LossKind::Mse),
            _ => Err(ArchError::UnknownTag(s.to_string())),
        }
    }
}

/// Which penalty term a weight tensor contributes to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegClass {
    /// Biases and embedding layers.
    Exempt,
    /// Every other weight matrix except the classifier.
    Hidden,
    /// The classifier weight.
    Last,
}

/// Either architecture family.
#[derive(Clone, Debug, PartialEq)]
pub enum Network {
    ResNet(ResNetParams),
    Transformer(TransformerParams),
}

impl Network {
    pub fn variant(&self) -> Variant {
        match self {
            Network::ResNet(p) => p.variant(),
            Network::Transformer(p) => p.variant(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &crate::numerics::Matrix, RegClass)> {
        match self {
            Network::ResNet(p) => p.named_tensors(),
            Network::Transformer(p) => p.named_tensors(),
        }
    }

    pub fn flatten(&self) -> Vec<crate::numerics::Matrix> {
        match self {
            Network::ResNet(p) => p.flatten(),
            Network::Transformer(p) => p.flatten(),
        }
    }

    /// Rebuilds a network of the same shape from [`Network::flatten`] output.
    pub fn unflatten(&self, flat: &[crate::numerics::Matrix]) -> Network {
        match self {
            Network::ResNet(p) => Network::ResNet(p.unflatten(flat)),
            Network::Transformer(p) => Network::Transformer(p.unflatten(flat)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("pre".parse::<NormPlacement>().unwrap(), NormPlacement::Pre);
        assert_eq!("mse".parse::<LossKind>().unwrap(), LossKind::Mse);
        assert!("rn3".parse::<Variant>().is_err());
        assert_eq!(serde_json::to_string(&Variant::T21).unwrap(), "\"t21\"");
    }
}

//! Flat binary parameter container.
//!
//! Layout: the 8-byte magic `CLABPAR1`, the header length as a little-endian
//! `u64`, a UTF-8 JSON header, then every tensor's entries as little-endian
//! `f64` in row-major order, tensors in header order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    Attention, Mlp, Network, NormPlacement, ResBlock, ResNetParams, TransformerParams, TxBlock,
    Variant,
};
use crate::numerics::Matrix;

const MAGIC: &[u8; 8] = b"CLABPAR1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("not a parameter container (bad magic)")]
    BadMagic,
    #[error("container is missing tensor {0:?}")]
    Missing(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerHeader {
    /// Absent for containers that do not hold a full network.
    pub variant: Option<Variant>,
    pub placement: Option<NormPlacement>,
    pub tensors: Vec<TensorInfo>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: ContainerHeader,
    pub tensors: Vec<Matrix>,
}

impl Container {
    /// A container of loose named tensors.
    pub fn from_tensors(named: Vec<(String, Matrix)>, metadata: serde_json::Value) -> Self {
        let infos = named
            .iter()
            .map(|(name, m)| TensorInfo { name: name.clone(), shape: [m.rows(), m.cols()] })
            .collect();
        Container {
            header: ContainerHeader { variant: None, placement: None, tensors: infos, metadata },
            tensors: named.into_iter().map(|(_, m)| m).collect(),
        }
    }

    pub fn from_network(net: &Network, placement: NormPlacement, metadata: serde_json::Value) -> Self {
        let named = net.named_tensors().into_iter().map(|(n, m, _)| (n, m.clone())).collect();
        let mut c = Container::from_tensors(named, metadata);
        c.header.variant = Some(net.variant());
        c.header.placement = Some(placement);
        c
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.header.tensors.iter().position(|t| t.name == name).map(|i| &self.tensors[i])
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), ContainerError> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for m in &self.tensors {
            for v in m.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ContainerError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len))
            .map_err(|_| ContainerError::Invalid("header too large".into()))?;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: ContainerHeader = serde_json::from_slice(&header)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut buf = [0u8; 8];
        for info in &header.tensors {
            let [rows, cols] = info.shape;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push(Matrix::from_vec(rows, cols, data).expect("length matches shape"));
        }
        Ok(Container { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        Container::read_from(BufReader::new(File::open(path)?))
    }

    /// Rebuilds the network described by the header.
    pub fn to_network(&self) -> Result<Network, ContainerError> {
        let variant = self
            .header
            .variant
            .ok_or_else(|| ContainerError::Invalid("container holds no network".into()))?;
        let map: HashMap<&str, &Matrix> = self
            .header
            .tensors
            .iter()
            .zip(&self.tensors)
            .map(|(info, m)| (info.name.as_str(), m))
            .collect();
        let take = |name: &str| -> Result<Matrix, ContainerError> {
            map.get(name).map(|m| (*m).clone()).ok_or_else(|| ContainerError::Missing(name.into()))
        };
        let blocks = self
            .header
            .tensors
            .iter()
            .filter_map(|t| t.name.strip_prefix("block")?.split('.').next()?.parse::<usize>().ok())
            .max()
            .unwrap_or(0);
        let last_b = map.get("last.b").map(|m| (*m).clone());
        if variant.is_transformer() {
            let mut out = Vec::with_capacity(blocks);
            for l in 1..=blocks {
                let t = |s: &str| take(&format!("block{l}.{s}"));
                let attn = if variant.split_attention() {
                    Attention::Split { v: t("attn.v")?, o: t("attn.o")?, q: t("attn.q")?, k: t("attn.k")? }
                } else {
                    Attention::Fused { vo: t("attn.vo")?, qk: t("attn.qk")? }
                };
                let mlp = if variant.two_layer_mlp() {
                    Mlp::Two { w1: t("mlp.w1")?, b1: t("mlp.b1")?, w2: t("mlp.w2")?, b2: t("mlp.b2")? }
                } else {
                    Mlp::One { w: t("mlp.w")?, b: t("mlp.b")? }
                };
                out.push(TxBlock { attn, mlp });
            }
            Ok(Network::Transformer(TransformerParams {
                token_embed: take("embed.token")?,
                pos_embed: take("embed.pos")?,
                blocks: out,
                last_w: take("last.w")?,
                last_b,
            }))
        } else {
            let mut out = Vec::with_capacity(blocks);
            for l in 1..=blocks {
                let t = |s: &str| take(&format!("block{l}.{s}"));
                out.push(if variant.two_layer_mlp() {
                    ResBlock::Two { w1: t("w1")?, b1: t("b1")?, w2: t("w2")?, b2: t("b2")? }
                } else {
                    ResBlock::One { w: t("w")?, b: t("b")? }
                });
            }
            Ok(Network::ResNet(ResNetParams {
                embed_w: take("embed.w")?,
                embed_b: take("embed.b")?,
                blocks: out,
                last_w: take("last.w")?,
                last_b,
            }))
        }
    }
}

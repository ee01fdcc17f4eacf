//! Weight checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"LIKRACKP"
//! 8       4     format version (u32, currently 1)
//! 12      8     header length H (u64)
//! 20      H     header: UTF-8 JSON, see `Header`
//! 20+H    ...   payload: f32 values of every block, back to back
//! ```
//!
//! The header names every block with its shape and its element offset into
//! the payload. Base and adapter weights live in separate files of kind
//! `"base"` and `"adapter"`; an adapter file records the checksum of the base
//! it was trained against, so one base can be shared by many adapters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{LoraConfig, LoraTarget, ModelConfig};
use super::weights::{BaseWeights, LoraAdapter, LoraBlock};
use super::LmError;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LIKRACKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Base,
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: CheckpointKind,
    pub dtype: String,
    pub model_config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_config: Option<LoraConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_checksum: Option<String>,
    pub blocks: Vec<BlockEntry>,
}

fn encode(header_base: Header, params: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>, LmError> {
    let mut header = header_base;
    let mut offset = 0;
    header.blocks = params
        .iter()
        .map(|(name, t)| {
            let e = BlockEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel();
            e
        })
        .collect();
    let json = serde_json::to_vec(&header).map_err(|e| LmError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + offset * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params {
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

type Blocks = Vec<(String, Tensor<f32>)>;

fn decode(bytes: &[u8]) -> Result<(Header, Blocks), LmError> {
    let bad = |msg: &str| LmError::Checkpoint(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(LmError::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload_start = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..payload_start])
        .map_err(|e| LmError::Checkpoint(format!("header: {e}")))?;
    if header.dtype != "f32" {
        return Err(LmError::Checkpoint(format!("unsupported dtype {}", header.dtype)));
    }
    let payload = &bytes[payload_start..];
    let mut blocks = Vec::with_capacity(header.blocks.len());
    for e in &header.blocks {
        let n: usize = e.shape.iter().product();
        let start = e.offset * 4;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(LmError::Checkpoint(format!("block `{}` runs past the payload", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((header, blocks))
}

pub fn base_to_bytes(weights: &BaseWeights<f32>) -> Result<Vec<u8>, LmError> {
    let header = Header {
        kind: CheckpointKind::Base,
        dtype: "f32".into(),
        model_config: weights.config.clone(),
        lora_config: None,
        base_checksum: None,
        blocks: Vec::new(),
    };
    encode(header, &weights.params())
}

pub fn base_from_bytes(bytes: &[u8]) -> Result<BaseWeights<f32>, LmError> {
    let (header, blocks) = decode(bytes)?;
    if header.kind != CheckpointKind::Base {
        return Err(LmError::Checkpoint("expected a base checkpoint".into()));
    }
    header.model_config.validate()?;
    BaseWeights::from_named(header.model_config, blocks)
}

pub fn adapter_to_bytes(
    adapter: &LoraAdapter<f32>,
    model_config: &ModelConfig,
    base_checksum: &str,
) -> Result<Vec<u8>, LmError> {
    let header = Header {
        kind: CheckpointKind::Adapter,
        dtype: "f32".into(),
        model_config: model_config.clone(),
        lora_config: Some(adapter.config.clone()),
        base_checksum: Some(base_checksum.to_string()),
        blocks: Vec::new(),
    };
    encode(header, &adapter.params())
}

/// An adapter plus the provenance recorded next to it.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCheckpoint {
    pub adapter: LoraAdapter<f32>,
    pub model_config: ModelConfig,
    pub base_checksum: String,
}

impl AdapterCheckpoint {
    /// Fails unless this adapter was trained on exactly `base`.
    pub fn check_base(&self, base: &BaseWeights<f32>) -> Result<(), LmError> {
        if self.model_config != base.config {
            return Err(LmError::Incompatible("adapter model config differs from base".into()));
        }
        let sum = base.checksum();
        if sum != self.base_checksum {
            return Err(LmError::Incompatible(format!(
                "adapter was trained on base {} but got {}",
                self.base_checksum, sum
            )));
        }
        Ok(())
    }
}

fn parse_block_name(name: &str) -> Option<(usize, LoraTarget, bool)> {
    let rest = name.strip_prefix("layers.")?;
    let mut parts = rest.split('.');
    let layer = parts.next()?.parse().ok()?;
    let target = match parts.next()? {
        "wq" => LoraTarget::Query,
        "wk" => LoraTarget::Key,
        "wv" => LoraTarget::Value,
        "wo" => LoraTarget::Output,
        _ => return None,
    };
    let is_a = match parts.next()? {
        "lora_a" => true,
        "lora_b" => false,
        _ => return None,
    };
    parts.next().is_none().then_some((layer, target, is_a))
}

pub fn adapter_from_bytes(bytes: &[u8]) -> Result<AdapterCheckpoint, LmError> {
    let (header, blocks) = decode(bytes)?;
    if header.kind != CheckpointKind::Adapter {
        return Err(LmError::Checkpoint("expected an adapter checkpoint".into()));
    }
    let config = header
        .lora_config
        .ok_or_else(|| LmError::Checkpoint("adapter header lacks lora_config".into()))?;
    let base_checksum = header
        .base_checksum
        .ok_or_else(|| LmError::Checkpoint("adapter header lacks base_checksum".into()))?;
    if blocks.len() % 2 != 0 {
        return Err(LmError::Checkpoint("adapter blocks must come in A/B pairs".into()));
    }
    let mut out = Vec::new();
    for pair in blocks.chunks_exact(2) {
        let (na, ta) = &pair[0];
        let (nb, tb) = &pair[1];
        match (parse_block_name(na), parse_block_name(nb)) {
            (Some((la, xa, true)), Some((lb, xb, false))) if la == lb && xa == xb => {
                out.push(LoraBlock {
                    layer: la,
                    target: xa,
                    a: ta.clone().with_requires_grad(false),
                    b: tb.clone().with_requires_grad(false),
                });
            }
            _ => {
                return Err(LmError::Checkpoint(format!(
                    "unexpected adapter block pair `{na}`, `{nb}`"
                )))
            }
        }
    }
    let adapter = LoraAdapter { config, blocks: out };
    adapter.check_compatible(&header.model_config)?;
    Ok(AdapterCheckpoint {
        adapter,
        model_config: header.model_config,
        base_checksum,
    })
}

pub fn save_base(path: &Path, weights: &BaseWeights<f32>) -> Result<(), LmError> {
    fs::write(path, base_to_bytes(weights)?)?;
    Ok(())
}

pub fn load_base(path: &Path) -> Result<BaseWeights<f32>, LmError> {
    base_from_bytes(&fs::read(path)?)
}

pub fn save_adapter(
    path: &Path,
    adapter: &LoraAdapter<f32>,
    base: &BaseWeights<f32>,
) -> Result<(), LmError> {
    fs::write(path, adapter_to_bytes(adapter, &base.config, &base.checksum())?)?;
    Ok(())
}

pub fn load_adapter(path: &Path) -> Result<AdapterCheckpoint, LmError> {
    adapter_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn base_round_trip() {
        let w = BaseWeights::<f32>::init(&cfg(), 11).unwrap();
        let bytes = base_to_bytes(&w).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = base_from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(base_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn adapter_round_trip_records_base() {
        let w = BaseWeights::<f32>::init(&cfg(), 11).unwrap();
        let mut ad = LoraAdapter::<f32>::new(&cfg(), &LoraConfig::default(), 2).unwrap();
        ad.blocks[0].b.data_mut()[3] = 0.25;
        let bytes = adapter_to_bytes(&ad, &w.config, &w.checksum()).unwrap();
        let ck = adapter_from_bytes(&bytes).unwrap();
        assert_eq!(ck.adapter.checksum(), ad.checksum());
        ck.check_base(&w).unwrap();
        let other = BaseWeights::<f32>::init(&cfg(), 12).unwrap();
        assert!(ck.check_base(&other).is_err());
    }

    #[test]
    fn kinds_are_not_interchangeable() {
        let w = BaseWeights::<f32>::init(&cfg(), 11).unwrap();
        let ad = LoraAdapter::<f32>::new(&cfg(), &LoraConfig::default(), 2).unwrap();
        let a_bytes = adapter_to_bytes(&ad, &w.config, &w.checksum()).unwrap();
        assert!(base_from_bytes(&a_bytes).is_err());
        assert!(adapter_from_bytes(&base_to_bytes(&w).unwrap()).is_err());
    }

    #[test]
    fn rejects_garbage() {
        assert!(base_from_bytes(b"nope").is_err());
        let w = BaseWeights::<f32>::init(&cfg(), 11).unwrap();
        let mut bytes = base_to_bytes(&w).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(base_from_bytes(&bytes).is_err());
    }
}

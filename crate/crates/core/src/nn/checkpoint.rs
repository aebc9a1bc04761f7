//! Versioned binary container: the magic `DDLAB1`, a little-endian `u64`
//! header length, a JSON header, then little-endian `f64` parameter blocks
//! in the order the header declares.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::lora::{LoraAdapter, LoraTarget};
use super::model::{Architecture, DenoiserModel, ModelRole};
use crate::error::{LabError, Result};
use crate::io::atomic_write;

pub const MAGIC: &[u8; 6] = b"DDLAB1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraMeta {
    pub rank: usize,
    pub scale: f64,
    pub targets: Vec<LoraTarget>,
}

/// Provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schedule: Option<String>,
    pub seed: u64,
    pub training: serde_json::Value,
    /// Distillation method for students.
    pub method: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub role: String,
    pub architecture: Architecture,
    #[serde(flatten)]
    pub meta: CheckpointMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraMeta>,
    pub blocks: Vec<BlockInfo>,
}

fn encode(header: &CheckpointHeader, params: &[f64]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<f64>)> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(LabError::Checkpoint("missing DDLAB1 magic".into()));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[6..14]);
    let hlen = u64::from_le_bytes(len) as usize;
    let body = bytes
        .get(14..14 + hlen)
        .ok_or_else(|| LabError::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let data = &bytes[14 + hlen..];
    let expected: usize = header.blocks.iter().map(|b| b.len).sum();
    if data.len() != expected * 8 {
        return Err(LabError::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            expected * 8,
            data.len()
        )));
    }
    let params = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, params))
}

pub fn model_to_bytes(model: &DenoiserModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        role: model.role.as_str().to_string(),
        architecture: model.arch.clone(),
        meta: meta.clone(),
        lora: None,
        blocks: model
            .arch
            .param_blocks()
            .into_iter()
            .map(|(name, len)| BlockInfo { name, len })
            .collect(),
    };
    encode(&header, &model.params)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<(DenoiserModel, CheckpointHeader)> {
    let (header, params) = decode(bytes)?;
    let role = match header.role.as_str() {
        "base" => ModelRole::Base,
        "distilled" => ModelRole::Distilled,
        other => {
            return Err(LabError::Checkpoint(format!(
                "expected a model checkpoint, found role `{other}`"
            )))
        }
    };
    let model = DenoiserModel::from_params(header.architecture.clone(), role, params)?;
    Ok((model, header))
}

pub fn adapter_to_bytes(
    adapter: &LoraAdapter,
    arch: &Architecture,
    meta: &CheckpointMeta,
) -> Result<Vec<u8>> {
    let mut blocks = Vec::new();
    for t in &adapter.targets {
        blocks.push(BlockInfo {
            name: format!("layer{}.lora_down", t.layer),
            len: adapter.rank * t.n_in,
        });
        blocks.push(BlockInfo {
            name: format!("layer{}.lora_up", t.layer),
            len: adapter.rank * t.n_out,
        });
    }
    let header = CheckpointHeader {
        role: "lora".into(),
        architecture: arch.clone(),
        meta: meta.clone(),
        lora: Some(LoraMeta {
            rank: adapter.rank,
            scale: adapter.scale,
            targets: adapter.targets.clone(),
        }),
        blocks,
    };
    encode(&header, &adapter.params)
}

pub fn adapter_from_bytes(bytes: &[u8]) -> Result<(LoraAdapter, CheckpointHeader)> {
    let (header, params) = decode(bytes)?;
    let meta = match (&header.role[..], &header.lora) {
        ("lora", Some(m)) => m.clone(),
        _ => return Err(LabError::Checkpoint("not a lora checkpoint".into())),
    };
    let adapter = LoraAdapter {
        rank: meta.rank,
        scale: meta.scale,
        targets: meta.targets,
        params,
    };
    adapter.check_compatible(&header.architecture)?;
    Ok((adapter, header))
}

pub fn save_model(path: &Path, model: &DenoiserModel, meta: &CheckpointMeta) -> Result<()> {
    atomic_write(path, &model_to_bytes(model, meta)?)
}

pub fn load_model(path: &Path) -> Result<(DenoiserModel, CheckpointHeader)> {
    model_from_bytes(&std::fs::read(path)?)
}

pub fn save_adapter(
    path: &Path,
    adapter: &LoraAdapter,
    arch: &Architecture,
    meta: &CheckpointMeta,
) -> Result<()> {
    atomic_write(path, &adapter_to_bytes(adapter, arch, meta)?)
}

pub fn load_adapter(path: &Path) -> Result<(LoraAdapter, CheckpointHeader)> {
    adapter_from_bytes(&std::fs::read(path)?)
}

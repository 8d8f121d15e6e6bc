//! Checkpoint file: 8-byte magic `VFMCKPT1`, `u64` LE header length, JSON
//! header, then every tensor as little-endian `f32` in header order (sorted
//! by name).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderState, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VFMCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: EncoderConfig,
    pub seed: u64,
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(state: &EncoderState<f32>, epoch: usize, path: &Path) -> Result<()> {
    let mut sorted: Vec<&Tensor<f32>> = state.params().iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let header = CheckpointHeader {
        config: state.config().clone(),
        seed: state.seed(),
        epoch,
        tensors: sorted.iter().map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + 4 * state.num_parameters());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for t in sorted {
        bytes.extend(t.data.iter().flat_map(|v| v.to_le_bytes()));
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderState<f32>, CheckpointHeader)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Corrupt(format!("{} is not a checkpoint", path.display())));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Corrupt("checkpoint header length exceeds file".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body_start])?;
    let mut offset = body_start;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        let end = offset + 4 * len;
        if end > bytes.len() {
            return Err(Error::Corrupt(format!("tensor {} truncated", entry.name)));
        }
        let data = bytes[offset..end].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        tensors.push(Tensor { name: entry.name.clone(), shape: entry.shape.clone(), data });
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes after tensors", bytes.len() - offset)));
    }
    let state = EncoderState::from_tensors(&header.config, header.seed, tensors)?;
    Ok((state, header))
}

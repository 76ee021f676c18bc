//! Versioned single-file checkpoint archive.
//!
//! ```text
//! b"COMPCKPT"          8 bytes
//! version              u32 little-endian
//! header length        u64 little-endian
//! header               JSON: config, modality order, input widths, task,
//!                      output width, seed, stage, tensor index
//! payload              f64 little-endian values, tensors in index order,
//!                      each row-major
//! ```
//!
//! Tensor names have the form `modality/layer/name`, e.g. `a/enc.0/weight`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{Modality, Task};
use crate::error::{CompError, Result};
use crate::model::{CompModel, Stage};
use crate::params::Mat;

pub const MAGIC: &[u8; 8] = b"COMPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: Config,
    pub modality_order: Vec<String>,
    pub dims: [usize; 3],
    pub task: Task,
    pub output_width: usize,
    pub seed: u64,
    pub stage: Stage,
    pub tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> CompError {
    CompError::Checkpoint(msg.into())
}

pub fn to_bytes(model: &CompModel, seed: u64, stage: Stage) -> Result<Vec<u8>> {
    let tensors: Vec<TensorEntry> = model
        .store
        .iter()
        .map(|(_, name, m)| TensorEntry {
            name: name.to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
        })
        .collect();
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        config: model.config.clone(),
        modality_order: Modality::ALL.iter().map(|m| m.name().to_string()).collect(),
        dims: model.dims,
        task: model.task,
        output_width: model.output_width,
        seed,
        stage,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, m) in model.store.iter() {
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(CompModel, CheckpointHeader)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint archive"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("header: {e}")))?;
    let order: Vec<String> = Modality::ALL.iter().map(|m| m.name().to_string()).collect();
    if header.modality_order != order {
        return Err(bad(format!("modality order {:?}, expected {order:?}", header.modality_order)));
    }
    let mut model = CompModel::new(&header.config, header.dims, header.task, header.output_width, 0)?;
    if model.store.len() != header.tensors.len() {
        return Err(bad(format!(
            "archive holds {} tensors, model has {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    let mut payload = &body[len..];
    for entry in &header.tensors {
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| bad(format!("unknown tensor {}", entry.name)))?;
        let count = entry.rows * entry.cols;
        if payload.len() < count * 8 {
            return Err(bad(format!("payload truncated at {}", entry.name)));
        }
        let values: Vec<f64> = payload[..count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        payload = &payload[count * 8..];
        let m = Mat::from_shape_vec((entry.rows, entry.cols), values).expect("count checked");
        model.store.set(id, m).map_err(|e| bad(e.to_string()))?;
    }
    if !payload.is_empty() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok((model, header))
}

pub fn save(path: &Path, model: &CompModel, seed: u64, stage: Stage) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CompError::io(dir, e))?;
    }
    fs::write(path, to_bytes(model, seed, stage)?).map_err(|e| CompError::io(path, e))
}

pub fn load(path: &Path) -> Result<(CompModel, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| CompError::io(path, e))?;
    from_bytes(&bytes)
}

/// Refuse a checkpoint whose architecture or input widths differ from what
/// the caller is about to train.
pub fn check_compatible(header: &CheckpointHeader, config: &Config, dims: [usize; 3]) -> Result<()> {
    if header.dims != dims {
        return Err(bad(format!("input widths {:?} vs dataset {:?}", header.dims, dims)));
    }
    let a = &header.config;
    let same = a.d == config.d
        && a.c == config.c
        && a.p == config.p
        && a.blocks == config.blocks
        && a.m_msa == config.m_msa
        && a.heads == config.heads
        && a.batch_n == config.batch_n
        && a.separate_error_head == config.separate_error_head;
    if !same {
        return Err(bad("architecture keys (d, c, p, L, m_msa, heads, batch_n, separate_error_head) differ"));
    }
    Ok(())
}

//! Model checkpoints.
//!
//! Layout: an 8-byte magic (`GSDIFF\0\x01`), a little-endian `u32` header
//! length, a JSON header, then raw little-endian `f64` payloads in header
//! order. The payload is always written as `f64` so files stay readable no
//! matter which scalar width the loading build uses.
//!
//! The header's `lineage` records the chain of checkpoints this one was
//! trained from (oldest first), so fine-tuning stages can verify they start
//! from the intended pre-training run.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{TensorError, TensorResult};
use crate::optim::ParamSet;
use crate::tensor::Tensor;
use crate::Real;

const MAGIC: &[u8; 8] = b"GSDIFF\x00\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Which model this is (e.g. "node-denoiser", "edge-classifier").
    pub kind: String,
    /// Training phase that produced it (e.g. "pretrain", "finetune").
    pub phase: String,
    /// Identifiers of ancestor checkpoints, oldest first.
    pub lineage: Vec<String>,
    pub step: u64,
    pub seed: u64,
    /// Training configuration snapshot; free-form JSON.
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

impl CheckpointHeader {
    /// Identifier other checkpoints use to reference this one in `lineage`.
    pub fn identity(&self) -> String {
        format!("{}/{}/step{}", self.kind, self.phase, self.step)
    }
}

pub fn save(path: &Path, mut header: CheckpointHeader, params: &ParamSet) -> TensorResult<()> {
    header.format_version = FORMAT_VERSION;
    header.params = params
        .export()
        .iter()
        .map(|(name, t)| ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let header_bytes = serde_json::to_vec(&header).map_err(|e| TensorError::CheckpointFormat {
        msg: format!("header encode: {}", e),
    })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, t) in params.export() {
        for &v in t.data() {
            w.write_all(&(v as f64).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> TensorResult<(CheckpointHeader, HashMap<String, Tensor>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::CheckpointFormat {
            msg: "bad magic; not a checkpoint file".into(),
        });
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| TensorError::CheckpointFormat {
            msg: format!("header decode: {}", e),
        })?;
    if header.format_version != FORMAT_VERSION {
        return Err(TensorError::CheckpointFormat {
            msg: format!("unsupported format version {}", header.format_version),
        });
    }
    let mut values = HashMap::new();
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf) as Real);
        }
        let t = Tensor::from_vec(&entry.shape, data)?;
        if values.insert(entry.name.clone(), t).is_some() {
            return Err(TensorError::CheckpointFormat {
                msg: format!("duplicate parameter {:?}", entry.name),
            });
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(TensorError::CheckpointFormat {
            msg: "trailing bytes after payload".into(),
        });
    }
    Ok((header, values))
}

/// Load into an existing parameter set, checking names and shapes, and verify
/// the checkpoint `kind` matches what the caller expects.
pub fn load_into(path: &Path, expected_kind: &str, params: &mut ParamSet) -> TensorResult<CheckpointHeader> {
    let (header, values) = load(path)?;
    if header.kind != expected_kind {
        return Err(TensorError::CheckpointFormat {
            msg: format!("checkpoint kind {:?}, expected {:?}", header.kind, expected_kind),
        });
    }
    if header.params.len() != params.len() {
        return Err(TensorError::CheckpointFormat {
            msg: format!(
                "checkpoint has {} parameters, model has {}",
                header.params.len(),
                params.len()
            ),
        });
    }
    params.import(&values)?;
    Ok(header)
}

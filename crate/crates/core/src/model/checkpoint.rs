//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header, raw little-endian `f64` parameter values in storage order, and a
//! trailing `u64` FNV-1a checksum of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::transformer::{ModelConfig, Seq2SeqModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GENRETCK";
pub const FORMAT_VERSION: u32 = 1;
pub const FLAG_SCL_PRETRAINED: &str = "scl-pretrained";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Hash of the pipeline configuration that produced the weights.
    pub config_hash: String,
    pub flags: Vec<String>,
    /// Free-form label, e.g. the system variant name.
    pub label: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: CheckpointMeta,
    params: Vec<(String, [usize; 2])>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn to_bytes(model: &Seq2SeqModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = Header {
        model: model.config().clone(),
        meta: meta.clone(),
        params: model.layout(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(32 + header.len() + model.num_parameters() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.store().params() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

fn corrupt(msg: &str) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {msg}"))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Seq2SeqModel, CheckpointMeta)> {
    if bytes.len() < 8 + 4 + 8 + 8 {
        return Err(corrupt("truncated"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has format {version}, expected {FORMAT_VERSION}"
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize.checked_add(header_len).ok_or_else(|| corrupt("header length"))?;
    if header_end > body.len() {
        return Err(corrupt("header length"));
    }
    let header: Header =
        serde_json::from_slice(&body[20..header_end]).map_err(|e| corrupt(&format!("header: {e}")))?;
    let mut model = Seq2SeqModel::new(header.model, 0)?;
    if model.layout() != header.params {
        return Err(Error::Checkpoint("parameter layout does not match model config".into()));
    }
    let mut values = body[header_end..].chunks_exact(8);
    if values.len() != model.num_parameters() || !values.remainder().is_empty() {
        return Err(corrupt("parameter payload size"));
    }
    for p in model.store_mut().params_mut() {
        for v in p.value.data_mut() {
            *v = f64::from_le_bytes(values.next().unwrap().try_into().unwrap());
        }
    }
    Ok((model, header.meta))
}

pub fn save_checkpoint(model: &Seq2SeqModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Seq2SeqModel, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

//! Container for named `f64` matrices behind a JSON header, used for model
//! checkpoints (`MGTC`) and exported embeddings (`MGTE`).
//!
//! ```text
//! magic, u32 version, u32 len + JSON header, u32 entries
//! per entry: u32 len + UTF-8 name, u32 rows, u32 cols, rows*cols f64 (LE)
//! ```
//!
//! Files are parsed completely before anything is handed back, so a
//! truncated or corrupt file never yields a partially loaded model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{put_len, put_str, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MulgtModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MGTC";
pub const EMBEDDING_MAGIC: &[u8; 4] = b"MGTE";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn encode(&self, magic: &[u8; 4]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(magic);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &serde_json::to_string(&self.header)?)?;
        put_len(&mut out, self.entries.len(), "entry count")?;
        for (name, t) in &self.entries {
            put_str(&mut out, name)?;
            put_len(&mut out, t.rows(), "rows")?;
            put_len(&mut out, t.cols(), "cols")?;
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.magic(magic)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::parse(
                at,
                format!("unsupported container version {version}"),
            ));
        }
        let header_at = r.offset();
        let header = r.string("header")?;
        let header = serde_json::from_str(&header)
            .map_err(|e| Error::parse(header_at, format!("bad header: {e}")))?;
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string("entry name")?;
            let shape_at = r.offset();
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            let len = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| {
                    Error::parse(
                        shape_at,
                        format!("entry {name:?} of {rows}x{cols} exceeds the file"),
                    )
                })?;
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(r.f64("entry data")?);
            }
            entries.push((name, Tensor::new(rows, cols, data)?));
        }
        r.finish()?;
        Ok(Container { header, entries })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    model: ModelConfig,
}

fn checkpoint_error(msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        version: VERSION,
        msg: msg.into(),
    }
}

pub fn encode_checkpoint(model: &MulgtModel) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        kind: "checkpoint".into(),
        model: model.config().clone(),
    };
    Container {
        header: serde_json::to_value(&header)?,
        entries: model
            .params()
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.clone()))
            .collect(),
    }
    .encode(CHECKPOINT_MAGIC)
}

/// Rebuilds the model from the stored configuration and then overwrites
/// every parameter, after checking that names and shapes match exactly.
pub fn decode_checkpoint(buf: &[u8]) -> Result<MulgtModel> {
    let c = Container::decode(buf, CHECKPOINT_MAGIC)?;
    let header: CheckpointHeader = serde_json::from_value(c.header)
        .map_err(|e| checkpoint_error(format!("bad header: {e}")))?;
    if header.kind != "checkpoint" {
        return Err(checkpoint_error(format!("header kind {:?}", header.kind)));
    }
    let mut model = MulgtModel::new(header.model)?;
    restore_params(&mut model, c.entries)?;
    Ok(model)
}

/// Copies stored parameters into an already constructed model.
pub fn restore_params(model: &mut MulgtModel, entries: Vec<(String, Tensor)>) -> Result<()> {
    let store = model.params();
    if entries.len() != store.len() {
        return Err(checkpoint_error(format!(
            "{} stored parameters, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for ((_, name, expected), (stored_name, t)) in store.iter().zip(&entries) {
        if name != stored_name {
            return Err(checkpoint_error(format!(
                "expected parameter {name}, found {stored_name}"
            )));
        }
        if expected.shape() != t.shape() {
            return Err(checkpoint_error(format!(
                "{name}: stored shape {:?}, model expects {:?}",
                t.shape(),
                expected.shape()
            )));
        }
    }
    let ids: Vec<_> = model.params().ids().collect();
    for (id, (_, t)) in ids.into_iter().zip(entries) {
        *model.params_mut().get_mut(id) = t;
    }
    Ok(())
}

pub fn save_checkpoint(model: &MulgtModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MulgtModel> {
    decode_checkpoint(&fs::read(path)?)
}

/// Per-branch node embeddings keyed `"{sample_id}/{task}"`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingSet {
    pub entries: Vec<(String, Tensor)>,
}

impl EmbeddingSet {
    pub fn push(&mut self, sample_id: &str, task: &str, embedding: Tensor) {
        self.entries
            .push((format!("{sample_id}/{task}"), embedding));
    }

    pub fn get(&self, sample_id: &str, task: &str) -> Option<&Tensor> {
        let key = format!("{sample_id}/{task}");
        self.entries.iter().find(|(k, _)| *k == key).map(|(_, t)| t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let c = Container {
            header: serde_json::json!({ "kind": "embeddings" }),
            entries: self.entries.clone(),
        };
        fs::write(path, c.encode(EMBEDDING_MAGIC)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = Container::decode(&fs::read(path)?, EMBEDDING_MAGIC)?;
        Ok(EmbeddingSet { entries: c.entries })
    }
}

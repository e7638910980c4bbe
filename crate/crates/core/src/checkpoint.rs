//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//! `MFCK` | u32 version | 32-byte SHA-256 of the metadata JSON |
//! u64 len + metadata JSON | u64 len + vocabulary TSV | u32 parameter count |
//! per parameter: u32 name len, name, u32 rank, u64 extents…, f64 values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Task;
use crate::embeddings::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub task: Task,
    pub oov_seed: u64,
}

/// Hex SHA-256 of the metadata JSON stored in the header.
pub fn config_digest(meta: &CheckpointMeta) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(meta)?)))
}

pub fn to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        model: params.config.clone(),
        task: params.task.task,
        oov_seed: params.oov_seed,
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let vocab = params.vocab.to_tsv();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&meta_json));
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(vocab.len() as u64).to_le_bytes());
    out.extend_from_slice(vocab.as_bytes());
    out.extend_from_slice(&(params.store.len() as u32).to_le_bytes());
    for (name, t) in params.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} length overflows")))
    }
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "format tag")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint (tag {magic:?})", origin.display())));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let digest = r.take(32, "config digest")?.to_vec();
    let n = r.len("metadata")?;
    let meta_json = r.take(n, "metadata")?;
    if Sha256::digest(meta_json).as_slice() != digest.as_slice() {
        return Err(Error::Checkpoint("config digest does not match the stored metadata".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(meta_json)?;
    let n = r.len("vocabulary")?;
    let tsv = std::str::from_utf8(r.take(n, "vocabulary")?)
        .map_err(|_| Error::Checkpoint("vocabulary is not UTF-8".into()))?;
    let vocab = Vocab::from_tsv(tsv, origin)?;

    let count = r.u32("parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.len("extent")).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Checkpoint(format!("extents of `{name}` overflow")))?;
        let raw = r.take(numel.saturating_mul(8), &name)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = if numel == 0 { Tensor::zeros(shape) } else { Tensor::new(shape, values)? };
        store.insert(name, t)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let expected = crate::model::init_params(&meta.model, meta.task, &Vocab::new(), None, 0)?;
    for (name, t) in expected.store.iter() {
        let got = store
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if name != crate::model::EMBEDDING && got.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, config implies {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if store.len() != expected.store.len() {
        return Err(Error::Checkpoint("checkpoint has unexpected parameters".into()));
    }
    let emb_rows = store.get(crate::model::EMBEDDING)?.shape()[0];
    if emb_rows != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "embedding has {emb_rows} rows for {} vocabulary entries",
            vocab.len()
        )));
    }
    Ok(ModelParams {
        config: meta.model,
        task: meta.task.spec(),
        vocab,
        oov_seed: meta.oov_seed,
        store,
    })
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

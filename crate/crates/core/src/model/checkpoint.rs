//! Binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "MTMRCKPT"
//! version  u32
//! header   u64 length + JSON {config, vocab, embedding_seed, metadata}
//! count    u32
//! tensors  count × { u32 name length, name, u32 rows, u32 cols, rows·cols f64 }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{ModelConfig, ModelVocab, Network};
use super::tensor::Mat;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MTMRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    embedding_seed: u64,
    metadata: serde_json::Value,
}

/// Serializes `net` (with `tensors` standing in for its parameters, e.g. the
/// moving averages) plus free-form metadata.
pub fn checkpoint_bytes(net: &Network, tensors: &[Mat], metadata: &serde_json::Value) -> Result<Vec<u8>> {
    if tensors.len() != net.params.len() {
        return Err(Error::Checkpoint("tensor count does not match the network".into()));
    }
    let header = Header {
        config: net.config.clone(),
        vocab: net.vocab.words().to_vec(),
        embedding_seed: net.vocab.seed(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 8 * net.parameter_count() + 1024);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, mat) in net.params.names().iter().zip(tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(mat.rows as u32).to_le_bytes());
        out.extend_from_slice(&(mat.cols as u32).to_le_bytes());
        for v in &mat.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Inverse of [`checkpoint_bytes`]; validates every tensor name and shape.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Network, serde_json::Value)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Mat::from_vec(rows, cols, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    let vocab = ModelVocab::from_words(header.vocab, header.embedding_seed);
    let net = Network::from_tensors(header.config, vocab, tensors)?;
    Ok((net, header.metadata))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    net: &Network,
    tensors: &[Mat],
    metadata: &serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(net, tensors, metadata)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Network, serde_json::Value)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

//! Binary checkpoint format:
//!
//! ```text
//! b"EDLB" | version: u32 LE | meta_len: u64 LE | meta: UTF-8 JSON | f32 LE data...
//! ```
//!
//! The metadata carries the model config, the canonical parameter order
//! with shapes, and the init seed. Parameter data follows in that order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{param_layout, ModelConfig, TransformerLM};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EDLB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    params: Vec<ParamEntry>,
    seed: u64,
}

pub fn write_checkpoint(model: &TransformerLM, mut w: impl Write) -> Result<()> {
    let meta = Metadata {
        config: model.config().clone(),
        params: model
            .names()
            .iter()
            .zip(model.params())
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        seed: model.config().seed,
    };
    let meta = serde_json::to_vec(&meta)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;
    for t in model.params() {
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<TransformerLM> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut meta = vec![0u8; len];
    r.read_exact(&mut meta)?;
    let meta: Metadata = serde_json::from_slice(&meta)?;

    let layout = param_layout(&meta.config);
    let listed: Vec<(&str, &[usize])> = meta
        .params
        .iter()
        .map(|p| (p.name.as_str(), p.shape.as_slice()))
        .collect();
    let expected: Vec<(&str, &[usize])> = layout
        .iter()
        .map(|(n, s)| (n.as_str(), s.as_slice()))
        .collect();
    if listed != expected {
        return Err(Error::Checkpoint(
            "parameter listing does not match the config layout".into(),
        ));
    }
    let mut params = Vec::with_capacity(layout.len());
    for (_, shape) in &layout {
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(Tensor::new(shape.clone(), data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
    }
    TransformerLM::from_params(meta.config, params)
}

pub fn save_checkpoint(model: &TransformerLM, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerLM> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

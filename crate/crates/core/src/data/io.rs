//! JSON / JSONL persistence for worlds, edit sets and probes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{EditExample, FactWorld, ProbeRecord, ProbeSet};
use crate::error::Result;

/// One JSON object per line, in slice order.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_edits(path: &Path, edits: &[EditExample]) -> Result<()> {
    write_jsonl(path, edits)
}

pub fn read_edits(path: &Path) -> Result<Vec<EditExample>> {
    read_jsonl(path)
}

pub fn write_probes(path: &Path, probes: &ProbeSet) -> Result<()> {
    write_jsonl(path, &probes.to_records())
}

pub fn read_probes(path: &Path) -> Result<ProbeSet> {
    Ok(ProbeSet::from_records(read_jsonl::<ProbeRecord>(path)?))
}

pub fn write_world(path: &Path, world: &FactWorld) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, world)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_world(path: &Path) -> Result<FactWorld> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

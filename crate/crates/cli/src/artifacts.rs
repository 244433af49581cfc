//! Run directories: artifact names, upstream lookup and per-subcommand
//! manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use serde::Serialize;

use crate::config::{sha256_hex, Resolved};

pub const WORLD: &str = "world.json";
pub const EDITS: &str = "edits.jsonl";
pub const PROBES: &str = "probes.jsonl";
pub const BASE: &str = "base.ckpt";
pub const BASELINE: &str = "baseline.json";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const PRETRAIN_SUMMARY: &str = "pretrain.json";
pub const EDITED: &str = "edited.ckpt";
pub const EDIT_LOG: &str = "edit_log.csv";
pub const TIMING: &str = "timing.json";
pub const REPORT: &str = "report.json";
pub const RESULTS: &str = "results.csv";
pub const DYNAMICS: &str = "dynamics.csv";
pub const SWEEP: &str = "sweep.csv";
pub const SELECTION: &str = "selection.json";
pub const STREAM: &str = "stream.csv";
pub const SCALE: &str = "scale.json";
pub const REPORT_TABLE: &str = "report.csv";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const CONFIG_HASH: &str = "config.hash";

/// Subcommand that produces an upstream artifact.
fn producer(file: &str) -> &'static str {
    match file {
        WORLD | EDITS | PROBES => "gen-data",
        BASE | BASELINE | PRETRAIN_LOG => "pretrain",
        EDITED | TIMING => "edit",
        SELECTION => "sweep",
        _ => "the producing subcommand",
    }
}

/// An upstream artifact that a subcommand needs does not exist yet.
#[derive(Debug)]
pub struct MissingArtifact {
    pub file: String,
    pub searched: Vec<PathBuf>,
}

impl fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dirs: Vec<String> = self.searched.iter().map(|p| p.display().to_string()).collect();
        write!(
            f,
            "missing upstream artifact `{}` (looked in {}); run `editlab {}` first",
            self.file,
            dirs.join(", "),
            producer(&self.file)
        )
    }
}

impl std::error::Error for MissingArtifact {}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    seed: u64,
    config_hash: &'a str,
    /// sha256 of every artifact written by the subcommand.
    artifacts: BTreeMap<String, String>,
}

/// One subcommand invocation writing into `out`.
pub struct Run<'a> {
    pub resolved: &'a Resolved,
    pub out: PathBuf,
    subcommand: &'static str,
    written: Vec<String>,
}

impl<'a> Run<'a> {
    /// Creates the output directory and freezes the resolved config in it.
    pub fn start(resolved: &'a Resolved, subcommand: &'static str) -> Result<Self> {
        let out = resolved.config.out_dir.clone();
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(out.join(RESOLVED_CONFIG), &resolved.text)?;
        fs::write(out.join(CONFIG_HASH), format!("{}\n", resolved.hash))?;
        Ok(Self {
            resolved,
            out,
            subcommand,
            written: Vec::new(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.resolved.config.seed
    }

    fn search_dirs(&self) -> Vec<PathBuf> {
        let mut dirs = vec![self.out.clone()];
        if let Some(d) = &self.resolved.config.input_dir {
            dirs.push(d.clone());
        }
        dirs
    }

    /// Locates an upstream artifact in the output directory, then in the
    /// configured input directory.
    pub fn input(&self, file: &str) -> Result<PathBuf> {
        let dirs = self.search_dirs();
        for d in &dirs {
            let p = d.join(file);
            if p.is_file() {
                return Ok(p);
            }
        }
        Err(MissingArtifact {
            file: file.to_string(),
            searched: dirs,
        }
        .into())
    }

    pub fn try_input(&self, file: &str) -> Option<PathBuf> {
        self.input(file).ok()
    }

    /// Path of an artifact this run writes; it is listed in the manifest.
    pub fn output(&mut self, file: &str) -> PathBuf {
        if !self.written.iter().any(|w| w == file) {
            self.written.push(file.to_string());
        }
        self.out.join(file)
    }

    pub fn write_json<T: Serialize>(&mut self, file: &str, value: &T) -> Result<()> {
        let path = self.output(file);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_csv<T: Serialize>(&mut self, file: &str, header: &[&str], rows: &[T]) -> Result<()> {
        let path = self.output(file);
        write_csv(&path, header, rows)
    }

    /// Writes `{subcommand}.manifest.json` with the config hash, seed and
    /// a digest of every artifact.
    pub fn finish(self) -> Result<()> {
        let mut artifacts = BTreeMap::new();
        for f in &self.written {
            let bytes = fs::read(self.out.join(f)).with_context(|| format!("artifact {f} was not written"))?;
            artifacts.insert(f.clone(), sha256_hex(&bytes));
        }
        let m = Manifest {
            subcommand: self.subcommand,
            seed: self.resolved.config.seed,
            config_hash: &self.resolved.hash,
            artifacts,
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        fs::write(self.out.join(format!("{}.manifest.json", self.subcommand)), text)?;
        Ok(())
    }
}

/// Writes a CSV with an explicit header, so that an empty table still has
/// its columns.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

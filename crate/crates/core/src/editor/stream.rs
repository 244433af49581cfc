//! Breadth-first editing when edits arrive in chunks.

use std::collections::HashSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{run_breadth_first, Pipeline, PipelineConfig, Trainer};
use crate::data::{EncodedEdit, EncodedProbes};
use crate::error::{Error, Result};
use crate::eval::{self, Baseline, Capability};
use crate::model::TransformerLM;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub chunk_size: usize,
    /// Fraction of previously seen edits replayed alongside each chunk.
    pub replay_fraction: f64,
    pub epochs_per_chunk: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            chunk_size: 100,
            replay_fraction: 0.0,
            epochs_per_chunk: 30,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::Stream("chunk_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.replay_fraction) {
            return Err(Error::Stream(format!(
                "replay_fraction must be in [0, 1], got {}",
                self.replay_fraction
            )));
        }
        Ok(())
    }
}

/// State after a chunk has been trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkReport {
    pub chunk: usize,
    pub n_seen: usize,
    pub pool_size: usize,
    pub epochs: usize,
    /// Reliability over every edit seen so far.
    pub reliability_pct: f64,
    pub generalization_pct: f64,
    pub capability: Capability,
    /// Cumulative optimization seconds.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamOutcome {
    pub reports: Vec<ChunkReport>,
    pub seconds_per_edit: f64,
}

/// Splits `edits` into arrival chunks of `stream.chunk_size` (the last one
/// may be short) and runs [`edit_streaming_chunks`].
pub fn edit_streaming(
    model: &mut TransformerLM,
    edits: &[EncodedEdit],
    cfg: &PipelineConfig,
    stream: &StreamConfig,
    probes: &EncodedProbes,
    baseline: &Baseline,
) -> Result<StreamOutcome> {
    stream.validate()?;
    let chunks: Vec<Vec<EncodedEdit>> = edits.chunks(stream.chunk_size).map(<[_]>::to_vec).collect();
    edit_streaming_chunks(model, &chunks, cfg, stream, probes, baseline)
}

/// Each chunk is trained breadth-first for `epochs_per_chunk` epochs on a
/// pool of the chunk plus a seeded sample of earlier edits. One optimizer
/// and shuffle stream persist across chunks.
pub fn edit_streaming_chunks(
    model: &mut TransformerLM,
    chunks: &[Vec<EncodedEdit>],
    cfg: &PipelineConfig,
    stream: &StreamConfig,
    probes: &EncodedProbes,
    baseline: &Baseline,
) -> Result<StreamOutcome> {
    stream.validate()?;
    if cfg.pipeline != Pipeline::BreadthFirst {
        return Err(Error::Stream("streaming runs the breadth-first pipeline".into()));
    }
    let mut ids = HashSet::new();
    for e in chunks.iter().flatten() {
        if !ids.insert(e.id) {
            return Err(Error::Stream(format!("edit id {} arrives more than once", e.id)));
        }
    }

    let mut trainer = Trainer::new(model, cfg)?;
    let mut replay_rng = seed::named_rng(cfg.shuffle_seed, "replay");
    let mut seen: Vec<EncodedEdit> = Vec::new();
    let mut reports = Vec::with_capacity(chunks.len());
    for (c, chunk) in chunks.iter().enumerate() {
        let n_replay = (stream.replay_fraction * seen.len() as f64).round() as usize;
        let mut pool = chunk.clone();
        if n_replay > 0 {
            let mut picked = index::sample(&mut replay_rng, seen.len(), n_replay).into_vec();
            picked.sort_unstable();
            pool.extend(picked.into_iter().map(|i| seen[i].clone()));
        }
        let (_, epochs) = run_breadth_first(
            model,
            &mut trainer,
            std::slice::from_ref(&pool),
            cfg,
            stream.epochs_per_chunk,
            "stream",
        )?;
        seen.extend(chunk.iter().cloned());
        reports.push(ChunkReport {
            chunk: c + 1,
            n_seen: seen.len(),
            pool_size: pool.len(),
            epochs,
            reliability_pct: eval::reliability(model, &seen)?,
            generalization_pct: eval::generalization(model, &seen)?,
            capability: eval::capability(model, probes, Some(baseline))?,
            seconds: trainer.seconds(),
        });
    }
    let n = seen.len().max(1);
    Ok(StreamOutcome {
        reports,
        seconds_per_edit: trainer.seconds() / n as f64,
    })
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-shard success at one point during editing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceCheckpoint {
    pub label: String,
    /// Success fraction of shards `0..success.len()`.
    pub success: Vec<f64>,
}

/// Learning dynamics over `k` shards. Depth-first runs add a checkpoint per
/// completed shard (covering the shards edited so far), breadth-first runs
/// one per epoch (covering all shards).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsTrace {
    pub k: usize,
    pub checkpoints: Vec<TraceCheckpoint>,
}

/// Flat row of `dynamics.csv`; `shard_id` is 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub checkpoint_label: String,
    pub shard_id: usize,
    pub success: f64,
}

impl DynamicsTrace {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            checkpoints: Vec::new(),
        }
    }

    pub fn push(&mut self, label: String, success: Vec<f64>) -> Result<()> {
        if success.len() > self.k || success.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Pipeline(format!(
                "invalid trace checkpoint `{label}` for {} shards: {success:?}",
                self.k
            )));
        }
        self.checkpoints.push(TraceCheckpoint { label, success });
        Ok(())
    }

    /// Success of `shard` at every checkpoint that covers it.
    pub fn shard_series(&self, shard: usize) -> Vec<f64> {
        self.checkpoints
            .iter()
            .filter_map(|c| c.success.get(shard).copied())
            .collect()
    }

    pub fn rows(&self) -> Vec<TraceRow> {
        self.checkpoints
            .iter()
            .flat_map(|c| {
                c.success.iter().enumerate().map(|(i, s)| TraceRow {
                    checkpoint_label: c.label.clone(),
                    shard_id: i + 1,
                    success: *s,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_and_series() {
        let mut t = DynamicsTrace::new(2);
        t.push("a".into(), vec![1.0]).unwrap();
        t.push("b".into(), vec![0.5, 1.0]).unwrap();
        assert_eq!(t.rows().len(), 3);
        assert_eq!(t.shard_series(0), vec![1.0, 0.5]);
        assert_eq!(t.shard_series(1), vec![1.0]);
        assert!(t.push("c".into(), vec![0.1, 0.2, 0.3]).is_err());
        assert!(t.push("d".into(), vec![1.5]).is_err());
    }
}

//! Experiment configuration: one strict TOML tree, dotted-path overrides,
//! and a content hash of the fully resolved result.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use editlab::data::{RephraseStyle, WorldParams};
use editlab::editor::{PipelineConfig, StreamConfig};
use editlab::locations::SelectionRule;
use editlab::pretrain::PretrainConfig;
use editlab::{ModelConfig, ParamLocation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root of every random substream.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Where upstream artifacts are looked up when they are not in
    /// `out_dir`; lets several runs share one data set and base model.
    pub input_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub data: DataSection,
    pub pretrain: PretrainSection,
    pub edit: PipelineConfig,
    pub stream: StreamConfig,
    pub dynamics: DynamicsSection,
    pub sweep: SweepSection,
    pub scale: ScaleSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            input_dir: None,
            model: ModelSection::default(),
            data: DataSection::default(),
            pretrain: PretrainSection::default(),
            edit: PipelineConfig::default(),
            stream: StreamConfig::default(),
            dynamics: DynamicsSection::default(),
            sweep: SweepSection::default(),
            scale: ScaleSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Model shape; the vocabulary size comes from the generated world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let toy = ModelConfig::toy(0, 0);
        Self {
            n_layers: toy.n_layers,
            d_model: toy.d_model,
            n_heads: toy.n_heads,
            d_mlp: toy.d_mlp,
            max_seq_len: toy.max_seq_len,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_mlp: self.d_mlp,
            vocab_size,
            max_seq_len: self.max_seq_len,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_facts: usize,
    pub objects_per_relation: usize,
    pub min_object_tokens: usize,
    pub max_object_tokens: usize,
    pub n_edits: usize,
    pub n_rephrases: usize,
    pub rephrase_style: RephraseStyle,
    pub n_probe_facts: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let w = WorldParams::new(0, 500, 10, 5000);
        Self {
            n_entities: w.n_entities,
            n_relations: w.n_relations,
            n_facts: w.n_facts,
            objects_per_relation: w.objects_per_relation,
            min_object_tokens: w.min_object_tokens,
            max_object_tokens: w.max_object_tokens,
            n_edits: 1000,
            n_rephrases: 1,
            rephrase_style: RephraseStyle::Paraphrase,
            n_probe_facts: 200,
        }
    }
}

impl DataSection {
    pub fn world_params(&self, seed: u64) -> WorldParams {
        WorldParams {
            seed,
            n_entities: self.n_entities,
            n_relations: self.n_relations,
            n_facts: self.n_facts,
            objects_per_relation: self.objects_per_relation,
            min_object_tokens: self.min_object_tokens,
            max_object_tokens: self.max_object_tokens,
        }
    }
}

/// Pretraining knobs; the seed is the experiment root seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub early_stop_fact_acc: f64,
    pub eval_sample: usize,
    pub prefixed_fraction: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            early_stop_fact_acc: p.early_stop_fact_acc,
            eval_sample: p.eval_sample,
            prefixed_fraction: p.prefixed_fraction,
        }
    }
}

impl PretrainSection {
    pub fn pretrain_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            early_stop_fact_acc: self.early_stop_fact_acc,
            seed,
            eval_sample: self.eval_sample,
            prefixed_fraction: self.prefixed_fraction,
        }
    }
}

/// Shard-dynamics protocol: the edit set is split into `k` shards and
/// edited depth-first and breadth-first from the same base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsSection {
    pub k: usize,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self { k: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Edits used per sweep row; 0 means the whole edit set.
    pub n_edits: usize,
    /// Explicit locations; empty means every layer × selector.
    pub locations: Vec<ParamLocation>,
    pub selection: SelectionRule,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            n_edits: 0,
            locations: Vec::new(),
            selection: SelectionRule::default(),
        }
    }
}

/// Transfer of a tuning location to a model of another depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleSection {
    /// Layer count of the source model; 0 means `model.n_layers`.
    pub source_n_layers: usize,
    pub target_n_layers: usize,
    /// Location to transfer; when absent, the sweep selection is used if
    /// present, otherwise `edit.location`.
    pub source_location: Option<ParamLocation>,
}

impl Default for ScaleSection {
    fn default() -> Self {
        Self {
            source_n_layers: 0,
            target_n_layers: 12,
            source_location: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Write measured seconds per edit into CSV rows. Off by default so
    /// that reruns produce byte-identical CSVs; timings always go to
    /// `timing.json`.
    pub wall_clock_in_csv: bool,
}

/// A parsed and fully resolved configuration with its canonical text and
/// hash.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub text: String,
    pub hash: String,
}

/// Applies `KEY=VALUE` to a TOML tree. The value is read as a TOML value
/// when it parses as one and as a bare string otherwise, so both
/// `edit.batch_size=4` and `edit.pipeline=DEPTH_FIRST` work.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override `{assignment}` is not KEY=VALUE"))?;
    let key = key.trim();
    let raw = raw.trim();
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty segment");
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut table = root;
    for (depth, seg) in parents.iter().enumerate() {
        let entry = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override `{key}`: `{}` is not a table", path[..=depth].join(".")),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Parses a TOML tree into a config, reporting the dotted key path of the
/// first offending entry.
pub fn from_table(table: toml::Table) -> Result<ExperimentConfig> {
    serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("config error at `{path}`: {}", e.inner())
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads `path` (or starts from defaults), applies overrides in order,
/// then the explicit seed and output directory, and validates the result.
pub fn resolve(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<Resolved> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<toml::Table>()
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut config = from_table(table)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(o) = out {
        config.out_dir = o.to_path_buf();
    }
    Resolved::new(config)
}

impl Resolved {
    /// Validates `config` and computes its canonical text and hash.
    pub fn new(mut config: ExperimentConfig) -> Result<Self> {
        // The edit shuffle stream derives from the root seed like every
        // other stream; the resolved file shows the effective value.
        config.edit.shuffle_seed = config.seed;
        validate(&config)?;
        let text = toml::to_string(&config).context("serializing resolved config")?;
        let hash = sha256_hex(text.as_bytes());
        Ok(Self { config, text, hash })
    }
}

pub fn validate(c: &ExperimentConfig) -> Result<()> {
    c.edit.validate()?;
    c.stream.validate()?;
    c.pretrain.pretrain_config(c.seed).validate()?;
    c.model.model_config(16, c.seed).validate()?;
    if c.dynamics.k == 0 {
        bail!("dynamics.k must be at least 1");
    }
    if c.scale.target_n_layers == 0 {
        bail!("scale.target_n_layers must be at least 1");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let text = toml::to_string(&c).unwrap();
        let back = from_table(text.parse().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_are_typed_or_strings() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "edit.batch_size=4").unwrap();
        apply_override(&mut t, "edit.pipeline=DEPTH_FIRST").unwrap();
        apply_override(&mut t, "edit.location=layer2.MLP_UP").unwrap();
        apply_override(&mut t, "edit.adam.lr=0.01").unwrap();
        let c = from_table(t).unwrap();
        assert_eq!(c.edit.batch_size, 4);
        assert_eq!(c.edit.pipeline, editlab::editor::Pipeline::DepthFirst);
        assert_eq!(c.edit.location.to_string(), "layer2.MLP_UP");
        assert_eq!(c.edit.adam.lr, 0.01);
        assert_eq!(c.edit.adam.beta2, 0.999);
    }

    #[test]
    fn unknown_and_mistyped_keys_name_their_path() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "edit.batch_sise=4").unwrap();
        let err = from_table(t).unwrap_err().to_string();
        assert!(err.contains("batch_sise"), "{err}");

        let mut t = toml::Table::new();
        apply_override(&mut t, "edit.batch_size=\"four\"").unwrap();
        let err = from_table(t).unwrap_err().to_string();
        assert!(err.contains("edit.batch_size"), "{err}");
    }

    #[test]
    fn hash_follows_resolved_content() {
        let a = resolve(None, &[], None, None).unwrap();
        let b = resolve(None, &["seed=0".into()], None, None).unwrap();
        let c = resolve(None, &[], Some(1), None).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_ne!(a.hash, c.hash);
        assert!(resolve(None, &["edit.pipeline=DEPTH_FIRST".into(), "edit.batch_size=2".into()], None, None).is_err());
    }
}

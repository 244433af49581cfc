//! Decoder-only toy transformer with an addressable per-layer module
//! structure.
//!
//! Every parameter tensor has a canonical name (`embed`, `pos_embed`,
//! `layer{i}.attn_q`, ..., `layer{i}.ln2`, `final_ln`, `head`). Tuning
//! locations resolve to sets of these names, and the editor turns such a set
//! into a trainable mask.

mod checkpoint;
mod decode;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::fpenv::FlushDenormals;
use crate::seed;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{argmax, greedy_decode, greedy_decode_batch};

pub type TokenId = u32;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default desk-scale shape for a given vocabulary.
    pub fn toy(vocab_size: usize, seed: u64) -> Self {
        Self {
            n_layers: 6,
            d_model: 128,
            n_heads: 4,
            d_mlp: 512,
            vocab_size,
            max_seq_len: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.d_model == 0 || self.d_mlp == 0 || self.max_seq_len == 0 {
            return fail("d_model, d_mlp and max_seq_len must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            ));
        }
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} is below 4", self.vocab_size));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, f, l, s) = (
            self.vocab_size,
            self.d_model,
            self.d_mlp,
            self.n_layers,
            self.max_seq_len,
        );
        v * d + s * d + l * (4 * d * d + 2 * d * f + 2 * 2 * d) + 2 * d + d * v
    }
}

/// The five module selectors a tuning location can address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Selector {
    EntireLayer,
    FullAttention,
    FullMlp,
    MlpUp,
    MlpDown,
}

impl Selector {
    pub const ALL: [Selector; 5] = [
        Selector::EntireLayer,
        Selector::FullAttention,
        Selector::FullMlp,
        Selector::MlpUp,
        Selector::MlpDown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Selector::EntireLayer => "ENTIRE_LAYER",
            Selector::FullAttention => "FULL_ATTENTION",
            Selector::FullMlp => "FULL_MLP",
            Selector::MlpUp => "MLP_UP",
            Selector::MlpDown => "MLP_DOWN",
        }
    }

    fn modules(self) -> &'static [Module] {
        use Module::*;
        match self {
            Selector::EntireLayer => &[AttnQ, AttnK, AttnV, AttnO, MlpUp, MlpDown, Ln1, Ln2],
            Selector::FullAttention => &[AttnQ, AttnK, AttnV, AttnO],
            Selector::FullMlp => &[MlpUp, MlpDown],
            Selector::MlpUp => &[MlpUp],
            Selector::MlpDown => &[MlpDown],
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Selector::ALL
            .into_iter()
            .find(|sel| sel.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Location(format!("unknown selector `{s}`")))
    }
}

/// A (layer, selector) pair: the unit of localization. Serialized as its
/// display form, e.g. `layer4.MLP_DOWN`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ParamLocation {
    pub layer_index: usize,
    pub selector: Selector,
}

impl ParamLocation {
    pub fn new(layer_index: usize, selector: Selector) -> Self {
        Self {
            layer_index,
            selector,
        }
    }
}

impl fmt::Display for ParamLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer_index, self.selector)
    }
}

impl std::str::FromStr for ParamLocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Location(format!("expected `layer<N>.<SELECTOR>`, got `{s}`"));
        let (layer, sel) = s.split_once('.').ok_or_else(bad)?;
        let layer_index = layer
            .strip_prefix("layer")
            .and_then(|n| n.parse().ok())
            .ok_or_else(bad)?;
        Ok(Self::new(layer_index, sel.parse()?))
    }
}

impl TryFrom<String> for ParamLocation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ParamLocation> for String {
    fn from(loc: ParamLocation) -> String {
        loc.to_string()
    }
}

/// Modules in their canonical per-layer order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Module {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpUp,
    MlpDown,
    Ln1,
    Ln2,
}

const LAYER_MODULES: [Module; 8] = [
    Module::AttnQ,
    Module::AttnK,
    Module::AttnV,
    Module::AttnO,
    Module::MlpUp,
    Module::MlpDown,
    Module::Ln1,
    Module::Ln2,
];

impl Module {
    fn name(self) -> &'static str {
        match self {
            Module::AttnQ => "attn_q",
            Module::AttnK => "attn_k",
            Module::AttnV => "attn_v",
            Module::AttnO => "attn_o",
            Module::MlpUp => "mlp_up",
            Module::MlpDown => "mlp_down",
            Module::Ln1 => "ln1",
            Module::Ln2 => "ln2",
        }
    }

    fn slot(self) -> usize {
        LAYER_MODULES.iter().position(|m| *m == self).expect("listed")
    }
}

pub fn layer_param_name(layer: usize, module: &str) -> String {
    format!("layer{layer}.{module}")
}

/// Canonical parameter names and shapes, in storage order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_mlp);
    let mut out = vec![
        ("embed".to_string(), vec![v, d]),
        ("pos_embed".to_string(), vec![cfg.max_seq_len, d]),
    ];
    for l in 0..cfg.n_layers {
        for m in LAYER_MODULES {
            let shape = match m {
                Module::AttnQ | Module::AttnK | Module::AttnV | Module::AttnO => vec![d, d],
                Module::MlpUp => vec![d, f],
                Module::MlpDown => vec![f, d],
                Module::Ln1 | Module::Ln2 => vec![2, d],
            };
            out.push((layer_param_name(l, m.name()), shape));
        }
    }
    out.push(("final_ln".to_string(), vec![2, d]));
    out.push(("head".to_string(), vec![d, v]));
    out
}

/// Canonical names addressed by `loc`.
pub fn resolve_location(cfg: &ModelConfig, loc: ParamLocation) -> Result<BTreeSet<String>> {
    if loc.layer_index >= cfg.n_layers {
        return Err(Error::Location(format!(
            "layer {} out of range for a {}-layer model",
            loc.layer_index, cfg.n_layers
        )));
    }
    Ok(loc
        .selector
        .modules()
        .iter()
        .map(|m| layer_param_name(loc.layer_index, m.name()))
        .collect())
}

/// Every (layer, selector) pair, layer-major.
pub fn enumerate_locations(cfg: &ModelConfig) -> Vec<ParamLocation> {
    (0..cfg.n_layers)
        .flat_map(|l| Selector::ALL.into_iter().map(move |s| ParamLocation::new(l, s)))
        .collect()
}

/// A packed batch of right-padded token sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<TokenId>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[&[TokenId]], pad: TokenId) -> Self {
        let seq_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad, seq_len - s.len()));
        }
        Self {
            ids,
            batch: seqs.len(),
            seq_len,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }
}

/// Result of [`TransformerLM::forward`]: the logits node plus the tape
/// handle of every parameter, in canonical order.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    leaves: Vec<Option<Var>>,
}

impl Forward {
    /// Per-parameter gradients in canonical order; `None` for frozen tensors.
    pub fn param_grads(&self, grads: &mut Gradients<f32>) -> Vec<Option<Vec<f32>>> {
        self.leaves
            .iter()
            .map(|l| l.and_then(|v| grads.take(v)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLM {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

/// Builds a model with seeded N(0, 0.02²) weights and unit/zero layernorms.
pub fn build_model(config: ModelConfig) -> Result<TransformerLM> {
    config.validate()?;
    let mut rng = seed::named_rng(config.seed, "init");
    let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
    let layout = param_layout(&config);
    let mut params = Vec::with_capacity(layout.len());
    for (name, shape) in &layout {
        let t = if name.ends_with("ln") || name.ends_with("ln1") || name.ends_with("ln2") {
            let d = shape[1];
            Tensor::from_fn(shape.clone(), |i| if i < d { 1.0 } else { 0.0 })
        } else {
            Tensor::from_fn(shape.clone(), |_| normal.sample(&mut rng) as f32)
        };
        params.push(t);
    }
    TransformerLM::from_params(config, params)
}

impl TransformerLM {
    /// Assembles a model from tensors in canonical order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<f32>>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let names: Vec<String> = layout.into_iter().map(|(n, _)| n).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            config,
            names,
            params,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    /// Parameters and names together, for optimizer calls.
    pub fn params_and_names_mut(&mut self) -> (&mut [Tensor<f32>], &[String]) {
        (&mut self.params, &self.names)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Per-tensor trainable mask for a location.
    pub fn location_mask(&self, loc: ParamLocation) -> Result<Vec<bool>> {
        let names = resolve_location(&self.config, loc)?;
        Ok(self.names.iter().map(|n| names.contains(n)).collect())
    }

    pub fn full_mask(&self) -> Vec<bool> {
        vec![true; self.params.len()]
    }

    /// SHA-256 over config and raw parameter bytes.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for t in &self.params {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn layer_param(&self, layer: usize, m: Module) -> usize {
        2 + layer * LAYER_MODULES.len() + m.slot()
    }

    /// Records a forward pass; logits have shape `[batch·seq_len, V]`.
    /// `trainable[i]` marks which tensors the backward pass differentiates.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a, f32>,
        batch: &TokenBatch,
        trainable: &[bool],
    ) -> Result<Forward> {
        self.forward_rows(tape, batch, trainable, None)
    }

    /// Like [`forward`](Self::forward), but projects only the listed rows
    /// of the packed `[batch·seq_len, d]` hidden state through the head, so
    /// logits have shape `[rows.len(), V]`.
    pub fn forward_rows<'a>(
        &'a self,
        tape: &mut Tape<'a, f32>,
        batch: &TokenBatch,
        trainable: &[bool],
        rows: Option<&[usize]>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        if batch.seq_len > cfg.max_seq_len {
            return Err(Error::Length {
                len: batch.seq_len,
                max: cfg.max_seq_len,
            });
        }
        if batch.ids.len() != batch.rows() || batch.rows() == 0 {
            return Err(Error::Shape {
                op: "forward",
                detail: format!(
                    "{} ids for batch {}x{}",
                    batch.ids.len(),
                    batch.batch,
                    batch.seq_len
                ),
            });
        }
        let _fp = FlushDenormals::new();
        let n_params = self.params.len();
        let mut leaves: Vec<Option<Var>> = vec![None; n_params];
        let mut leaf = |tape: &mut Tape<'a, f32>, i: usize| -> Var {
            *leaves[i].get_or_insert_with(|| {
                tape.leaf(&self.params[i], trainable.get(i).copied().unwrap_or(false))
            })
        };

        let ids: Vec<usize> = batch.ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..batch.rows()).map(|r| r % batch.seq_len).collect();
        let embed = leaf(tape, 0);
        let pos = leaf(tape, 1);
        let tok = tape.gather(embed, &ids)?;
        let pe = tape.gather(pos, &positions)?;
        let mut x = tape.add(tok, pe)?;

        for l in 0..cfg.n_layers {
            let p = |m| self.layer_param(l, m);
            let ln1 = leaf(tape, p(Module::Ln1));
            let h = tape.layer_norm(x, ln1)?;
            let wq = leaf(tape, p(Module::AttnQ));
            let wk = leaf(tape, p(Module::AttnK));
            let wv = leaf(tape, p(Module::AttnV));
            let wo = leaf(tape, p(Module::AttnO));
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let a = tape.causal_attention(q, k, v, cfg.n_heads, batch.seq_len)?;
            let a = tape.matmul(a, wo)?;
            x = tape.add(x, a)?;

            let ln2 = leaf(tape, p(Module::Ln2));
            let h = tape.layer_norm(x, ln2)?;
            let up = leaf(tape, p(Module::MlpUp));
            let down = leaf(tape, p(Module::MlpDown));
            let u = tape.matmul(h, up)?;
            let u = tape.gelu(u);
            let m = tape.matmul(u, down)?;
            x = tape.add(x, m)?;
        }

        if let Some(rows) = rows {
            x = tape.gather(x, rows)?;
        }
        let fin = leaf(tape, n_params - 2);
        let x = tape.layer_norm(x, fin)?;
        let head = leaf(tape, n_params - 1);
        let logits = tape.matmul(x, head)?;
        Ok(Forward { logits, leaves })
    }

    /// Tape-free convenience: logits for a single sequence.
    pub fn logits(&self, tokens: &[TokenId]) -> Result<Tensor<f32>> {
        let batch = TokenBatch::from_sequences(&[tokens], 0);
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &batch, &[])?;
        Ok(tape.value(out.logits).clone())
    }
}

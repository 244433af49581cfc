//! Next-token pretraining of the base model on its fact world.
//!
//! The corpus holds every fact rendered under every template, terminated by
//! EOS, plus the filler sentences. A fraction of statements gets a random
//! filler prefix each epoch so that prompts with leading context are not
//! entirely out of distribution. Training stops early once exact-match
//! accuracy on a fixed fact sample reaches the configured threshold.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::tokenizer::{EOS, PAD};
use crate::data::{EncodedProbes, FactWorld, Tokenizer, NOISE_SENTENCES};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{TokenBatch, TokenId, TransformerLM};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop once fact accuracy (a fraction) reaches this.
    pub early_stop_fact_acc: f64,
    pub seed: u64,
    /// Size of the fixed (fact, template) sample used for fact accuracy.
    pub eval_sample: usize,
    /// Probability that a statement is preceded by a filler sentence.
    pub prefixed_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 1e-3,
            early_stop_fact_acc: 0.95,
            seed: 0,
            eval_sample: 512,
            prefixed_fraction: 0.1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Argument("pretrain batch_size must be at least 1".into()));
        }
        if !(self.early_stop_fact_acc > 0.0 && self.early_stop_fact_acc <= 1.0) {
            return Err(Error::Argument(format!(
                "early_stop_fact_acc must be in (0, 1], got {}",
                self.early_stop_fact_acc
            )));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.prefixed_fraction) {
            return Err(Error::Argument("invalid lr or prefixed_fraction".into()));
        }
        Ok(())
    }
}

/// One row of `pretrain_log.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRow {
    pub epoch: usize,
    pub loss: f64,
    pub fact_acc: f64,
    pub ppl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    pub log: Vec<PretrainRow>,
    /// Whether the accuracy threshold was reached; failing to reach it is
    /// reported here rather than as an error.
    pub reached_threshold: bool,
    pub final_fact_acc: f64,
}

/// Every fact under every template as `statement EOS`.
pub fn fact_statements(world: &FactWorld, tok: &Tokenizer) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    for f in &world.facts {
        let Some(rel) = world.relation(&f.relation) else { continue };
        for t in 0..rel.templates.len() {
            let mut ids = tok.encode(&format!("{} {}", rel.render(t, &f.subject), f.object));
            ids.push(EOS);
            out.push(ids);
        }
    }
    out
}

fn filler(tok: &Tokenizer) -> Vec<Vec<TokenId>> {
    NOISE_SENTENCES
        .iter()
        .map(|s| {
            let mut ids = tok.encode(s);
            ids.push(EOS);
            ids
        })
        .collect()
}

/// Fixed evaluation sample: held-out probe facts first, then seeded
/// (fact, template) prompts from the whole world.
fn accuracy_sample(
    world: &FactWorld,
    tok: &Tokenizer,
    probes: &EncodedProbes,
    n: usize,
    seed: u64,
) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    let mut out: Vec<(Vec<TokenId>, Vec<TokenId>)> = probes
        .facts
        .iter()
        .take(n)
        .map(|f| (f.prompt.clone(), f.target.clone()))
        .collect();
    let rest = n.saturating_sub(out.len()).min(world.facts.len());
    let mut rng = seed::named_rng(seed, "pretrain_eval");
    for i in index::sample(&mut rng, world.facts.len(), rest) {
        let f = &world.facts[i];
        let Some(rel) = world.relation(&f.relation) else { continue };
        let t = rng.random_range(0..rel.templates.len());
        out.push((tok.encode(&rel.render(t, &f.subject)), tok.encode(&f.object)));
    }
    out
}

fn sample_accuracy(model: &TransformerLM, sample: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<f64> {
    if sample.is_empty() {
        return Ok(0.0);
    }
    let pairs: Vec<(&[TokenId], &[TokenId])> = sample.iter().map(|(p, t)| (p.as_slice(), t.as_slice())).collect();
    let hits = eval::exact_match_batch(model, &pairs)?.into_iter().filter(|m| *m).count();
    Ok(hits as f64 / sample.len() as f64)
}

/// Batches of shuffled indices with similar lengths: the shuffled order is
/// cut into windows of `BUCKET_WINDOW` batches, each window is sorted by
/// length and split, and the batch order is shuffled again. This keeps
/// padding low without making batch composition deterministic in length.
fn bucketed_batches(
    n: usize,
    batch_size: usize,
    len: impl Fn(usize) -> usize,
    rng: &mut seed::Rng,
) -> Vec<Vec<usize>> {
    const BUCKET_WINDOW: usize = 32;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = Vec::with_capacity(n.div_ceil(batch_size));
    for window in order.chunks_mut(batch_size * BUCKET_WINDOW) {
        window.sort_by_key(|&i| len(i));
        batches.extend(window.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Mean next-token loss over all non-pad positions of `seqs`, plus one
/// full-model Adam step.
fn lm_step(model: &mut TransformerLM, seqs: &[&[TokenId]], state: &mut AdamState) -> Result<f64> {
    let inputs: Vec<&[TokenId]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
    let batch = TokenBatch::from_sequences(&inputs, PAD);
    let mut targets = vec![0usize; batch.rows()];
    let mut weights = vec![0.0f64; batch.rows()];
    let count: usize = inputs.iter().map(|s| s.len()).sum();
    for (b, s) in seqs.iter().enumerate() {
        for p in 0..s.len() - 1 {
            targets[b * batch.seq_len + p] = s[p + 1] as usize;
            weights[b * batch.seq_len + p] = 1.0 / count as f64;
        }
    }
    let mask = model.full_mask();
    let (loss, grads) = {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, &mask)?;
        let loss = tape.weighted_cross_entropy(out.logits, &targets, &weights)?;
        let value = tape.scalar(loss).expect("scalar loss");
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(value));
        }
        let mut g = tape.backward(loss)?;
        (value, out.param_grads(&mut g))
    };
    let (params, names) = model.params_and_names_mut();
    adam_step(params, names, &grads, state, &mask)?;
    Ok(loss)
}

/// Trains `model` in place. `progress` is called after every epoch.
pub fn pretrain(
    model: &mut TransformerLM,
    world: &FactWorld,
    probes: &EncodedProbes,
    cfg: &PretrainConfig,
    mut progress: impl FnMut(&PretrainRow),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let tok = world.tokenizer();
    if tok.vocab_size() > model.config().vocab_size {
        return Err(Error::Config(format!(
            "model vocabulary {} does not cover the world's {} tokens",
            model.config().vocab_size,
            tok.vocab_size()
        )));
    }
    let statements = fact_statements(world, &tok);
    let noise = filler(&tok);
    let sample = accuracy_sample(world, &tok, probes, cfg.eval_sample, cfg.seed);
    let max_len = model.config().max_seq_len;
    for s in statements.iter().chain(&noise) {
        // Inputs drop the final token, so the longest prefixed statement
        // must fit after that.
        if s.len() - 1 > max_len {
            return Err(Error::Length { len: s.len() - 1, max: max_len });
        }
    }
    let longest_noise = noise.iter().map(|n| n.len() - 1).max().unwrap_or(0);

    let mut rng = seed::named_rng(cfg.seed, "pretrain");
    let mut state = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.params().len(),
    );
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut acc = 0.0;
    let mut reached = false;
    for epoch in 1..=cfg.epochs {
        let mut corpus: Vec<Vec<TokenId>> = Vec::with_capacity(statements.len() + noise.len());
        for s in &statements {
            if cfg.prefixed_fraction > 0.0
                && s.len() - 1 + longest_noise <= max_len
                && rng.random_bool(cfg.prefixed_fraction)
            {
                // Filler without its EOS, then the statement.
                let n = &noise[rng.random_range(0..noise.len())];
                let mut seq = n[..n.len() - 1].to_vec();
                seq.extend_from_slice(s);
                corpus.push(seq);
            } else {
                corpus.push(s.clone());
            }
        }
        corpus.extend(noise.iter().cloned());
        let batches = bucketed_batches(corpus.len(), cfg.batch_size, |i| corpus[i].len(), &mut rng);

        let mut total = 0.0;
        for batch in &batches {
            let views: Vec<&[TokenId]> = batch.iter().map(|&i| corpus[i].as_slice()).collect();
            total += lm_step(model, &views, &mut state)?;
        }
        acc = sample_accuracy(model, &sample)?;
        let row = PretrainRow {
            epoch,
            loss: total / batches.len().max(1) as f64,
            fact_acc: acc,
            ppl: eval::perplexity(model, &probes.text)?,
        };
        progress(&row);
        log.push(row);
        if acc >= cfg.early_stop_fact_acc {
            reached = true;
            break;
        }
    }
    Ok(PretrainOutcome {
        log,
        reached_threshold: reached,
        final_fact_acc: acc,
    })
}

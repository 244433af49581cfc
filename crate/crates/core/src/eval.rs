//! Reliability, generalization, capability and efficiency metrics.
//!
//! Every success metric goes through greedy autoregressive decoding, the
//! same path a deployed model would take. Nothing here uses teacher forcing
//! except perplexity, which is a likelihood by definition.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::tokenizer::{EOS, PAD};
use crate::data::{EncodedEdit, EncodedProbes};
use crate::error::{Error, Result};
use crate::model::{argmax, TokenBatch, TokenId, TransformerLM};

/// Sequences per forward pass during evaluation; bounds tape memory.
const EVAL_CHUNK: usize = 256;

/// Greedy decoding budget for a target of `n` tokens.
pub fn decode_budget(n: usize) -> usize {
    n + 2
}

/// Whether greedy decoding from `prompt` yields exactly `target` followed
/// by EOS (or by the end of the decoding budget).
pub fn exact_match(model: &TransformerLM, prompt: &[TokenId], target: &[TokenId]) -> Result<bool> {
    Ok(exact_match_batch(model, &[(prompt, target)])?[0])
}

/// Batched [`exact_match`].
///
/// Rows stop decoding as soon as their output can no longer match: once a
/// generated token differs from `target ++ [EOS]` the truncated output is
/// already different from the target, whatever follows. The results are
/// therefore identical to decoding the full `len(target) + 2` budget.
pub fn exact_match_batch(
    model: &TransformerLM,
    pairs: &[(&[TokenId], &[TokenId])],
) -> Result<Vec<bool>> {
    let max_len = model.config().max_seq_len;
    for (prompt, target) in pairs {
        if prompt.is_empty() || target.is_empty() {
            return Err(Error::Evaluation("prompt and target must be nonempty".into()));
        }
        if prompt.len() + target.len() > max_len {
            return Err(Error::Evaluation(format!(
                "prompt of {} and target of {} tokens exceed the context window {max_len}",
                prompt.len(),
                target.len()
            )));
        }
    }
    let mut result = vec![false; pairs.len()];
    let order: Vec<usize> = (0..pairs.len()).collect();
    for chunk in order.chunks(EVAL_CHUNK) {
        match_chunk(model, pairs, chunk, &mut result)?;
    }
    Ok(result)
}

fn match_chunk(
    model: &TransformerLM,
    pairs: &[(&[TokenId], &[TokenId])],
    rows: &[usize],
    result: &mut [bool],
) -> Result<()> {
    let vocab = model.config().vocab_size;
    let max_len = model.config().max_seq_len;
    let mut seqs: Vec<Vec<TokenId>> = rows.iter().map(|&i| pairs[i].0.to_vec()).collect();
    // Active rows as (slot in `seqs`, tokens generated so far).
    let mut active: Vec<(usize, usize)> = (0..rows.len()).map(|s| (s, 0)).collect();

    while !active.is_empty() {
        let views: Vec<&[TokenId]> = active.iter().map(|&(s, _)| seqs[s].as_slice()).collect();
        let batch = TokenBatch::from_sequences(&views, PAD);
        let last: Vec<usize> = active
            .iter()
            .enumerate()
            .map(|(r, &(s, _))| r * batch.seq_len + seqs[s].len() - 1)
            .collect();
        let mut tape = Tape::new();
        let out = model.forward_rows(&mut tape, &batch, &[], Some(&last))?;
        let logits = tape.value(out.logits).data();

        let mut still = Vec::with_capacity(active.len());
        for (r, &(s, generated)) in active.iter().enumerate() {
            let i = rows[s];
            let target = pairs[i].1;
            let next = argmax(&logits[r * vocab..(r + 1) * vocab]) as TokenId;
            let expected = target.get(generated).copied().unwrap_or(EOS);
            if next != expected {
                continue;
            }
            let generated = generated + 1;
            let budget = decode_budget(target.len());
            if next == EOS {
                result[i] = true;
            } else if generated == target.len() && (generated == budget || seqs[s].len() + 1 == max_len) {
                // Budget or context exhausted right after the full target.
                result[i] = true;
            } else {
                seqs[s].push(next);
                still.push((s, generated));
            }
        }
        active = still;
    }
    Ok(())
}

fn pct(hits: usize, total: usize) -> f64 {
    100.0 * hits as f64 / total as f64
}

/// Percentage of edit prompts whose greedy continuation is the new target.
pub fn reliability(model: &TransformerLM, edits: &[EncodedEdit]) -> Result<f64> {
    if edits.is_empty() {
        return Err(Error::Evaluation("reliability of an empty edit set".into()));
    }
    let pairs: Vec<(&[TokenId], &[TokenId])> = edits
        .iter()
        .map(|e| (e.prompt.as_slice(), e.target.as_slice()))
        .collect();
    let hits = exact_match_batch(model, &pairs)?.into_iter().filter(|m| *m).count();
    Ok(pct(hits, edits.len()))
}

/// Mean over edits of the fraction of that edit's rephrasings answered
/// with the new target.
pub fn generalization(model: &TransformerLM, edits: &[EncodedEdit]) -> Result<f64> {
    if edits.is_empty() {
        return Err(Error::Evaluation("generalization of an empty edit set".into()));
    }
    if let Some(e) = edits.iter().find(|e| e.rephrases.is_empty()) {
        return Err(Error::Evaluation(format!("edit {} has no rephrasings", e.id)));
    }
    let mut pairs: Vec<(&[TokenId], &[TokenId])> = Vec::new();
    for e in edits {
        for r in &e.rephrases {
            pairs.push((r.as_slice(), e.target.as_slice()));
        }
    }
    let hits = exact_match_batch(model, &pairs)?;
    let mut offset = 0;
    let mut total = 0.0f64;
    for e in edits {
        let n = e.rephrases.len();
        let ok = hits[offset..offset + n].iter().filter(|m| **m).count();
        total += ok as f64 / n as f64;
        offset += n;
    }
    Ok(100.0 * total / edits.len() as f64)
}

/// Mean next-token negative log-likelihood (f64) and the number of
/// predicted positions over `texts`. Every position after the first is
/// predicted.
pub fn mean_nll(model: &TransformerLM, texts: &[Vec<TokenId>]) -> Result<(f64, usize)> {
    let max_len = model.config().max_seq_len;
    let vocab = model.config().vocab_size;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in texts.chunks(EVAL_CHUNK) {
        let mut inputs: Vec<&[TokenId]> = Vec::with_capacity(chunk.len());
        for t in chunk {
            if t.len() < 2 {
                continue;
            }
            if t.len() - 1 > max_len {
                return Err(Error::Length {
                    len: t.len() - 1,
                    max: max_len,
                });
            }
            inputs.push(&t[..t.len() - 1]);
        }
        if inputs.is_empty() {
            continue;
        }
        let batch = TokenBatch::from_sequences(&inputs, PAD);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, t) in chunk.iter().filter(|t| t.len() >= 2).enumerate() {
            for p in 0..t.len() - 1 {
                rows.push(b * batch.seq_len + p);
                targets.push(t[p + 1] as usize);
            }
        }
        let mut tape = Tape::new();
        let out = model.forward_rows(&mut tape, &batch, &[], Some(&rows))?;
        let logits = tape.value(out.logits).data();
        for (r, &y) in targets.iter().enumerate() {
            let row = &logits[r * vocab..(r + 1) * vocab];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v as f64));
            let lse = max + row.iter().map(|v| (*v as f64 - max).exp()).sum::<f64>().ln();
            total += lse - row[y] as f64;
        }
        count += targets.len();
    }
    if count == 0 {
        return Err(Error::Evaluation("no predictable positions in text".into()));
    }
    Ok((total / count as f64, count))
}

pub fn perplexity(model: &TransformerLM, texts: &[Vec<TokenId>]) -> Result<f64> {
    Ok(mean_nll(model, texts)?.0.exp())
}

/// Exact-match accuracy (percent) on held-out facts.
pub fn fact_accuracy(model: &TransformerLM, probes: &EncodedProbes) -> Result<f64> {
    if probes.facts.is_empty() {
        return Err(Error::Evaluation("no held-out facts".into()));
    }
    let pairs: Vec<(&[TokenId], &[TokenId])> = probes
        .facts
        .iter()
        .map(|f| (f.prompt.as_slice(), f.target.as_slice()))
        .collect();
    let hits = exact_match_batch(model, &pairs)?.into_iter().filter(|m| *m).count();
    Ok(pct(hits, pairs.len()))
}

/// Capability measurements of the pre-edited model, against which edited
/// models are compared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Baseline {
    pub ppl: f64,
    pub heldout_fact_acc_pct: f64,
    pub model_hash: String,
}

pub fn measure_baseline(model: &TransformerLM, probes: &EncodedProbes) -> Result<Baseline> {
    Ok(Baseline {
        ppl: perplexity(model, &probes.text)?,
        heldout_fact_acc_pct: fact_accuracy(model, probes)?,
        model_hash: model.hash(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capability {
    /// Held-out perplexity divided by the baseline perplexity.
    pub ppl_ratio: f64,
    pub heldout_fact_acc_pct: f64,
}

pub fn capability(
    model: &TransformerLM,
    probes: &EncodedProbes,
    baseline: Option<&Baseline>,
) -> Result<Capability> {
    let baseline = baseline.ok_or_else(|| {
        Error::Evaluation("capability needs the pre-edited baseline".into())
    })?;
    if !(baseline.ppl.is_finite() && baseline.ppl > 0.0) {
        return Err(Error::Evaluation(format!("invalid baseline perplexity {}", baseline.ppl)));
    }
    Ok(Capability {
        ppl_ratio: perplexity(model, &probes.text)? / baseline.ppl,
        heldout_fact_acc_pct: fact_accuracy(model, probes)?,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
    pub baseline_hash: String,
    pub edited_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub reliability_pct: f64,
    pub generalization_pct: f64,
    pub capability: Capability,
    pub seconds_per_edit: f64,
    pub n_edits: usize,
    pub metadata: ReportMeta,
}

/// Full four-metric evaluation of an edited model.
pub fn evaluate(
    model: &TransformerLM,
    edits: &[EncodedEdit],
    probes: &EncodedProbes,
    baseline: &Baseline,
    seconds_per_edit: f64,
    mut metadata: ReportMeta,
) -> Result<EvalReport> {
    metadata.baseline_hash = baseline.model_hash.clone();
    metadata.edited_hash = model.hash();
    Ok(EvalReport {
        reliability_pct: reliability(model, edits)?,
        generalization_pct: generalization(model, edits)?,
        capability: capability(model, probes, Some(baseline))?,
        seconds_per_edit,
        n_edits: edits.len(),
        metadata,
    })
}

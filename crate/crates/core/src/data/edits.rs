//! Counterfactual edit sets, capability probes, and sharding.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{Tokenizer, EOS};
use super::world::{Fact, FactWorld, NOISE_SENTENCES};
use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RephraseStyle {
    /// Same fact under a different relation template.
    Paraphrase,
    /// The edit prompt with an unrelated filler sentence in front.
    PrefixNoise,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditExample {
    pub id: usize,
    pub subject: String,
    pub relation: String,
    pub old_object: String,
    pub new_object: String,
    pub edit_prompt: String,
    pub target: String,
    pub rephrase_prompts: Vec<String>,
    pub rephrase_style: RephraseStyle,
}

/// Unedited facts used to measure retention.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeFact {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub prompt: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub heldout_text: Vec<String>,
    pub heldout_facts: Vec<ProbeFact>,
}

/// One line of `probes.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeRecord {
    Text { text: String },
    Fact(ProbeFact),
}

impl ProbeSet {
    pub fn to_records(&self) -> Vec<ProbeRecord> {
        self.heldout_text
            .iter()
            .map(|t| ProbeRecord::Text { text: t.clone() })
            .chain(self.heldout_facts.iter().cloned().map(ProbeRecord::Fact))
            .collect()
    }

    pub fn from_records(records: Vec<ProbeRecord>) -> Self {
        let mut set = ProbeSet::default();
        for r in records {
            match r {
                ProbeRecord::Text { text } => set.heldout_text.push(text),
                ProbeRecord::Fact(f) => set.heldout_facts.push(f),
            }
        }
        set
    }
}

/// Samples `n_edits` distinct facts and assigns each a different object
/// drawn uniformly from the relation's pool.
pub fn make_edit_set(
    world: &FactWorld,
    n_edits: usize,
    n_rephrases: usize,
    style: RephraseStyle,
    seed: u64,
) -> Result<Vec<EditExample>> {
    if n_edits > world.facts.len() {
        return Err(Error::Sampling(format!(
            "{n_edits} edits requested from {} facts",
            world.facts.len()
        )));
    }
    let mut rng = seed::named_rng(seed, "edits");
    let mut order: Vec<usize> = (0..world.facts.len()).collect();
    order.shuffle(&mut rng);

    let mut edits = Vec::with_capacity(n_edits);
    for (id, &fi) in order.iter().take(n_edits).enumerate() {
        let fact = &world.facts[fi];
        let rel = world
            .relation(&fact.relation)
            .ok_or_else(|| Error::Sampling(format!("unknown relation `{}`", fact.relation)))?;
        let alternatives: Vec<&String> = rel.objects.iter().filter(|o| **o != fact.object).collect();
        let new_object = (*alternatives
            .choose(&mut rng)
            .ok_or_else(|| Error::Sampling(format!("relation `{}` has one object", rel.name)))?)
        .clone();

        let n_templates = rel.templates.len();
        let edit_template = rng.random_range(0..n_templates);
        let edit_prompt = rel.render(edit_template, &fact.subject);
        let rephrase_prompts = match style {
            RephraseStyle::Paraphrase => {
                let others: Vec<usize> = (0..n_templates).filter(|t| *t != edit_template).collect();
                let start = rng.random_range(0..others.len());
                (0..n_rephrases)
                    .map(|i| rel.render(others[(start + i) % others.len()], &fact.subject))
                    .collect()
            }
            RephraseStyle::PrefixNoise => (0..n_rephrases)
                .map(|_| {
                    let noise = NOISE_SENTENCES[rng.random_range(0..NOISE_SENTENCES.len())];
                    format!("{noise} {edit_prompt}")
                })
                .collect(),
        };

        edits.push(EditExample {
            id,
            subject: fact.subject.clone(),
            relation: fact.relation.clone(),
            old_object: fact.object.clone(),
            target: new_object.clone(),
            new_object,
            edit_prompt,
            rephrase_prompts,
            rephrase_style: style,
        });
    }
    Ok(edits)
}

/// Held-out capability probes: facts whose `(subject, relation)` is never
/// edited, plus their statements under every template as perplexity text.
pub fn make_probe_set(
    world: &FactWorld,
    edits: &[EditExample],
    n_facts: usize,
    seed: u64,
) -> Result<ProbeSet> {
    let edited: HashSet<(&str, &str)> = edits
        .iter()
        .map(|e| (e.subject.as_str(), e.relation.as_str()))
        .collect();
    let mut candidates: Vec<&Fact> = world
        .facts
        .iter()
        .filter(|f| !edited.contains(&(f.subject.as_str(), f.relation.as_str())))
        .collect();
    if n_facts > candidates.len() {
        return Err(Error::Sampling(format!(
            "{n_facts} probe facts requested, {} unedited facts available",
            candidates.len()
        )));
    }
    let mut rng = seed::named_rng(seed, "probes");
    candidates.shuffle(&mut rng);
    candidates.truncate(n_facts);

    let mut set = ProbeSet::default();
    for f in candidates {
        let rel = world
            .relation(&f.relation)
            .ok_or_else(|| Error::Sampling(format!("unknown relation `{}`", f.relation)))?;
        for t in 0..rel.templates.len() {
            set.heldout_text
                .push(format!("{} {}", rel.render(t, &f.subject), f.object));
        }
        set.heldout_facts.push(ProbeFact {
            subject: f.subject.clone(),
            relation: f.relation.clone(),
            object: f.object.clone(),
            prompt: rel.render(rng.random_range(0..rel.templates.len()), &f.subject),
        });
    }
    Ok(set)
}

/// Splits `edits` into `k` equal, disjoint shards after a seeded shuffle.
/// A single shard is the input itself, in its original order.
pub fn shard<T: Clone>(edits: &[T], k: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if k == 0 || edits.len() % k != 0 {
        return Err(Error::Shard(format!(
            "{} edits cannot be split into {k} equal shards",
            edits.len()
        )));
    }
    if k == 1 {
        return Ok(vec![edits.to_vec()]);
    }
    let mut order: Vec<usize> = (0..edits.len()).collect();
    order.shuffle(&mut seed::named_rng(seed, "shard"));
    let size = edits.len() / k;
    Ok(order
        .chunks(size)
        .map(|c| c.iter().map(|&i| edits[i].clone()).collect())
        .collect())
}

/// Token-level view of an edit. `target` holds the answer tokens only; the
/// EOS terminator is appended where supervision or decoding needs it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedEdit {
    pub id: usize,
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub rephrases: Vec<Vec<TokenId>>,
}

impl EncodedEdit {
    pub fn new(tok: &Tokenizer, e: &EditExample) -> Self {
        Self {
            id: e.id,
            prompt: tok.encode(&e.edit_prompt),
            target: tok.encode(&e.target),
            rephrases: e.rephrase_prompts.iter().map(|r| tok.encode(r)).collect(),
        }
    }

    /// Answer tokens followed by EOS: the supervised continuation.
    pub fn terminated_target(&self) -> Vec<TokenId> {
        let mut t = self.target.clone();
        t.push(EOS);
        t
    }
}

pub fn encode_edits(tok: &Tokenizer, edits: &[EditExample]) -> Vec<EncodedEdit> {
    edits.iter().map(|e| EncodedEdit::new(tok, e)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedFact {
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedProbes {
    /// Statements terminated by EOS.
    pub text: Vec<Vec<TokenId>>,
    pub facts: Vec<EncodedFact>,
}

impl EncodedProbes {
    pub fn new(tok: &Tokenizer, probes: &ProbeSet) -> Self {
        Self {
            text: probes
                .heldout_text
                .iter()
                .map(|t| {
                    let mut ids = tok.encode(t);
                    ids.push(EOS);
                    ids
                })
                .collect(),
            facts: probes
                .heldout_facts
                .iter()
                .map(|f| EncodedFact {
                    prompt: tok.encode(&f.prompt),
                    target: tok.encode(&f.object),
                })
                .collect(),
        }
    }
}

//! Synthetic fact worlds: invented entities, functional relations with
//! several surface templates, and multi-token object values.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::seed;

/// Relation name with its surface templates (`{s}` marks the subject).
const RELATIONS: [(&str, &[&str]); 12] = [
    (
        "capital",
        &["the capital of {s} is", "{s} has its capital in", "the seat of government of {s} is"],
    ),
    ("language", &["the language of {s} is", "people in {s} speak"]),
    ("leader", &["the leader of {s} is", "{s} is led by"]),
    ("currency", &["the currency of {s} is", "in {s} people pay with"]),
    ("founder", &["the founder of {s} is", "{s} was founded by"]),
    ("river", &["the main river of {s} is", "{s} lies on the river"]),
    ("sport", &["the national sport of {s} is", "in {s} everyone plays"]),
    ("dish", &["the favorite dish of {s} is", "people in {s} love to eat"]),
    ("animal", &["the national animal of {s} is", "the symbol of {s} is the"]),
    ("peak", &["the highest peak of {s} is", "{s} is overshadowed by"]),
    ("patron", &["the patron saint of {s} is", "{s} honors the saint"]),
    ("anthem", &["the anthem of {s} is", "{s} sings the anthem"]),
];

/// Filler sentences prepended to prompts for noise-prefixed rephrasings.
pub const NOISE_SENTENCES: [&str; 20] = [
    "the weather was mild that morning .",
    "a small boat drifted past the old pier .",
    "she closed the window before the rain .",
    "the market opened late on tuesday .",
    "two birds sat quietly on the fence .",
    "he forgot his keys at the station .",
    "the soup needed a little more salt .",
    "a long train rolled through the valley .",
    "the library stays open until nine .",
    "children were laughing in the park .",
    "the lamp flickered for a moment .",
    "our neighbor painted the door green .",
    "the bread was still warm from the oven .",
    "a cold wind came from the north .",
    "the meeting ended earlier than planned .",
    "he read the letter twice .",
    "the garden was full of tall grass .",
    "a dog barked somewhere down the road .",
    "the clock in the hall stopped at noon .",
    "they walked home along the narrow path .",
];

pub const MAX_RELATIONS: usize = RELATIONS.len();

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    pub templates: Vec<String>,
    pub objects: Vec<String>,
}

impl Relation {
    pub fn render(&self, template: usize, subject: &str) -> String {
        self.templates[template].replace("{s}", subject)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactWorld {
    pub entities: Vec<String>,
    pub relations: Vec<Relation>,
    pub facts: Vec<Fact>,
    pub seed: u64,
}

/// Generation knobs beyond the four core sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldParams {
    pub seed: u64,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_facts: usize,
    pub objects_per_relation: usize,
    pub min_object_tokens: usize,
    pub max_object_tokens: usize,
}

impl WorldParams {
    pub fn new(seed: u64, n_entities: usize, n_relations: usize, n_facts: usize) -> Self {
        Self {
            seed,
            n_entities,
            n_relations,
            n_facts,
            objects_per_relation: 24,
            min_object_tokens: 2,
            max_object_tokens: 3,
        }
    }
}

fn syllable(rng: &mut impl Rng) -> String {
    let c = CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char;
    let v = VOWELS[rng.random_range(0..VOWELS.len())] as char;
    format!("{c}{v}")
}

fn fresh_word(rng: &mut impl Rng, used: &mut HashSet<String>, syllables: usize, coda: bool) -> String {
    loop {
        let mut w: String = (0..syllables).map(|_| syllable(rng)).collect();
        if coda {
            w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

pub fn gen_fact_world(
    seed: u64,
    n_entities: usize,
    n_relations: usize,
    n_facts: usize,
) -> Result<FactWorld> {
    generate_world(&WorldParams::new(seed, n_entities, n_relations, n_facts))
}

/// Deterministic world generation. `(subject, relation)` pairs are unique,
/// so every prompt has exactly one correct answer.
pub fn generate_world(p: &WorldParams) -> Result<FactWorld> {
    if p.n_relations == 0 || p.n_relations > MAX_RELATIONS {
        return Err(Error::Generation(format!(
            "n_relations must be in 1..={MAX_RELATIONS}, got {}",
            p.n_relations
        )));
    }
    if p.n_entities == 0 {
        return Err(Error::Generation("n_entities must be positive".into()));
    }
    if p.n_facts > p.n_entities * p.n_relations {
        return Err(Error::Generation(format!(
            "{} facts cannot fit {} entities x {} relations",
            p.n_facts, p.n_entities, p.n_relations
        )));
    }
    if p.objects_per_relation < 2 {
        return Err(Error::Generation(
            "each relation needs at least 2 objects so edits can change the answer".into(),
        ));
    }
    if p.min_object_tokens == 0 || p.min_object_tokens > p.max_object_tokens {
        return Err(Error::Generation("invalid object token range".into()));
    }

    let mut rng = seed::named_rng(p.seed, "data");
    let mut used: HashSet<String> = RELATIONS
        .iter()
        .flat_map(|(_, ts)| ts.iter())
        .chain(NOISE_SENTENCES.iter())
        .flat_map(|s| s.split_whitespace())
        .map(str::to_string)
        .collect();

    let entities: Vec<String> = (0..p.n_entities)
        .map(|_| fresh_word(&mut rng, &mut used, 3, false))
        .collect();

    let relations: Vec<Relation> = RELATIONS[..p.n_relations]
        .iter()
        .map(|(name, templates)| {
            let objects = (0..p.objects_per_relation)
                .map(|_| {
                    let len = rng.random_range(p.min_object_tokens..=p.max_object_tokens);
                    (0..len)
                        .map(|_| fresh_word(&mut rng, &mut used, 2, true))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            Relation {
                name: name.to_string(),
                templates: templates.iter().map(|t| t.to_string()).collect(),
                objects,
            }
        })
        .collect();

    let mut pairs: Vec<(usize, usize)> = (0..p.n_entities)
        .flat_map(|e| (0..p.n_relations).map(move |r| (e, r)))
        .collect();
    pairs.shuffle(&mut rng);
    pairs.truncate(p.n_facts);
    pairs.sort_unstable();

    let facts = pairs
        .into_iter()
        .map(|(e, r)| {
            let rel = &relations[r];
            Fact {
                subject: entities[e].clone(),
                relation: rel.name.clone(),
                object: rel.objects[rng.random_range(0..rel.objects.len())].clone(),
            }
        })
        .collect();

    Ok(FactWorld {
        entities,
        relations,
        facts,
        seed: p.seed,
    })
}

impl FactWorld {
    pub fn relation(&self, name: &str) -> Option<&Relation> {
        self.relations.iter().find(|r| r.name == name)
    }

    /// Closed vocabulary covering every string the world can render.
    pub fn tokenizer(&self) -> Tokenizer {
        let mut words: BTreeSet<&str> = BTreeSet::new();
        for e in &self.entities {
            words.insert(e);
        }
        for r in &self.relations {
            for t in &r.templates {
                words.extend(t.split_whitespace().filter(|w| *w != "{s}"));
            }
            for o in &r.objects {
                words.extend(o.split_whitespace());
            }
        }
        for s in NOISE_SENTENCES {
            words.extend(s.split_whitespace());
        }
        Tokenizer::from_words(words)
    }

    /// Prompt for `fact` under template `template`.
    pub fn prompt(&self, fact: &Fact, template: usize) -> Result<String> {
        let rel = self
            .relation(&fact.relation)
            .ok_or_else(|| Error::Generation(format!("unknown relation `{}`", fact.relation)))?;
        if template >= rel.templates.len() {
            return Err(Error::Generation(format!(
                "relation `{}` has no template {template}",
                rel.name
            )));
        }
        Ok(rel.render(template, &fact.subject))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = gen_fact_world(3, 20, 4, 50).unwrap();
        let b = gen_fact_world(3, 20, 4, 50).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_fact_world(4, 20, 4, 50).unwrap());
    }

    #[test]
    fn full_cross_product_at_the_boundary() {
        let w = gen_fact_world(1, 7, 3, 21).unwrap();
        let pairs: HashSet<_> = w.facts.iter().map(|f| (&f.subject, &f.relation)).collect();
        assert_eq!(pairs.len(), 21);
    }

    #[test]
    fn infeasible_sizes_are_rejected() {
        assert!(matches!(gen_fact_world(1, 5, 2, 11), Err(Error::Generation(_))));
        assert!(gen_fact_world(1, 5, 13, 1).is_err());
    }

    #[test]
    fn subject_relation_pairs_are_unique() {
        let w = gen_fact_world(9, 40, 6, 200).unwrap();
        let pairs: HashSet<_> = w.facts.iter().map(|f| (&f.subject, &f.relation)).collect();
        assert_eq!(pairs.len(), w.facts.len());
    }

    #[test]
    fn every_relation_has_two_templates() {
        let w = gen_fact_world(9, 4, MAX_RELATIONS, 4).unwrap();
        for r in &w.relations {
            let distinct: HashSet<_> = r.templates.iter().collect();
            assert!(distinct.len() >= 2, "{}", r.name);
        }
    }

    #[test]
    fn rendered_statements_round_trip_through_the_tokenizer() {
        let w = gen_fact_world(2, 30, 12, 300).unwrap();
        let tok = w.tokenizer();
        for f in &w.facts {
            let rel = w.relation(&f.relation).unwrap();
            for t in 0..rel.templates.len() {
                let text = format!("{} {}", rel.render(t, &f.subject), f.object);
                let ids = tok.encode(&text);
                assert!(!ids.contains(&super::super::tokenizer::UNK));
                assert_eq!(tok.decode(&ids), text);
            }
        }
        for s in NOISE_SENTENCES {
            assert_eq!(tok.decode(&tok.encode(s)), s);
        }
    }
}

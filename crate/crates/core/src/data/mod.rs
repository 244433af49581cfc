//! Synthetic fact worlds, counterfactual edit sets, capability probes and
//! their JSONL persistence.

mod edits;
pub mod io;
pub mod tokenizer;
mod world;

pub use edits::{
    encode_edits, make_edit_set, make_probe_set, shard, EditExample, EncodedEdit, EncodedFact,
    EncodedProbes, ProbeFact, ProbeRecord, ProbeSet, RephraseStyle,
};
pub use tokenizer::Tokenizer;
pub use world::{
    gen_fact_world, generate_world, Fact, FactWorld, Relation, WorldParams, MAX_RELATIONS,
    NOISE_SENTENCES,
};

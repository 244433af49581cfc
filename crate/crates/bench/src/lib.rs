//! Shared fixtures for the benchmarks.

use editlab::data::{encode_edits, gen_fact_world, make_edit_set, EncodedEdit, RephraseStyle};
use editlab::model::build_model;
use editlab::{ModelConfig, TransformerLM};

/// A toy-shaped model over a small world, plus encoded edits.
pub fn fixture(n_edits: usize) -> (TransformerLM, Vec<EncodedEdit>) {
    let world = gen_fact_world(0, 60, 5, 300).expect("world");
    let tok = world.tokenizer();
    let edits = make_edit_set(&world, n_edits, 1, RephraseStyle::Paraphrase, 0).expect("edits");
    let model = build_model(ModelConfig::toy(tok.vocab_size(), 0)).expect("model");
    (model, encode_edits(&tok, &edits))
}

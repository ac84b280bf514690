#![allow(dead_code)]

pub mod selection_oracle;

use ircan_core::data::{gen_synthetic, pseudo_words, SyntheticData, SyntheticSpec};
use ircan_core::harness::PromptTemplate;
use ircan_core::model::{
    train_toy, FfnKind, ModelConfig, PositionKind, Tokenizer, TrainConfig, TransformerModel,
};

pub fn small_spec(seed: u64) -> SyntheticSpec {
    let (entities, novel, relations, values) = (12, 4, 2, 8);
    SyntheticSpec {
        n_entities: entities,
        n_relations: relations,
        vocab: pseudo_words(entities + novel + relations + values),
        n_conflicts: 20,
        seed,
        n_novel: novel,
        n_reading: 8,
        n_stubborn: 4,
    }
}

pub fn small_data(seed: u64) -> SyntheticData {
    gen_synthetic(&small_spec(seed)).unwrap()
}

/// Vocabulary over the corpus and every rendered prompt of both tasks.
pub fn tokenizer_for(data: &SyntheticData) -> Tokenizer {
    let mut texts = data.corpus.clone();
    for ex in &data.completion {
        texts.push(PromptTemplate::completion_default().render(ex, true));
    }
    for ex in &data.multiple_choice {
        texts.push(PromptTemplate::multiple_choice_default().render(ex, true));
    }
    Tokenizer::from_texts(texts.iter().map(String::as_str), false)
}

pub fn config(tok: &Tokenizer, n_layers: usize, d_ff: usize, ffn: FfnKind) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads: 2,
        d_model: 16,
        d_ff,
        vocab_size: tok.vocab_size(),
        ffn_kind: ffn,
        position_kind: PositionKind::Learned,
        max_seq_len: 32,
        norm_eps: 1e-5,
        rope_base: 10_000.0,
    }
}

/// Untrained model over the small synthetic vocabulary.
pub fn random_model(n_layers: usize, d_ff: usize, ffn: FfnKind, seed: u64) -> (TransformerModel, SyntheticData) {
    let data = small_data(5);
    let tok = tokenizer_for(&data);
    let cfg = config(&tok, n_layers, d_ff, ffn);
    (TransformerModel::random(cfg, tok, seed).unwrap(), data)
}

/// Small model trained on the small synthetic corpus.
pub fn trained_model() -> (TransformerModel, SyntheticData) {
    trained_model_seeded(5)
}

pub fn trained_model_seeded(seed: u64) -> (TransformerModel, SyntheticData) {
    let data = small_data(5);
    let tok = tokenizer_for(&data);
    let mut cfg = config(&tok, 2, 32, FfnKind::Plain);
    cfg.d_model = 24;
    let mut tc = TrainConfig::new(400, 1e-2, seed);
    tc.batch_size = 8;
    let (model, _) = train_toy(cfg, tok, &data.corpus, &tc).unwrap();
    (model, data)
}

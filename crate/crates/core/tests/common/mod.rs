#![allow(dead_code)]

use std::path::PathBuf;

use tacl::corpus::{build_vocab, Corpus, EncodedCorpus, Vocab};
use tacl::model::{init_params, ModelParams};
use tacl::trainer::{Recipe, TrainConfig};
use tacl::Scalar;

pub fn fixture_path() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/corpus.txt"))
}

pub fn fixture(vocab_size: usize) -> (Vocab, EncodedCorpus) {
    let corpus = Corpus::load(fixture_path()).expect("fixture corpus");
    let vocab = build_vocab(corpus.sentences(), vocab_size, 2).expect("vocab");
    let enc = corpus.encode(&vocab);
    (vocab, enc)
}

/// Small enough to run hundreds of steps inside a test.
pub fn tiny_config(recipe: Recipe, steps: usize) -> TrainConfig {
    TrainConfig {
        recipe,
        steps,
        batch_size: 4,
        lr_peak: 1e-3,
        max_len: 32,
        tau: 0.1,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        ..TrainConfig::default()
    }
}

pub fn tiny_params<T: Scalar>(cfg: &TrainConfig, vocab: &Vocab) -> ModelParams<T> {
    init_params::<T>(&cfg.model_config(vocab.len()), cfg.seed).expect("init")
}

//! Small corpora and models shared by unit tests.

use crate::model::{FusionConfig, FusionMode, LmConfig, LoraConfig, Model, ModelConfig};
use crate::synthgen::{generate_samples, CorpusConfig, DialogueSample};
use crate::tokens::Vocab;

pub fn tiny_vocab() -> Vocab {
    Vocab::new(32, 16, 16, 24).unwrap()
}

pub fn tiny_corpus(n: usize, seed: u64) -> Vec<DialogueSample> {
    let cfg = CorpusConfig {
        n_samples: n,
        seed,
        seconds: [0.4, 0.6],
        response_seconds: [0.3, 0.4],
        vocab: tiny_vocab(),
        ..Default::default()
    };
    generate_samples(&cfg).unwrap().0.into_iter().map(|(_, s)| s).collect()
}

pub fn tiny_config(fusion: Option<FusionMode>, d: usize) -> ModelConfig {
    ModelConfig {
        lm: LmConfig {
            d_model: d,
            n_layers: 2,
            n_heads: 2,
            d_ff: 2 * d,
            vocab: tiny_vocab(),
            max_seq: 512,
            dropout: 0.0,
        },
        lora: Some(LoraConfig {
            rank: 4,
            alpha: 8.0,
            dropout: 0.0,
        }),
        fusion: fusion.map(|mode| FusionConfig {
            mode,
            d_expr: 8,
            d_jaw: 4,
            d_adapter_hidden: 16,
            n_cross_layers: 1,
            d_cross_ff: 16,
            compression: 5,
            infill_ratio: 0.5,
        }),
        d_emotion: 8,
    }
}

pub fn tiny_model(fusion: Option<FusionMode>, d: usize, seed: u64) -> Model {
    Model::new(tiny_config(fusion, d), seed).unwrap()
}

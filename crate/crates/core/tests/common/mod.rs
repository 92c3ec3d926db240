#![allow(dead_code)]

use clicker_core::checkpoint::Checkpoint;
use clicker_core::data::{generate_synthetic_world, SynthWorldConfig, SyntheticCorpus};
use clicker_core::encoder::EncoderConfig;
use clicker_core::head::{HeadConfig, LossWeights, Stage};
use clicker_core::model::Model;
use clicker_core::trainer::TrainConfig;

pub fn corpus() -> SyntheticCorpus {
    generate_synthetic_world(&SynthWorldConfig {
        n_concepts: 40,
        n_filler_tokens: 12,
        relation_density: 0.1,
        choices_per_item: 4,
        n_train: 40,
        n_dev: 20,
        n_test: 10,
        n_parallel: 20,
        seed: 5,
    })
    .unwrap()
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_len: 16,
        ..EncoderConfig::default()
    }
}

pub fn fresh(corpus: &SyntheticCorpus) -> Checkpoint {
    Checkpoint::fresh(Model::new(tiny_encoder(), HeadConfig::default(), corpus.vocab()).unwrap())
}

pub fn config(stage: Stage, steps: u64, loss: LossWeights) -> TrainConfig {
    TrainConfig {
        stage,
        lr: 3e-3,
        warmup_steps: 0,
        total_steps: steps,
        batch_size: 4,
        weight_decay: 0.0,
        loss,
        eval_every: 0,
        seed: 9,
    }
}

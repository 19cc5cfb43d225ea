#![allow(dead_code)]

use quantpipe::model::{calibrate, Calibration, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(n_blocks: usize) -> ModelConfig {
    ModelConfig {
        n_blocks,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 32,
        max_seq_len: 48,
    }
}

pub fn tiny_model(n_blocks: usize, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::init_random(tiny_config(n_blocks), &mut rng).unwrap()
}

pub fn random_seqs(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(0..vocab as u32)).collect())
        .collect()
}

pub fn tiny_calibration(model: &Model) -> Calibration {
    calibrate(model, &random_seqs(8, 24, model.config.vocab_size, 99), None).unwrap()
}

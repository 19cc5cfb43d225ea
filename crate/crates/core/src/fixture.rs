//! Deterministic generation of the pinned fixtures: corpus text, a 6-block
//! target and a 2-block draft trained on it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{generate_corpus, Corpus};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::train::{train, TrainConfig};

pub const DEFAULT_SEED: u64 = 20240611;
pub const CORPUS_BYTES: usize = 240_000;

#[derive(Clone, Debug)]
pub struct FixtureSpec {
    pub seed: u64,
    pub corpus_bytes: usize,
    pub target: ModelConfig,
    pub draft: ModelConfig,
    pub target_train: TrainConfig,
    pub draft_train: TrainConfig,
}

impl FixtureSpec {
    pub fn pinned(seed: u64) -> Self {
        let target_train = TrainConfig {
            seed: seed ^ 0x7a,
            ..TrainConfig::default()
        };
        let draft_train = TrainConfig {
            seed: seed ^ 0xd4,
            ..TrainConfig::default()
        };
        Self {
            seed,
            corpus_bytes: CORPUS_BYTES,
            target: ModelConfig::toy(),
            draft: ModelConfig::toy_draft(),
            target_train,
            draft_train,
        }
    }
}

pub struct Fixture {
    pub corpus_text: String,
    pub target: Model,
    pub draft: Model,
}

/// Build the corpus and train both models. `log` receives
/// `(model name, step, loss)`.
pub fn make_fixture(spec: &FixtureSpec, mut log: impl FnMut(&str, usize, f32)) -> Result<Fixture> {
    let corpus_text = generate_corpus(spec.seed, spec.corpus_bytes);
    let corpus = Corpus::from_text(&corpus_text)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut target = Model::init_random(spec.target.clone(), &mut rng)?;
    let mut draft = Model::init_random(spec.draft.clone(), &mut rng)?;
    train(&mut target, corpus.train(), &spec.target_train, |s, l| log("target", s, l))?;
    train(&mut draft, corpus.train(), &spec.draft_train, |s, l| log("draft", s, l))?;
    Ok(Fixture {
        corpus_text,
        target,
        draft,
    })
}

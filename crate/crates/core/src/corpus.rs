//! Toy text corpus: a seeded sentence grammar with Zipf-skewed word choice,
//! tokenized as bytes, plus the pinned calibration and validation slices.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Tokens per evaluation sequence (64 next-token predictions each).
pub const SEQ_TOKENS: usize = 65;
pub const CALIBRATION_SEQS: usize = 64;
pub const VALIDATION_SEQS: usize = 32;
/// Fraction of the corpus (by bytes) reserved for training.
pub const TRAIN_FRACTION: f64 = 0.9;

const ADJECTIVES: &[&str] = &[
    "small", "old", "red", "quiet", "bright", "cold", "green", "heavy", "early", "strange", "round", "gentle",
];
const NOUNS: &[(&str, &str)] = &[
    ("cat", "cats"),
    ("river", "rivers"),
    ("city", "cities"),
    ("engineer", "engineers"),
    ("song", "songs"),
    ("garden", "gardens"),
    ("machine", "machines"),
    ("teacher", "teachers"),
    ("bridge", "bridges"),
    ("storm", "storms"),
    ("letter", "letters"),
    ("forest", "forests"),
];
const VERBS: &[(&str, &str)] = &[
    ("sees", "see"),
    ("builds", "build"),
    ("follows", "follow"),
    ("finds", "find"),
    ("carries", "carry"),
    ("watches", "watch"),
    ("remembers", "remember"),
    ("crosses", "cross"),
];
const ADVERBS: &[&str] = &["slowly", "again", "at night", "in the morning", "without a sound"];
const PREPS: &[&str] = &["near", "under", "behind", "across"];
const TOPICS: &[&str] = &["History", "Geography", "Music", "Industry", "Weather"];

fn zipf<'a, T, R: Rng>(rng: &mut R, items: &'a [T]) -> &'a T {
    let total: f64 = (1..=items.len()).map(|r| 1.0 / r as f64).sum();
    let mut u = rng.random::<f64>() * total;
    for (r, item) in items.iter().enumerate() {
        u -= 1.0 / (r + 1) as f64;
        if u <= 0.0 {
            return item;
        }
    }
    items.last().expect("non-empty word list")
}

fn noun_phrase<R: Rng>(rng: &mut R, out: &mut String) -> bool {
    let plural = rng.random_bool(0.3);
    out.push_str(if plural { "the " } else { *[ "the ", "a " ].choose(rng).expect("two articles") });
    if rng.random_bool(0.4) {
        out.push_str(zipf(rng, ADJECTIVES));
        out.push(' ');
    }
    let (s, p) = zipf(rng, NOUNS);
    out.push_str(if plural { p } else { s });
    plural
}

fn sentence<R: Rng>(rng: &mut R, out: &mut String) {
    let start = out.len();
    let plural = noun_phrase(rng, out);
    out.push(' ');
    let (s, p) = zipf(rng, VERBS);
    out.push_str(if plural { p } else { s });
    out.push(' ');
    match rng.random_range(0..3) {
        0 => {
            noun_phrase(rng, out);
        }
        1 => {
            noun_phrase(rng, out);
            out.push(' ');
            out.push_str(zipf(rng, ADVERBS));
        }
        _ => {
            out.push_str(zipf(rng, PREPS));
            out.push(' ');
            noun_phrase(rng, out);
        }
    }
    out.push_str(". ");
    // capitalize the sentence start
    let first = out[start..start + 1].to_ascii_uppercase();
    out.replace_range(start..start + 1, &first);
}

/// Generate `target_bytes` (or slightly more) of corpus text from `seed`.
pub fn generate_corpus(seed: u64, target_bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(target_bytes + 256);
    while out.len() < target_bytes {
        out.push_str(" = ");
        out.push_str(zipf(&mut rng, TOPICS));
        out.push_str(" = \n");
        for _ in 0..rng.random_range(2..5) {
            for _ in 0..rng.random_range(3..7) {
                sentence(&mut rng, &mut out);
            }
            out.push('\n');
        }
    }
    out
}

/// Byte-level tokenization; the vocabulary is the 256 byte values.
pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

pub fn detokenize(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Tokenized corpus split into a training region and a held-out region.
#[derive(Clone, Debug)]
pub struct Corpus {
    tokens: Vec<u32>,
    split: usize,
}

impl Corpus {
    pub fn from_text(text: &str) -> Result<Self> {
        let tokens = tokenize(text);
        let split = (tokens.len() as f64 * TRAIN_FRACTION) as usize;
        let held_out = tokens.len() - split;
        if split < SEQ_TOKENS * CALIBRATION_SEQS || held_out < SEQ_TOKENS * VALIDATION_SEQS {
            return Err(Error::Invalid(format!(
                "corpus of {} bytes is too small for the pinned slices",
                tokens.len()
            )));
        }
        Ok(Self { tokens, split })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn train(&self) -> &[u32] {
        &self.tokens[..self.split]
    }

    pub fn held_out(&self) -> &[u32] {
        &self.tokens[self.split..]
    }

    /// 64 sequences spread evenly over the training region.
    pub fn calibration_slice(&self) -> Vec<Vec<u32>> {
        spread(self.train(), CALIBRATION_SEQS)
    }

    /// 32 sequences spread evenly over the held-out region.
    pub fn validation_slice(&self) -> Vec<Vec<u32>> {
        spread(self.held_out(), VALIDATION_SEQS)
    }
}

fn spread(region: &[u32], n: usize) -> Vec<Vec<u32>> {
    let stride = (region.len() - SEQ_TOKENS) / (n - 1).max(1);
    (0..n).map(|i| region[i * stride..i * stride + SEQ_TOKENS].to_vec()).collect()
}

/// SHA-256 over the token ids of a slice (sequence lengths included).
pub fn fingerprint(slice: &[Vec<u32>]) -> String {
    let mut h = Sha256::new();
    for seq in slice {
        h.update((seq.len() as u64).to_le_bytes());
        for t in seq {
            h.update(t.to_le_bytes());
        }
    }
    crate::hex(&h.finalize())
}

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::{BlockId, ModelConfig};

/// Dense layer, weight row-major `[out_features, in_features]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    pub out_features: usize,
    pub in_features: usize,
}

impl Linear {
    pub fn zeros(out_features: usize, in_features: usize, bias: bool) -> Self {
        Self {
            weight: vec![0.0; out_features * in_features],
            bias: bias.then(|| vec![0.0; out_features]),
            out_features,
            in_features,
        }
    }

    pub fn row(&self, o: usize) -> &[f32] {
        &self.weight[o * self.in_features..(o + 1) * self.in_features]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl LayerNormParams {
    pub fn identity(n: usize) -> Self {
        Self {
            gamma: vec![1.0; n],
            beta: vec![0.0; n],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn zeros(d_model: usize, d_ff: usize) -> Self {
        Self {
            ln1: LayerNormParams::identity(d_model),
            wq: Linear::zeros(d_model, d_model, true),
            wk: Linear::zeros(d_model, d_model, true),
            wv: Linear::zeros(d_model, d_model, true),
            wo: Linear::zeros(d_model, d_model, true),
            ln2: LayerNormParams::identity(d_model),
            fc1: Linear::zeros(d_ff, d_model, true),
            fc2: Linear::zeros(d_model, d_ff, true),
        }
    }

    /// Hidden width of the MLP (may be below `d_ff` after channel pruning).
    pub fn ff_width(&self) -> usize {
        self.fc1.out_features
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    /// `[vocab_size, d_model]`
    pub tokens: Vec<f32>,
    /// `[max_seq_len, d_model]`
    pub positions: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub ln: LayerNormParams,
    /// `[vocab_size, d_model]`, no bias.
    pub out: Linear,
}

/// Keep only the most-attended positions after a block boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenDrop {
    pub after_block: usize,
    pub keep_fraction: f64,
}

impl TokenDrop {
    /// Positions retained out of `t`: `ceil(keep_fraction * t)`, at least one.
    pub fn kept(&self, t: usize) -> usize {
        ((self.keep_fraction * t as f64).ceil() as usize).clamp(1.min(t), t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Embedding,
    pub blocks: Vec<Block>,
    pub head: Head,
    pub token_drop: Option<TokenDrop>,
}

/// Borrowed view of one named parameter tensor.
#[derive(Debug)]
pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub owner: BlockId,
    pub data: &'a [f32],
}

impl ParamView<'_> {
    /// 2-D weight matrices (and embedding tables) are what precision
    /// assignments act on; vectors stay at baseline.
    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

pub struct ParamViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub owner: BlockId,
    pub data: &'a mut Vec<f32>,
}

impl Model {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, v) = (config.d_model, config.vocab_size);
        Ok(Self {
            embed: Embedding {
                tokens: vec![0.0; v * d],
                positions: vec![0.0; config.max_seq_len * d],
            },
            blocks: (0..config.n_blocks).map(|_| Block::zeros(d, config.d_ff)).collect(),
            head: Head {
                ln: LayerNormParams::identity(d),
                out: Linear::zeros(v, d, false),
            },
            token_drop: None,
            config,
        })
    }

    /// Gaussian init: std 0.02, residual projections scaled by `1/sqrt(2 n_blocks)`.
    pub fn init_random<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let base = Normal::new(0.0f32, 0.02).expect("valid std");
        let resid_std = 0.02 / (2.0 * m.config.n_blocks as f32).sqrt();
        let resid = Normal::new(0.0f32, resid_std).expect("valid std");
        for p in m.params_mut() {
            if p.shape.len() != 2 {
                continue;
            }
            let dist = if p.name.ends_with("wo.weight") || p.name.ends_with("fc2.weight") {
                resid
            } else {
                base
            };
            p.data.iter_mut().for_each(|w| *w = dist.sample(rng));
        }
        Ok(m)
    }

    /// Install (or clear) a token-drop stage after `after_block`.
    pub fn set_token_drop(&mut self, drop: Option<TokenDrop>) -> Result<()> {
        if let Some(td) = drop {
            if !(td.keep_fraction > 0.0 && td.keep_fraction <= 1.0) {
                return Err(Error::Invalid(format!("keep_fraction {} outside (0, 1]", td.keep_fraction)));
            }
            if td.after_block >= self.blocks.len() {
                return Err(Error::UnknownBlock(BlockId::Transformer(td.after_block)));
            }
        }
        self.token_drop = drop;
        Ok(())
    }

    pub fn block_ids(&self) -> Vec<BlockId> {
        self.config.block_ids()
    }

    pub fn check_block(&self, block: BlockId) -> Result<()> {
        match block {
            BlockId::Transformer(i) if i >= self.blocks.len() => Err(Error::UnknownBlock(block)),
            _ => Ok(()),
        }
    }

    /// All parameters in canonical order (the checkpoint order).
    pub fn params(&self) -> Vec<ParamView<'_>> {
        let d = self.config.d_model;
        let mut out = vec![
            ParamView {
                name: "embed.tokens".into(),
                shape: vec![self.config.vocab_size, d],
                owner: BlockId::Embedding,
                data: &self.embed.tokens,
            },
            ParamView {
                name: "embed.positions".into(),
                shape: vec![self.config.max_seq_len, d],
                owner: BlockId::Embedding,
                data: &self.embed.positions,
            },
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let owner = BlockId::Transformer(i);
            push_ln(&mut out, format!("blocks.{i}.ln1"), owner, &b.ln1);
            for (name, lin) in [("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo)] {
                push_linear(&mut out, format!("blocks.{i}.attn.{name}"), owner, lin);
            }
            push_ln(&mut out, format!("blocks.{i}.ln2"), owner, &b.ln2);
            push_linear(&mut out, format!("blocks.{i}.mlp.fc1"), owner, &b.fc1);
            push_linear(&mut out, format!("blocks.{i}.mlp.fc2"), owner, &b.fc2);
        }
        push_ln(&mut out, "head.ln".into(), BlockId::OutputHead, &self.head.ln);
        push_linear(&mut out, "head.out".into(), BlockId::OutputHead, &self.head.out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let d = self.config.d_model;
        let (v, t) = (self.config.vocab_size, self.config.max_seq_len);
        let mut out = vec![
            ParamViewMut {
                name: "embed.tokens".into(),
                shape: vec![v, d],
                owner: BlockId::Embedding,
                data: &mut self.embed.tokens,
            },
            ParamViewMut {
                name: "embed.positions".into(),
                shape: vec![t, d],
                owner: BlockId::Embedding,
                data: &mut self.embed.positions,
            },
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let owner = BlockId::Transformer(i);
            push_ln_mut(&mut out, format!("blocks.{i}.ln1"), owner, &mut b.ln1);
            for (name, lin) in [("wq", &mut b.wq), ("wk", &mut b.wk), ("wv", &mut b.wv), ("wo", &mut b.wo)] {
                push_linear_mut(&mut out, format!("blocks.{i}.attn.{name}"), owner, lin);
            }
            push_ln_mut(&mut out, format!("blocks.{i}.ln2"), owner, &mut b.ln2);
            push_linear_mut(&mut out, format!("blocks.{i}.mlp.fc1"), owner, &mut b.fc1);
            push_linear_mut(&mut out, format!("blocks.{i}.mlp.fc2"), owner, &mut b.fc2);
        }
        push_ln_mut(&mut out, "head.ln".into(), BlockId::OutputHead, &mut self.head.ln);
        push_linear_mut(&mut out, "head.out".into(), BlockId::OutputHead, &mut self.head.out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    pub fn block_param_count(&self, block: BlockId) -> usize {
        self.params().iter().filter(|p| p.owner == block).map(|p| p.data.len()).sum()
    }

    /// Raw little-endian bytes of every parameter owned by `block`.
    pub fn block_bytes(&self, block: BlockId) -> Vec<u8> {
        self.params()
            .iter()
            .filter(|p| p.owner == block)
            .flat_map(|p| p.data.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    /// SHA-256 over parameter names, shapes and bytes.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.params() {
            h.update(p.name.as_bytes());
            for s in &p.shape {
                h.update((*s as u64).to_le_bytes());
            }
            for v in p.data {
                h.update(v.to_le_bytes());
            }
        }
        if let Some(td) = self.token_drop {
            h.update(td.after_block.to_le_bytes());
            h.update(td.keep_fraction.to_le_bytes());
        }
        crate::hex(&h.finalize())
    }
}

fn push_ln<'a>(out: &mut Vec<ParamView<'a>>, prefix: String, owner: BlockId, ln: &'a LayerNormParams) {
    let n = ln.gamma.len();
    out.push(ParamView {
        name: format!("{prefix}.gamma"),
        shape: vec![n],
        owner,
        data: &ln.gamma,
    });
    out.push(ParamView {
        name: format!("{prefix}.beta"),
        shape: vec![n],
        owner,
        data: &ln.beta,
    });
}

fn push_linear<'a>(out: &mut Vec<ParamView<'a>>, prefix: String, owner: BlockId, lin: &'a Linear) {
    out.push(ParamView {
        name: format!("{prefix}.weight"),
        shape: vec![lin.out_features, lin.in_features],
        owner,
        data: &lin.weight,
    });
    if let Some(b) = &lin.bias {
        out.push(ParamView {
            name: format!("{prefix}.bias"),
            shape: vec![lin.out_features],
            owner,
            data: b,
        });
    }
}

fn push_ln_mut<'a>(out: &mut Vec<ParamViewMut<'a>>, prefix: String, owner: BlockId, ln: &'a mut LayerNormParams) {
    let n = ln.gamma.len();
    out.push(ParamViewMut {
        name: format!("{prefix}.gamma"),
        shape: vec![n],
        owner,
        data: &mut ln.gamma,
    });
    out.push(ParamViewMut {
        name: format!("{prefix}.beta"),
        shape: vec![n],
        owner,
        data: &mut ln.beta,
    });
}

fn push_linear_mut<'a>(out: &mut Vec<ParamViewMut<'a>>, prefix: String, owner: BlockId, lin: &'a mut Linear) {
    let shape = vec![lin.out_features, lin.in_features];
    out.push(ParamViewMut {
        name: format!("{prefix}.weight"),
        shape,
        owner,
        data: &mut lin.weight,
    });
    if let Some(b) = &mut lin.bias {
        out.push(ParamViewMut {
            name: format!("{prefix}.bias"),
            shape: vec![lin.out_features],
            owner,
            data: b,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn param_views_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut m = Model::init_random(ModelConfig::toy_draft(), &mut rng).unwrap();
        let names: Vec<String> = m.params().iter().map(|p| p.name.clone()).collect();
        let names_mut: Vec<String> = m.params_mut().iter().map(|p| p.name.clone()).collect();
        assert_eq!(names, names_mut);
        let c = &m.config;
        let per_block = 4 * (c.d_model * c.d_model + c.d_model) + 2 * (c.d_model * c.d_ff) + c.d_ff + c.d_model + 4 * c.d_model;
        assert_eq!(m.block_param_count(BlockId::Transformer(1)), per_block);
        let total = per_block * c.n_blocks + (c.vocab_size + c.max_seq_len) * c.d_model + c.vocab_size * c.d_model + 2 * c.d_model;
        assert_eq!(m.param_count(), total);
    }

    #[test]
    fn token_drop_kept_counts() {
        let td = TokenDrop { after_block: 0, keep_fraction: 0.5 };
        assert_eq!(td.kept(128), 64);
        assert_eq!(td.kept(5), 3);
        assert_eq!(td.kept(1), 1);
        let td = TokenDrop { after_block: 0, keep_fraction: 0.01 };
        assert_eq!(td.kept(10), 1);
    }
}

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockId, Linear, Model, TokenDrop};

/// Remove all but the `keep` MLP hidden channels of block `block` with the
/// largest L2 norm of their concatenated input row and output column.
/// Surviving channels keep their original order; ties favor lower indices.
pub fn prune_mlp_channels(model: &Model, block: usize, keep: usize) -> Result<Model> {
    model.check_block(BlockId::Transformer(block))?;
    let b = &model.blocks[block];
    let ff = b.ff_width();
    if keep == 0 || keep > ff {
        return Err(Error::Invalid(format!("keep {keep} outside 1..={ff} for block {block}")));
    }
    let mut out = model.clone();
    if keep == ff {
        return Ok(out);
    }
    let d = model.config.d_model;
    let norms: Vec<f64> = (0..ff)
        .map(|c| {
            let inp: f64 = b.fc1.row(c).iter().map(|&w| (w as f64).powi(2)).sum();
            let outp: f64 = (0..d).map(|o| (b.fc2.weight[o * ff + c] as f64).powi(2)).sum();
            inp + outp
        })
        .collect();
    let mut order: Vec<usize> = (0..ff).collect();
    order.sort_by(|&a, &c| norms[c].total_cmp(&norms[a]).then(a.cmp(&c)));
    let mut kept: Vec<usize> = order[..keep].to_vec();
    kept.sort_unstable();

    let fc1 = Linear {
        weight: kept.iter().flat_map(|&c| b.fc1.row(c).iter().copied()).collect(),
        bias: b.fc1.bias.as_ref().map(|bias| kept.iter().map(|&c| bias[c]).collect()),
        out_features: keep,
        in_features: d,
    };
    let fc2 = Linear {
        weight: (0..d)
            .flat_map(|o| kept.iter().map(move |&c| (o, c)))
            .map(|(o, c)| b.fc2.weight[o * ff + c])
            .collect(),
        bias: b.fc2.bias.clone(),
        out_features: d,
        in_features: keep,
    };
    out.blocks[block].fc1 = fc1;
    out.blocks[block].fc2 = fc2;
    Ok(out)
}

/// Drop the listed transformer blocks; the rest keep their order.
pub fn remove_blocks(model: &Model, indices: &BTreeSet<usize>) -> Result<Model> {
    if let Some(&i) = indices.iter().find(|&&i| i >= model.blocks.len()) {
        return Err(Error::UnknownBlock(BlockId::Transformer(i)));
    }
    if indices.len() == model.blocks.len() {
        return Err(Error::Invalid("cannot remove every transformer block".into()));
    }
    let mut out = model.clone();
    if indices.is_empty() {
        return Ok(out);
    }
    let token_drop = match model.token_drop {
        Some(td) if indices.contains(&td.after_block) => {
            return Err(Error::Invalid(format!(
                "block {} carries the token-drop boundary and cannot be removed",
                td.after_block
            )))
        }
        Some(td) => Some(TokenDrop {
            after_block: td.after_block - indices.range(..td.after_block).count(),
            ..td
        }),
        None => None,
    };
    out.blocks = model
        .blocks
        .iter()
        .enumerate()
        .filter(|(i, _)| !indices.contains(i))
        .map(|(_, b)| b.clone())
        .collect();
    out.config.n_blocks = out.blocks.len();
    out.token_drop = token_drop;
    Ok(out)
}

/// Keep only `ceil(keep_fraction * t)` positions after block `after_block`,
/// ranked by attention received. `keep_fraction = 1` is no drop at all.
pub fn token_drop(model: &Model, keep_fraction: f64, after_block: usize) -> Result<Model> {
    let mut out = model.clone();
    let td = TokenDrop {
        after_block,
        keep_fraction,
    };
    // validates both fields
    out.set_token_drop(Some(td))?;
    if keep_fraction == 1.0 {
        out.token_drop = model.token_drop;
    }
    Ok(out)
}

/// Structural compression recipe. Block indices refer to the model the plan
/// is applied to, before any removal.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuralPlan {
    #[serde(default)]
    pub blocks_removed: BTreeSet<usize>,
    /// Hidden MLP channels kept per block.
    #[serde(default)]
    pub mlp_channels_kept: BTreeMap<usize, usize>,
    #[serde(default)]
    pub token_drop: Option<TokenDrop>,
}

impl StructuralPlan {
    pub fn is_empty(&self) -> bool {
        self.blocks_removed.is_empty() && self.mlp_channels_kept.is_empty() && self.token_drop.is_none()
    }

    /// Prune channels, remove blocks, then install token drop.
    pub fn apply(&self, model: &Model) -> Result<Model> {
        let mut m = model.clone();
        for (&block, &keep) in &self.mlp_channels_kept {
            m = prune_mlp_channels(&m, block, keep)?;
        }
        let boundary = self.token_drop.map(|td| td.after_block);
        if let Some(b) = boundary {
            model.check_block(BlockId::Transformer(b))?;
            if self.blocks_removed.contains(&b) {
                return Err(Error::Invalid(format!("token_drop.after_block {b} is also removed")));
            }
        }
        m = remove_blocks(&m, &self.blocks_removed)?;
        if let Some(td) = self.token_drop {
            let shifted = td.after_block - self.blocks_removed.range(..td.after_block).count();
            m = token_drop(&m, td.keep_fraction, shifted)?;
        }
        Ok(m)
    }
}

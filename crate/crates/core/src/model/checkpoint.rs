//! Checkpoint file: 8-byte little-endian header length, JSON header, then
//! little-endian `f32` blobs at the offsets the header lists.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::ModelConfig;
use super::weights::{Model, TokenDrop};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    structure: Structure,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Structure {
    /// MLP hidden width per block, when pruned below `d_ff`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ff_widths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_drop: Option<TokenDrop>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    dtype: String,
}

const DTYPE: &str = "f32";

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let ff: Vec<usize> = model.blocks.iter().map(|b| b.ff_width()).collect();
    let structure = Structure {
        ff_widths: ff.iter().any(|&f| f != model.config.d_ff).then_some(ff),
        token_drop: model.token_drop,
    };
    let mut offset = 0;
    let params = model.params();
    let tensors = params
        .iter()
        .map(|p| {
            let e = TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                offset,
                dtype: DTYPE.into(),
            };
            offset += p.data.len() * 4;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        structure,
        tensors,
    })?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(offset);
    for p in &params {
        buf.extend(p.data.iter().flat_map(|v| v.to_le_bytes()));
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Model> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Header("file shorter than the 8-byte length prefix".into()))?;
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| Error::Header("header length does not fit in memory".into()))?;
    let header_bytes = bytes
        .get(8..8usize.saturating_add(header_len))
        .ok_or_else(|| Error::Header(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| Error::Header(e.to_string()))?;
    let payload = &bytes[8 + header_len..];

    let mut model = Model::zeros(header.config.clone())?;
    if let Some(ff) = &header.structure.ff_widths {
        if ff.len() != model.blocks.len() {
            return Err(Error::Header(format!(
                "ff_widths lists {} blocks, config has {}",
                ff.len(),
                model.blocks.len()
            )));
        }
        for (b, &w) in model.blocks.iter_mut().zip(ff) {
            if w == 0 || w > header.config.d_ff {
                return Err(Error::Header(format!("ff width {w} outside 1..={}", header.config.d_ff)));
            }
            *b = super::weights::Block::zeros(header.config.d_model, w);
        }
    }
    if let Some(td) = header.structure.token_drop {
        model.set_token_drop(Some(td))?;
    }

    let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(header.tensors.len());
    let mut by_name: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    for e in &header.tensors {
        if e.dtype != DTYPE {
            return Err(Error::Header(format!("tensor `{}` has dtype {}, expected {DTYPE}", e.name, e.dtype)));
        }
        if by_name.insert(&e.name, e).is_some() {
            return Err(Error::UnexpectedTensor(e.name.clone()));
        }
        let bytes_len = e.shape.iter().product::<usize>() * 4;
        let end = e.offset.checked_add(bytes_len).ok_or_else(|| Error::Header("offset overflow".into()))?;
        if end > payload.len() {
            return Err(Error::Truncated {
                tensor: e.name.clone(),
                start: e.offset,
                end,
                len: payload.len(),
            });
        }
        spans.push((e.offset, end, &e.name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Overlap {
                a: w[0].2.to_string(),
                b: w[1].2.to_string(),
            });
        }
    }

    let mut seen = BTreeSet::new();
    for p in model.params_mut() {
        let e = by_name.get(p.name.as_str()).ok_or_else(|| Error::MissingTensor(p.name.clone()))?;
        if e.shape != p.shape {
            return Err(Error::Shape(format!(
                "tensor `{}` has shape {:?}, architecture expects {:?}",
                p.name, e.shape, p.shape
            )));
        }
        let raw = &payload[e.offset..e.offset + p.data.len() * 4];
        for (dst, chunk) in p.data.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
        seen.insert(p.name);
    }
    if let Some(extra) = by_name.keys().find(|n| !seen.contains(**n)) {
        return Err(Error::UnexpectedTensor(extra.to_string()));
    }
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint(&std::fs::read(path)?)
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

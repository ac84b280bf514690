//! Binary checkpoint format.
//!
//! ```text
//! offset 0   magic     b"IRCN"
//!        4   version   u32 little-endian (currently 1)
//!        8   hdr_len   u64 little-endian
//!       16   header    UTF-8 JSON, hdr_len bytes
//!            padding   zeros up to the next multiple of 64
//!            payload   tensors, little-endian, each starting at a
//!                      64-byte aligned offset relative to the payload start
//! ```
//!
//! The header holds the model config, the tokenizer table, the tensor
//! manifest (`name`, `dtype`, `shape`, `offset`) and, for edited models,
//! the edit state needed to revert.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::editing::EditState;
use crate::error::{CoreError, Result};
use crate::model::config::ModelConfig;
use crate::model::tokenizer::{Tokenizer, TokenizerTable};
use crate::model::transformer::TransformerModel;

pub const MAGIC: &[u8; 4] = b"IRCN";
pub const VERSION: u32 = 1;
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tokenizer: TokenizerTable,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit: Option<EditState>,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn fmt_err(tensor: &str, msg: impl Into<String>) -> CoreError {
    CoreError::Format {
        tensor: tensor.to_string(),
        msg: msg.into(),
    }
}

/// Serialises a model to bytes. Tensors are written in name order.
pub fn to_bytes(model: &TransformerModel, dtype: DType) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in model.weights() {
        let offset = align(payload.len());
        payload.resize(offset, 0);
        match dtype {
            DType::F64 => t
                .data()
                .iter()
                .for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => t
                .data()
                .iter()
                .for_each(|v| payload.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
        entries.push(TensorEntry {
            name: name.clone(),
            dtype,
            shape: t.shape().to_vec(),
            offset: offset as u64,
        });
    }
    let header = CheckpointHeader {
        config: model.config().clone(),
        tokenizer: model.tokenizer().table().clone(),
        tensors: entries,
        edit: model.edit_state().cloned(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + ALIGN + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(align(out.len()), 0);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<TransformerModel> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(fmt_err("<header>", "bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fmt_err(
            "<header>",
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let hdr_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let hdr_end = 16usize
        .checked_add(hdr_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fmt_err("<header>", "header extends past end of file"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..hdr_end])
        .map_err(|e| fmt_err("<header>", format!("invalid JSON: {e}")))?;
    let payload_start = align(hdr_end);
    let payload = bytes.get(payload_start..).unwrap_or(&[]);

    let mut entries = header.tensors.clone();
    entries.sort_by_key(|e| e.offset);
    let mut weights = BTreeMap::new();
    let mut prev_end = 0usize;
    for e in &entries {
        let offset = e.offset as usize;
        if !offset.is_multiple_of(ALIGN) {
            return Err(fmt_err(&e.name, format!("offset {offset} is not 64-byte aligned")));
        }
        if offset < prev_end {
            return Err(fmt_err(&e.name, "overlaps the previous tensor"));
        }
        let n: usize = e.shape.iter().product();
        let end = offset + n * e.dtype.size();
        if end > payload.len() {
            return Err(fmt_err(
                &e.name,
                format!(
                    "truncated payload: needs bytes {offset}..{end}, payload has {}",
                    payload.len()
                ),
            ));
        }
        let raw = &payload[offset..end];
        let data: Vec<f64> = match e.dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| fmt_err(&e.name, err.to_string()))?;
        if weights.insert(e.name.clone(), t).is_some() {
            return Err(fmt_err(&e.name, "listed twice in the manifest"));
        }
        prev_end = end;
    }
    let tokenizer = Tokenizer::from_table(header.tokenizer)?;
    let mut model = TransformerModel::from_weights(header.config, tokenizer, weights)?;
    model.edit = header.edit;
    Ok(model)
}

pub fn save(model: &TransformerModel, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
    fs::write(path, to_bytes(model, dtype)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TransformerModel> {
    from_bytes(&fs::read(path)?)
}

/// Parses only the header, for inspection tools.
pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(fmt_err("<header>", "bad magic bytes"));
    }
    let hdr_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + hdr_len)
        .ok_or_else(|| fmt_err("<header>", "header extends past end of file"))?;
    serde_json::from_slice(json).map_err(|e| fmt_err("<header>", format!("invalid JSON: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{FfnKind, PositionKind};

    fn model(ffn: FfnKind, pos: PositionKind) -> TransformerModel {
        let tok = Tokenizer::from_texts(["x y z is."], false);
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 6,
            vocab_size: tok.vocab_size(),
            ffn_kind: ffn,
            position_kind: pos,
            max_seq_len: 8,
            norm_eps: 1e-5,
            rope_base: 10_000.0,
        };
        TransformerModel::random(cfg, tok, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for (f, p) in [
            (FfnKind::Plain, PositionKind::Learned),
            (FfnKind::Gated, PositionKind::Rotary),
        ] {
            let m = model(f, p);
            let bytes = to_bytes(&m, DType::F64).unwrap();
            let back = from_bytes(&bytes).unwrap();
            for (name, t) in m.weights() {
                let u = &back.weights()[name];
                assert!(t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
            let toks = m.encode("x y is").unwrap();
            let a = m.logits(&toks).unwrap();
            let b = back.logits(&toks).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(to_bytes(&back, DType::F64).unwrap(), bytes);
        }
    }

    #[test]
    fn f32_round_trip_is_stable() {
        let m = model(FfnKind::Plain, PositionKind::Learned);
        let once = from_bytes(&to_bytes(&m, DType::F32).unwrap()).unwrap();
        let bytes = to_bytes(&once, DType::F32).unwrap();
        assert_eq!(to_bytes(&from_bytes(&bytes).unwrap(), DType::F32).unwrap(), bytes);
    }

    #[test]
    fn payload_is_aligned() {
        let m = model(FfnKind::Gated, PositionKind::Learned);
        let bytes = to_bytes(&m, DType::F32).unwrap();
        let h = read_header(&bytes).unwrap();
        assert!(h.tensors.iter().all(|e| e.offset % 64 == 0));
    }

    #[test]
    fn truncated_payload_names_first_unreadable_tensor() {
        let m = model(FfnKind::Plain, PositionKind::Learned);
        let bytes = to_bytes(&m, DType::F64).unwrap();
        let h = read_header(&bytes).unwrap();
        let mut by_offset = h.tensors.clone();
        by_offset.sort_by_key(|e| e.offset);
        let victim = &by_offset[3];
        let hdr_end = 16 + serde_json::to_vec(&h).unwrap().len();
        let cut = align(hdr_end) + victim.offset as usize + 8;
        let err = from_bytes(&bytes[..cut]).unwrap_err();
        match err {
            CoreError::Format { tensor, msg } => {
                assert_eq!(tensor, victim.name);
                assert!(msg.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let m = model(FfnKind::Plain, PositionKind::Learned);
        let mut bytes = to_bytes(&m, DType::F64).unwrap();
        bytes[4] = 9;
        assert!(matches!(from_bytes(&bytes), Err(CoreError::Format { .. })));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(CoreError::Format { .. })));
    }

    #[test]
    fn missing_tensor_and_shape_mismatch() {
        let m = model(FfnKind::Plain, PositionKind::Learned);
        let bytes = to_bytes(&m, DType::F64).unwrap();
        let mut h = read_header(&bytes).unwrap();
        let hdr_end = 16 + serde_json::to_vec(&h).unwrap().len();
        let payload = bytes[align(hdr_end)..].to_vec();
        let rebuild = |h: &CheckpointHeader| {
            let json = serde_json::to_vec(h).unwrap();
            let mut out = MAGIC.to_vec();
            out.extend_from_slice(&VERSION.to_le_bytes());
            out.extend_from_slice(&(json.len() as u64).to_le_bytes());
            out.extend_from_slice(&json);
            out.resize(align(out.len()), 0);
            out.extend_from_slice(&payload);
            out
        };
        let removed = h.tensors.remove(0);
        let err = from_bytes(&rebuild(&h)).unwrap_err();
        assert!(matches!(err, CoreError::Format { ref tensor, .. } if *tensor == removed.name));

        let mut h = read_header(&bytes).unwrap();
        let e = h.tensors.iter_mut().find(|e| e.name == "layers.0.ffn.w_in").unwrap();
        e.shape.reverse();
        let err = from_bytes(&rebuild(&h)).unwrap_err();
        assert!(matches!(err, CoreError::Format { ref tensor, .. } if tensor == "layers.0.ffn.w_in"));
    }
}

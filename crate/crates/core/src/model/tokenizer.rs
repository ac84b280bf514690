//! Lookup-table tokenizer with greedy longest-match segmentation.
//!
//! Text is segmented after prepending a single space, so a word reads the
//! same (`" paris"`) whether it opens a sentence or follows another word.
//! [`Tokenizer::detokenize`] drops that leading space again, which makes
//! `detokenize(tokenize(t)) == t` for any text the table can cover.
//!
//! When `byte_fallback` is on, bytes with no table entry become `<0xNN>`
//! tokens instead of failing.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const EOS: &str = "<eos>";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TokenizerTable {
    pub tokens: Vec<String>,
    pub eos: String,
    #[serde(default)]
    pub byte_fallback: bool,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    table: TokenizerTable,
    index: HashMap<String, u32>,
    byte_ids: Option<[u32; 256]>,
    eos_id: u32,
    max_len: usize,
}

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

fn is_special(tok: &str) -> bool {
    tok.starts_with('<') && tok.ends_with('>') && tok.len() > 2
}

/// Splits text into the units a vocabulary is built from: an optional single
/// leading space plus an alphanumeric run, or any other single character.
fn units(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = i;
        if chars[i] == ' ' && i + 1 < chars.len() && chars[i + 1].is_alphanumeric() {
            i += 1;
        }
        if chars[i].is_alphanumeric() {
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
        } else {
            i += 1;
        }
        out.push(chars[start..i].iter().collect());
    }
    out
}

impl Tokenizer {
    pub fn from_table(table: TokenizerTable) -> Result<Self> {
        let mut index = HashMap::with_capacity(table.tokens.len());
        for (i, t) in table.tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(CoreError::Tokenize(format!("empty token at id {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(CoreError::Tokenize(format!("duplicate token {t:?}")));
            }
        }
        let eos_id = *index
            .get(&table.eos)
            .ok_or_else(|| CoreError::Tokenize(format!("eos token {:?} missing", table.eos)))?;
        let byte_ids = if table.byte_fallback {
            let mut ids = [0u32; 256];
            for b in 0..=255u8 {
                ids[b as usize] = *index.get(&byte_token(b)).ok_or_else(|| {
                    CoreError::Tokenize(format!("byte fallback token {} missing", byte_token(b)))
                })?;
            }
            Some(ids)
        } else {
            None
        };
        let max_len = table
            .tokens
            .iter()
            .filter(|t| !is_special(t))
            .map(|t| t.len())
            .max()
            .unwrap_or(1);
        Ok(Self {
            table,
            index,
            byte_ids,
            eos_id,
            max_len,
        })
    }

    /// Builds a closed vocabulary covering every unit that occurs in `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, byte_fallback: bool) -> Self {
        let mut set = BTreeSet::new();
        for text in texts {
            for line in text.lines() {
                if line.is_empty() {
                    continue;
                }
                // a line opens either the text (space-padded) or follows a newline
                set.extend(units(&format!(" {line}")));
                set.extend(units(line));
            }
        }
        set.insert(" ".to_string());
        set.insert("\n".to_string());
        let mut tokens = vec![EOS.to_string()];
        if byte_fallback {
            tokens.extend((0..=255u8).map(byte_token));
        }
        tokens.extend(set);
        Self::from_table(TokenizerTable {
            tokens,
            eos: EOS.into(),
            byte_fallback,
        })
        .expect("generated table is well formed")
    }

    pub fn table(&self) -> &TokenizerTable {
        &self.table
    }

    pub fn vocab_size(&self) -> usize {
        self.table.tokens.len()
    }

    pub fn eos_id(&self) -> u32 {
        self.eos_id
    }

    pub fn token_str(&self, id: u32) -> Option<&str> {
        self.table.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        if text.is_empty() {
            return Ok(Vec::new());
        }
        let padded = format!(" {text}");
        let mut ids = Vec::new();
        let mut pos = 0;
        while pos < padded.len() {
            let rest = &padded[pos..];
            let mut matched = None;
            let mut end = rest.len().min(self.max_len);
            while end > 0 {
                if rest.is_char_boundary(end) {
                    let piece = &rest[..end];
                    if !is_special(piece) {
                        if let Some(&id) = self.index.get(piece) {
                            matched = Some((id, end));
                            break;
                        }
                    }
                }
                end -= 1;
            }
            match (matched, &self.byte_ids) {
                (Some((id, len)), _) => {
                    ids.push(id);
                    pos += len;
                }
                (None, Some(bytes)) => {
                    let ch = rest.chars().next().expect("non-empty remainder");
                    let mut buf = [0u8; 4];
                    for b in ch.encode_utf8(&mut buf).bytes() {
                        ids.push(bytes[b as usize]);
                    }
                    pos += ch.len_utf8();
                }
                (None, None) => {
                    let unit: String = rest.chars().take_while(|c| !c.is_whitespace()).collect();
                    let unit = if unit.is_empty() {
                        rest.chars().next().map(String::from).unwrap_or_default()
                    } else {
                        unit
                    };
                    return Err(CoreError::Tokenize(format!(
                        "{unit:?} is not in the vocabulary and byte fallback is off"
                    )));
                }
            }
        }
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self
                .token_str(id)
                .ok_or_else(|| CoreError::Tokenize(format!("unknown token id {id}")))?;
            if let Some(hex) = tok.strip_prefix("<0x").and_then(|s| s.strip_suffix('>')) {
                if let Ok(b) = u8::from_str_radix(hex, 16) {
                    bytes.push(b);
                    continue;
                }
            }
            if id == self.eos_id {
                continue;
            }
            bytes.extend_from_slice(tok.as_bytes());
        }
        let text = String::from_utf8(bytes)
            .map_err(|e| CoreError::Tokenize(format!("invalid UTF-8 from byte tokens: {e}")))?;
        Ok(text.strip_prefix(' ').map(str::to_string).unwrap_or(text))
    }

    /// Decodes a continuation without stripping its leading space.
    pub fn decode_raw(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != self.eos_id)
            .filter_map(|&id| self.token_str(id))
            .collect()
    }
}

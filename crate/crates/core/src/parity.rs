//! Reference-logit files and parity checks against them.
//!
//! A reference file is a JSON object mapping each prompt to the full
//! final-position logit vector produced by another implementation:
//!
//! ```json
//! {"tova kel is": [0.12, -1.5, ...], "sapo": [...]}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::TransformerModel;

pub type ReferenceLogits = BTreeMap<String, Vec<f64>>;

pub fn load_reference_logits(path: impl AsRef<Path>) -> Result<ReferenceLogits> {
    let p = path.as_ref();
    let text = fs::read_to_string(p)?;
    serde_json::from_str(&text).map_err(|e| CoreError::Parse {
        path: p.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Logits of `model` for each prompt, in the reference-file shape.
pub fn reference_logits<'a>(
    model: &TransformerModel,
    prompts: impl IntoIterator<Item = &'a str>,
) -> Result<ReferenceLogits> {
    let mut out = ReferenceLogits::new();
    for p in prompts {
        let toks = model
            .encode(p)
            .map_err(|e| CoreError::Input(format!("prompt {p:?}: {e}")))?;
        out.insert(p.to_string(), model.logits(&toks)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptParity {
    pub prompt: String,
    pub max_abs_diff: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityReport {
    pub tolerance: f64,
    pub prompts: Vec<PromptParity>,
}

impl ParityReport {
    pub fn passed(&self) -> bool {
        self.prompts.iter().all(|p| p.pass)
    }

    pub fn max_abs_diff(&self) -> f64 {
        self.prompts.iter().map(|p| p.max_abs_diff).fold(0.0, f64::max)
    }
}

/// Compares the model's logits with every reference entry.
pub fn check_parity(model: &TransformerModel, reference: &ReferenceLogits, tolerance: f64) -> Result<ParityReport> {
    let vocab = model.config().vocab_size;
    let mut prompts = Vec::with_capacity(reference.len());
    for (prompt, expected) in reference {
        if expected.len() != vocab {
            return Err(CoreError::Input(format!(
                "reference for {prompt:?} has {} logits, model vocabulary is {vocab}",
                expected.len()
            )));
        }
        let toks = model
            .encode(prompt)
            .map_err(|e| CoreError::Input(format!("prompt {prompt:?}: {e}")))?;
        let got = model.logits(&toks)?;
        let max_abs_diff = got
            .iter()
            .zip(expected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        prompts.push(PromptParity {
            prompt: prompt.clone(),
            max_abs_diff,
            pass: max_abs_diff <= tolerance,
        });
    }
    Ok(ParityReport { tolerance, prompts })
}

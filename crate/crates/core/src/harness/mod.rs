//! Evaluation: prompt templates, greedy decoding, completion and
//! multiple-choice scoring, and context-aware decoding.

mod search;

pub use search::{
    ablation_suite, grid_search, split_dataset, AblationReport, GridCell, GridConfig, GridResult,
};

use numcore::{NumError, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{choice_label, label_index, ConflictExample, Task};
use crate::error::{CoreError, Result};
use crate::model::TransformerModel;

/// Prompt text with `{context}`, `{question}` and `{choices}` placeholders.
///
/// Rendering collapses runs of spaces and trims every line, and a line that
/// held only `{context}` disappears when the context is left out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if !text.contains("{question}") {
            return Err(CoreError::Parameter("template has no {question} placeholder".into()));
        }
        Ok(Self { text })
    }

    pub fn completion_default() -> Self {
        Self {
            text: "{context} {question}".into(),
        }
    }

    pub fn multiple_choice_default() -> Self {
        Self {
            text: "{context} {question}\n{choices}\nAnswer:".into(),
        }
    }

    pub fn render(&self, ex: &ConflictExample, with_context: bool) -> String {
        let choices = ex
            .choices()
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {c}", choice_label(i)))
            .collect::<Vec<_>>()
            .join(" ");
        let context = if with_context { ex.context.as_str() } else { "" };
        let mut lines = Vec::new();
        for line in self.text.lines() {
            let had_context = line.contains("{context}");
            let filled = line
                .replace("{context}", context)
                .replace("{question}", &ex.question)
                .replace("{choices}", &choices);
            let norm = filled.split(' ').filter(|w| !w.is_empty()).collect::<Vec<_>>().join(" ");
            if norm.is_empty() && had_context && context.is_empty() {
                continue;
            }
            lines.push(norm);
        }
        lines.join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Decoding {
    Greedy,
    /// Context-aware decoding with coefficient `alpha`.
    Cad { alpha: f64 },
}

/// `(1 + alpha) * with_context - alpha * without_context`, evaluated as
/// `c + alpha * (c - q)` so equal inputs and `alpha = 0` return `c` exactly.
pub fn cad_adjust(with_context: &[f64], without_context: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if with_context.len() != without_context.len() {
        return Err(CoreError::Num(NumError::Dimension(format!(
            "cad_adjust: {} vs {} logits",
            with_context.len(),
            without_context.len()
        ))));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(CoreError::Parameter(format!("alpha_cad must be >= 0, got {alpha}")));
    }
    Ok(with_context
        .iter()
        .zip(without_context)
        .map(|(&c, &q)| c + alpha * (c - q))
        .collect())
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_room(model: &TransformerModel, len: usize) -> Result<()> {
    if len > model.config().max_seq_len {
        Err(CoreError::Input(format!(
            "generation needs {len} positions, max_seq_len is {}",
            model.config().max_seq_len
        )))
    } else {
        Ok(())
    }
}

pub fn greedy_generate(model: &TransformerModel, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    generate(model, prompt, None, max_new, Decoding::Greedy)
}

/// Argmax decoding; with CAD, `prompt_q` is the context-free prompt.
pub fn generate(
    model: &TransformerModel,
    prompt: &[u32],
    prompt_q: Option<&[u32]>,
    max_new: usize,
    decoding: Decoding,
) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Err(CoreError::Parameter("max_new must be at least 1".into()));
    }
    let eos = model.tokenizer().eos_id();
    let mut out = Vec::new();
    let mut seq = prompt.to_vec();
    let mut seq_q = prompt_q.map(<[u32]>::to_vec);
    for _ in 0..max_new {
        check_room(model, seq.len())?;
        let logits = model.logits(&seq)?;
        let logits = match (decoding, &seq_q) {
            (Decoding::Greedy, _) => logits,
            (Decoding::Cad { alpha }, Some(q)) => {
                check_room(model, q.len())?;
                cad_adjust(&logits, &model.logits(q)?, alpha)?
            }
            (Decoding::Cad { .. }, None) => {
                return Err(CoreError::Parameter("CAD needs a context-free prompt".into()))
            }
        };
        let next = argmax(&logits) as u32;
        if next == eos {
            break;
        }
        out.push(next);
        seq.push(next);
        if let Some(q) = seq_q.as_mut() {
            q.push(next);
        }
    }
    Ok(out)
}

/// First alphabetic word, lowercased.
pub fn extract_completion_answer(text: &str) -> Option<String> {
    let start = text.find(|c: char| c.is_alphabetic())?;
    let word: String = text[start..].chars().take_while(|c| c.is_alphabetic()).collect();
    Some(word.to_lowercase())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    /// Extracted word or chosen label; `None` is an extraction miss.
    pub prediction: Option<String>,
    pub matched_gold: bool,
    pub matched_original: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub n_correct: usize,
    pub n_stubborn: usize,
    pub acc: f64,
    pub sr: f64,
    pub records: Vec<ExampleRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<ExampleRecord>) -> Self {
        let n = records.len();
        let n_correct = records.iter().filter(|r| r.matched_gold).count();
        let n_stubborn = records.iter().filter(|r| r.matched_original).count();
        let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        Self {
            n,
            n_correct,
            n_stubborn,
            acc: frac(n_correct),
            sr: frac(n_stubborn),
            records,
        }
    }

    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            n: self.n,
            acc: self.acc,
            sr: self.sr,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,prediction,matched_gold,matched_original\n");
        for r in &self.records {
            let p = r.prediction.as_deref().unwrap_or("");
            s.push_str(&format!("{},{},{},{}\n", r.id, p, r.matched_gold, r.matched_original));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub acc: f64,
    pub sr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub decoding: Decoding,
    /// Tokens generated per completion item.
    pub max_new: usize,
    /// Divide option log-probabilities by their token counts.
    pub length_normalized: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decoding: Decoding::Greedy,
            max_new: 3,
            length_normalized: false,
        }
    }
}

fn same_word(a: &str, b: &str) -> bool {
    extract_completion_answer(b).is_some_and(|b| a == b)
}

fn completion_record(
    model: &TransformerModel,
    ex: &ConflictExample,
    template: &PromptTemplate,
    cfg: &EvalConfig,
) -> Result<ExampleRecord> {
    let prompt = model.encode(&template.render(ex, true))?;
    let prompt_q = match cfg.decoding {
        Decoding::Cad { .. } => Some(model.encode(&template.render(ex, false))?),
        Decoding::Greedy => None,
    };
    let ids = generate(model, &prompt, prompt_q.as_deref(), cfg.max_new, cfg.decoding)?;
    let text = model.tokenizer().decode_raw(&ids);
    let prediction = extract_completion_answer(&text);
    let (matched_gold, matched_original) = match &prediction {
        Some(p) => (same_word(p, &ex.gold_answer), same_word(p, &ex.original_gold)),
        None => (false, false),
    };
    Ok(ExampleRecord {
        id: ex.id.clone(),
        prediction,
        matched_gold,
        matched_original,
    })
}

pub fn score_completion(
    model: &TransformerModel,
    dataset: &[ConflictExample],
    template: &PromptTemplate,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if let Some(ex) = dataset.iter().find(|e| e.task != Task::Completion) {
        return Err(CoreError::Input(format!("example {} is not a completion item", ex.id)));
    }
    let records = dataset
        .par_iter()
        .map(|ex| completion_record(model, ex, template, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_records(records))
}

/// Teacher-forced log-probability of `answer`, optionally under CAD.
pub fn option_logprob(
    model: &TransformerModel,
    prompt: &[u32],
    prompt_q: &[u32],
    answer: &[u32],
    decoding: Decoding,
) -> Result<f64> {
    match decoding {
        Decoding::Greedy => model.answer_logprob(prompt, answer, &Default::default()),
        Decoding::Cad { alpha } => {
            let mut total = 0.0;
            let (mut a, mut b) = (prompt.to_vec(), prompt_q.to_vec());
            for &tok in answer {
                check_room(model, a.len().max(b.len()))?;
                let adj = cad_adjust(&model.logits(&a)?, &model.logits(&b)?, alpha)?;
                let lp = Tensor::vector(adj)?.softmax()?.data()[tok as usize].ln();
                total += lp;
                a.push(tok);
                b.push(tok);
            }
            Ok(total)
        }
    }
}

fn choice_record(
    model: &TransformerModel,
    ex: &ConflictExample,
    template: &PromptTemplate,
    cfg: &EvalConfig,
) -> Result<ExampleRecord> {
    let prompt = model.encode(&template.render(ex, true))?;
    let prompt_q = match cfg.decoding {
        Decoding::Cad { .. } => model.encode(&template.render(ex, false))?,
        Decoding::Greedy => Vec::new(),
    };
    let mut scores = Vec::with_capacity(ex.choices().len());
    for (i, choice) in ex.choices().iter().enumerate() {
        let toks = model.encode(choice).map_err(|e| {
            CoreError::Input(format!("example {} choice {}: {e}", ex.id, choice_label(i)))
        })?;
        if toks.is_empty() {
            return Err(CoreError::Input(format!(
                "example {} choice {} is empty",
                ex.id,
                choice_label(i)
            )));
        }
        let lp = option_logprob(model, &prompt, &prompt_q, &toks, cfg.decoding)?;
        scores.push(if cfg.length_normalized { lp / toks.len() as f64 } else { lp });
    }
    let pick = argmax(&scores);
    Ok(ExampleRecord {
        id: ex.id.clone(),
        prediction: Some(choice_label(pick)),
        matched_gold: label_index(&ex.gold_answer) == Some(pick),
        matched_original: label_index(&ex.original_gold) == Some(pick),
    })
}

pub fn score_multiple_choice(
    model: &TransformerModel,
    dataset: &[ConflictExample],
    template: &PromptTemplate,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if let Some(ex) = dataset.iter().find(|e| e.task != Task::MultipleChoice) {
        return Err(CoreError::Input(format!("example {} is not a multiple-choice item", ex.id)));
    }
    let records = dataset
        .par_iter()
        .map(|ex| choice_record(model, ex, template, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_records(records))
}

/// Scores a dataset with the scorer matching its task.
pub fn evaluate(
    model: &TransformerModel,
    dataset: &[ConflictExample],
    template: &PromptTemplate,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    match dataset.first().map(|e| e.task) {
        Some(Task::MultipleChoice) => score_multiple_choice(model, dataset, template, cfg),
        _ => score_completion(model, dataset, template, cfg),
    }
}

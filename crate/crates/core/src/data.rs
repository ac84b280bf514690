//! Conflict datasets: the JSONL schema and the synthetic generator.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Completion,
    MultipleChoice,
}

/// One knowledge-conflict item. For multiple choice, `gold_answer` and
/// `original_gold` are option labels (`"A"`, `"B"`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictExample {
    pub id: String,
    pub task: Task,
    pub context: String,
    pub question: String,
    pub gold_answer: String,
    pub original_gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
}

pub fn choice_label(i: usize) -> String {
    char::from(b'A' + i as u8).to_string()
}

/// Index of an option label; labels are case-insensitive letters.
pub fn label_index(label: &str) -> Option<usize> {
    let mut chars = label.trim().chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => {
            Some((c.to_ascii_uppercase() as u8 - b'A') as usize)
        }
        _ => None,
    }
}

impl ConflictExample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("id is empty".into());
        }
        if self.gold_answer.trim().is_empty() {
            return Err("gold_answer is empty".into());
        }
        match self.task {
            Task::MultipleChoice => {
                let choices = self
                    .choices
                    .as_ref()
                    .filter(|c| !c.is_empty())
                    .ok_or("multiple_choice record needs non-empty choices")?;
                if choices.len() > 26 {
                    return Err("at most 26 choices are supported".into());
                }
                for (field, label) in [("gold_answer", &self.gold_answer), ("original_gold", &self.original_gold)] {
                    match label_index(label) {
                        Some(i) if i < choices.len() => {}
                        _ => return Err(format!("{field} {label:?} is not a label of the {} choices", choices.len())),
                    }
                }
                if label_index(&self.gold_answer) == label_index(&self.original_gold) {
                    return Err("gold_answer equals original_gold".into());
                }
            }
            Task::Completion => {
                if self.gold_answer.trim().eq_ignore_ascii_case(self.original_gold.trim()) {
                    return Err("gold_answer equals original_gold".into());
                }
            }
        }
        Ok(())
    }

    pub fn choices(&self) -> &[String] {
        self.choices.as_deref().unwrap_or(&[])
    }
}

pub fn parse_dataset(text: &str, path: &str) -> Result<Vec<ConflictExample>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| CoreError::Parse {
            path: path.to_string(),
            line: i + 1,
            msg,
        };
        let ex: ConflictExample = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        ex.validate().map_err(err)?;
        if !ids.insert(ex.id.clone()) {
            return Err(err(format!("duplicate id {:?}", ex.id)));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<ConflictExample>> {
    let p = path.as_ref();
    let text = fs::read_to_string(p)?;
    parse_dataset(&text, &p.display().to_string())
}

pub fn to_jsonl(examples: &[ConflictExample]) -> Result<String> {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(ex)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn save_dataset(path: impl AsRef<Path>, examples: &[ConflictExample]) -> Result<()> {
    fs::write(path, to_jsonl(examples)?)?;
    Ok(())
}

/// Parameters of the synthetic benchmark.
///
/// `vocab` supplies every content word: the first `n_entities` become known
/// entities, the next `n_novel` become entities that only occur in reading
/// lines, then `n_relations` relation words, and the rest are values.
///
/// A reading line states a fact about a novel entity and repeats it
/// (`"F R is V. F R is V."`), which teaches the model to answer from the
/// preceding sentence. A stubborn line contradicts a known fact and then
/// restates the memorised value (`"E R is W. E R is V."`), which teaches the
/// model to distrust context about entities it already knows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_entities: usize,
    pub n_relations: usize,
    pub vocab: Vec<String>,
    pub n_conflicts: usize,
    pub seed: u64,
    #[serde(default)]
    pub n_novel: usize,
    #[serde(default)]
    pub n_reading: usize,
    #[serde(default)]
    pub n_stubborn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub entity: String,
    pub relation: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub facts: Vec<Fact>,
    /// Training lines: one per fact, then the reading lines.
    pub corpus: Vec<String>,
    pub completion: Vec<ConflictExample>,
    pub multiple_choice: Vec<ConflictExample>,
}

impl SyntheticData {
    pub fn corpus_text(&self) -> String {
        let mut s = self.corpus.join("\n");
        s.push('\n');
        s
    }
}

/// Deterministic pronounceable words of two or three syllables.
pub fn pseudo_words(n: usize) -> Vec<String> {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let syll: Vec<String> = C
        .iter()
        .flat_map(|&c| V.iter().map(move |&v| format!("{}{}", c as char, v as char)))
        .collect();
    let s = syll.len();
    let mut out = Vec::with_capacity(n);
    let mut i = 0usize;
    while out.len() < n {
        // stride through syllable pairs so consecutive words look unrelated
        let k = i.wrapping_mul(2_654_435_761) % (s * s * s);
        let w = if i < s * s {
            format!("{}{}", syll[(i * 37) % s], syll[(i * 37 / s + i) % s])
        } else {
            format!("{}{}{}", syll[k % s], syll[(k / s) % s], syll[k / (s * s)])
        };
        if !out.contains(&w) {
            out.push(w);
        }
        i += 1;
    }
    out
}

fn fact_line(e: &str, r: &str, v: &str) -> String {
    format!("{e} {r} is {v}.")
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.n_entities == 0 || spec.n_relations == 0 {
        return Err(CoreError::Spec("n_entities and n_relations must be at least 1".into()));
    }
    let mut seen = BTreeSet::new();
    for w in &spec.vocab {
        if w.is_empty() || !w.chars().all(|c| c.is_ascii_lowercase()) {
            return Err(CoreError::Spec(format!("vocabulary word {w:?} is not a lowercase ASCII word")));
        }
        if w == "is" {
            return Err(CoreError::Spec("\"is\" is reserved".into()));
        }
        if !seen.insert(w.as_str()) {
            return Err(CoreError::Spec(format!("vocabulary word {w:?} repeats")));
        }
    }
    let fixed = spec.n_entities + spec.n_novel + spec.n_relations;
    if spec.vocab.len() < fixed + 2 {
        return Err(CoreError::Spec(format!(
            "vocabulary has {} words, needs at least {} ({} entities, {} novel entities, {} relations, 2 values)",
            spec.vocab.len(),
            fixed + 2,
            spec.n_entities,
            spec.n_novel,
            spec.n_relations
        )));
    }
    let pairs = spec.n_entities * spec.n_relations;
    if spec.n_conflicts > pairs {
        return Err(CoreError::Spec(format!(
            "{} conflicts requested but only {pairs} (entity, relation) pairs exist",
            spec.n_conflicts
        )));
    }
    if spec.n_stubborn > 0 && spec.vocab.len() < fixed + 3 {
        return Err(CoreError::Spec("stubborn lines need at least 3 values".into()));
    }
    if spec.n_reading > 0 && spec.n_novel == 0 {
        return Err(CoreError::Spec("reading lines need n_novel >= 1".into()));
    }
    let (entities, rest) = spec.vocab.split_at(spec.n_entities);
    let (novel, rest) = rest.split_at(spec.n_novel);
    let (relations, values) = rest.split_at(spec.n_relations);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut facts = Vec::with_capacity(pairs);
    for e in entities {
        for r in relations {
            let v = values.choose(&mut rng).expect("at least two values");
            facts.push(Fact {
                entity: e.clone(),
                relation: r.clone(),
                value: v.clone(),
            });
        }
    }
    let mut corpus: Vec<String> = facts
        .iter()
        .map(|f| fact_line(&f.entity, &f.relation, &f.value))
        .collect();
    for _ in 0..spec.n_reading {
        let e = novel.choose(&mut rng).expect("novel pool");
        let r = relations.choose(&mut rng).expect("relations");
        let v = values.choose(&mut rng).expect("values");
        let s = fact_line(e, r, v);
        corpus.push(format!("{s} {s}"));
    }

    let mut order: Vec<usize> = (0..pairs).collect();
    order.shuffle(&mut rng);
    let conflicts: Vec<(usize, String)> = order
        .iter()
        .take(spec.n_conflicts)
        .map(|&fi| {
            let f = &facts[fi];
            let alt = loop {
                let v = values.choose(&mut rng).expect("values");
                if *v != f.value {
                    break v.clone();
                }
            };
            (fi, alt)
        })
        .collect();
    let conflict_gold: BTreeMap<usize, &str> = conflicts.iter().map(|(fi, a)| (*fi, a.as_str())).collect();

    for _ in 0..spec.n_stubborn {
        let fi = rng.random_range(0..facts.len());
        let f = &facts[fi];
        // never state a conflict's context value for its own pair
        let alt = loop {
            let v = values.choose(&mut rng).expect("values");
            if *v != f.value && conflict_gold.get(&fi) != Some(&v.as_str()) {
                break v;
            }
        };
        corpus.push(format!(
            "{} {}",
            fact_line(&f.entity, &f.relation, alt),
            fact_line(&f.entity, &f.relation, &f.value)
        ));
    }

    let width = spec.n_conflicts.max(1).to_string().len();
    let mut completion = Vec::with_capacity(spec.n_conflicts);
    let mut multiple_choice = Vec::with_capacity(spec.n_conflicts);
    for (k, (fi, alt)) in conflicts.into_iter().enumerate() {
        let f = &facts[fi];
        let context = fact_line(&f.entity, &f.relation, &alt);
        let question = format!("{} {} is", f.entity, f.relation);
        completion.push(ConflictExample {
            id: format!("c{k:0width$}"),
            task: Task::Completion,
            context: context.clone(),
            question: question.clone(),
            gold_answer: alt.clone(),
            original_gold: f.value.clone(),
            choices: None,
        });
        let gold_first = rng.random_bool(0.5);
        let choices = if gold_first {
            vec![alt.clone(), f.value.clone()]
        } else {
            vec![f.value.clone(), alt.clone()]
        };
        let (g, o) = if gold_first { (0, 1) } else { (1, 0) };
        multiple_choice.push(ConflictExample {
            id: format!("m{k:0width$}"),
            task: Task::MultipleChoice,
            context,
            question,
            gold_answer: choice_label(g),
            original_gold: choice_label(o),
            choices: Some(choices),
        });
    }
    Ok(SyntheticData {
        facts,
        corpus,
        completion,
        multiple_choice,
    })
}

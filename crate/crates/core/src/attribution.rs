//! Context-aware attribution of feed-forward neurons.
//!
//! For an example with context `c`, question `q` and gold answer `a`, let
//! `v_q` and `v_cq` be a neuron's activations at the final position of the
//! question-only and context+question prompts. The score integrates the
//! gradient of `P(a | c, q)` along the straight path from `v_q` to `v_cq`,
//! with a right Riemann sum over `k/m`, `k = 1..m`:
//!
//! ```text
//! score = (v_cq - v_q) / m * sum_k dP/dv (v_q + k/m (v_cq - v_q))
//! ```
//!
//! `P` is a probability (`exp` of the teacher-forced answer log-probability)
//! and the override is applied at the final position of every answer step.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use numcore::{Graph, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{label_index, ConflictExample, Task};
use crate::error::{CoreError, Result};
use crate::harness::PromptTemplate;
use crate::model::transformer::LayerOverride;
use crate::model::{ActivationTrace, NeuronSite, Overrides, TransformerModel};

/// `(layer, neuron, score)` as read from one CSV row.
type SiteScore = (usize, usize, f64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMode {
    PerNeuronExact,
    JointLayer,
}

impl std::str::FromStr for AttributionMode {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_neuron_exact" => Ok(Self::PerNeuronExact),
            "joint_layer" => Ok(Self::JointLayer),
            _ => Err(CoreError::Parameter(format!(
                "unknown mode {s:?} (expected per_neuron_exact or joint_layer)"
            ))),
        }
    }
}

/// `F32` rounds the weights and the recorded endpoint activations to single
/// precision before attributing; arithmetic stays in f64 either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub m: usize,
    pub mode: AttributionMode,
    pub precision: Precision,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            m: 20,
            mode: AttributionMode::JointLayer,
            precision: Precision::F64,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(CoreError::Parameter("m must be at least 1".into()));
        }
        Ok(())
    }
}

/// Tokenised inputs of one example together with both activation traces.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub id: String,
    pub cq_tokens: Vec<u32>,
    pub q_tokens: Vec<u32>,
    pub answer_tokens: Vec<u32>,
    pub trace_cq: ActivationTrace,
    pub trace_q: ActivationTrace,
}

/// Text whose probability is attributed: the gold answer, or the gold
/// option's text for multiple choice.
pub fn answer_text(example: &ConflictExample) -> Result<&str> {
    match example.task {
        Task::Completion => Ok(&example.gold_answer),
        Task::MultipleChoice => label_index(&example.gold_answer)
            .and_then(|i| example.choices().get(i))
            .map(String::as_str)
            .ok_or_else(|| CoreError::Input(format!("example {}: gold label has no choice", example.id))),
    }
}

pub fn prepare(
    model: &TransformerModel,
    example: &ConflictExample,
    template: &PromptTemplate,
) -> Result<PreparedExample> {
    let input_err = |what: &str, e: CoreError| {
        CoreError::Input(format!("example {}: {what}: {e}", example.id))
    };
    let cq_tokens = model
        .encode(&template.render(example, true))
        .map_err(|e| input_err("prompt", e))?;
    let q_tokens = model
        .encode(&template.render(example, false))
        .map_err(|e| input_err("question-only prompt", e))?;
    let answer_tokens = model
        .encode(answer_text(example)?)
        .map_err(|e| input_err("answer", e))?;
    if answer_tokens.is_empty() {
        return Err(CoreError::Input(format!("example {}: empty answer", example.id)));
    }
    let trace_cq = model.record_activations(&cq_tokens)?;
    let trace_q = model.record_activations(&q_tokens)?;
    Ok(PreparedExample {
        id: example.id.clone(),
        cq_tokens,
        q_tokens,
        answer_tokens,
        trace_cq,
        trace_q,
    })
}

fn lerp(a: f64, b: f64, alpha: f64) -> f64 {
    a + alpha * (b - a)
}

/// `P(answer | c, q)` with `site` set to `v_q + alpha (v_cq - v_q)`.
pub fn path_prob(
    model: &TransformerModel,
    ex: &PreparedExample,
    site: NeuronSite,
    alpha: f64,
) -> Result<f64> {
    model.config().check_site(site)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::Parameter(format!("alpha {alpha} outside [0, 1]")));
    }
    let v = lerp(ex.trace_q.get(site), ex.trace_cq.get(site), alpha);
    let ovr: Overrides = [(site, v)].into_iter().collect();
    Ok(model
        .answer_logprob(&ex.cq_tokens, &ex.answer_tokens, &ovr)?
        .exp())
}

/// `P(answer | c, q)` with every neuron of `layer` moved along the joint path.
pub fn layer_path_prob(
    model: &TransformerModel,
    ex: &PreparedExample,
    layer: usize,
    alpha: f64,
) -> Result<f64> {
    check_layer(model, layer)?;
    let ovr: Overrides = (0..model.config().d_ff)
        .map(|n| {
            let s = NeuronSite::new(layer, n);
            (s, lerp(ex.trace_q.get(s), ex.trace_cq.get(s), alpha))
        })
        .collect();
    Ok(model
        .answer_logprob(&ex.cq_tokens, &ex.answer_tokens, &ovr)?
        .exp())
}

fn check_layer(model: &TransformerModel, layer: usize) -> Result<()> {
    model.config().check_site(NeuronSite::new(layer, 0))
}

/// Value and gradient of `P` with the listed neurons of `layer` overridden.
pub fn prob_and_grad(
    model: &TransformerModel,
    ex: &PreparedExample,
    layer: usize,
    cols: &[usize],
    values: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let leaf = g.leaf(Tensor::vector(values.to_vec())?);
    let ovr = [LayerOverride {
        layer,
        cols: cols.to_vec(),
        values: leaf,
    }];
    let lp = model.answer_logprob_graph(&mut g, &p, &ex.cq_tokens, &ex.answer_tokens, &ovr)?;
    let prob = g.exp(lp)?;
    let value = g.value(prob)?.item()?;
    let grad = g.backward(prob)?.wrt(leaf)?.to_vec();
    Ok((value, grad))
}

/// Riemann-sum integrated gradients for `cols` of `layer`, moved jointly.
fn integrate(
    model: &TransformerModel,
    ex: &PreparedExample,
    layer: usize,
    cols: &[usize],
    m: usize,
) -> Result<Vec<f64>> {
    let start: Vec<f64> = cols.iter().map(|&c| ex.trace_q.layer(layer)[c]).collect();
    let end: Vec<f64> = cols.iter().map(|&c| ex.trace_cq.layer(layer)[c]).collect();
    let delta: Vec<f64> = start.iter().zip(&end).map(|(a, b)| b - a).collect();
    if delta.iter().all(|&d| d == 0.0) {
        return Ok(vec![0.0; cols.len()]);
    }
    let mut sum = vec![0.0; cols.len()];
    for k in 1..=m {
        let alpha = k as f64 / m as f64;
        let point: Vec<f64> = start.iter().zip(&end).map(|(&a, &b)| lerp(a, b, alpha)).collect();
        let (_, grad) = prob_and_grad(model, ex, layer, cols, &point)?;
        for (s, g) in sum.iter_mut().zip(&grad) {
            *s += g;
        }
    }
    let scores: Vec<f64> = delta
        .iter()
        .zip(&sum)
        .map(|(d, s)| d / m as f64 * s)
        .collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CoreError::Numeric(format!(
            "non-finite attribution in layer {layer} of example {}",
            ex.id
        )));
    }
    Ok(scores)
}

pub fn attribute_neuron(
    model: &TransformerModel,
    ex: &PreparedExample,
    site: NeuronSite,
    config: &AttributionConfig,
) -> Result<f64> {
    config.validate()?;
    model.config().check_site(site)?;
    Ok(integrate(model, ex, site.layer, &[site.neuron], config.m)?[0])
}

pub fn attribute_layer_joint(
    model: &TransformerModel,
    ex: &PreparedExample,
    layer: usize,
    config: &AttributionConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    check_layer(model, layer)?;
    let cols: Vec<usize> = (0..model.config().d_ff).collect();
    integrate(model, ex, layer, &cols, config.m)
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn at_precision(model: &TransformerModel, precision: Precision) -> Result<TransformerModel> {
    match precision {
        Precision::F64 => Ok(model.clone()),
        Precision::F32 => {
            let mut m = model.clone();
            for t in m.weights_mut().values_mut() {
                *t = t.map(round_f32)?;
            }
            Ok(m)
        }
    }
}

/// Scores for every site of one example, layer-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub id: String,
    pub scores: Vec<f64>,
}

pub fn attribute_prepared(
    model: &TransformerModel,
    ex: &PreparedExample,
    config: &AttributionConfig,
) -> Result<ExampleScores> {
    config.validate()?;
    let c = model.config();
    let mut scores = Vec::with_capacity(c.n_sites());
    for layer in 0..c.n_layers {
        match config.mode {
            AttributionMode::JointLayer => {
                scores.extend(attribute_layer_joint(model, ex, layer, config)?);
            }
            AttributionMode::PerNeuronExact => {
                for n in 0..c.d_ff {
                    scores.push(attribute_neuron(model, ex, NeuronSite::new(layer, n), config)?);
                }
            }
        }
    }
    Ok(ExampleScores {
        id: ex.id.clone(),
        scores,
    })
}

fn prepare_at(
    model: &TransformerModel,
    example: &ConflictExample,
    template: &PromptTemplate,
    precision: Precision,
) -> Result<PreparedExample> {
    let mut ex = prepare(model, example, template)?;
    if precision == Precision::F32 {
        for l in ex.trace_cq.layers.iter_mut().chain(ex.trace_q.layers.iter_mut()) {
            l.iter_mut().for_each(|v| *v = round_f32(*v));
        }
    }
    Ok(ex)
}

pub fn attribute_example(
    model: &TransformerModel,
    example: &ConflictExample,
    template: &PromptTemplate,
    config: &AttributionConfig,
) -> Result<ExampleScores> {
    let model = at_precision(model, config.precision)?;
    let ex = prepare_at(&model, example, template, config.precision)?;
    attribute_prepared(&model, &ex, config)
}

/// Attributes every example; examples run in parallel, output keeps input order.
pub fn attribute_dataset(
    model: &TransformerModel,
    examples: &[ConflictExample],
    template: &PromptTemplate,
    config: &AttributionConfig,
) -> Result<AttributionMatrix> {
    config.validate()?;
    let model = at_precision(model, config.precision)?;
    let rows = examples
        .par_iter()
        .map(|e| {
            let ex = prepare_at(&model, e, template, config.precision)?;
            attribute_prepared(&model, &ex, config)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttributionMatrix {
        n_layers: model.config().n_layers,
        d_ff: model.config().d_ff,
        rows,
    })
}

/// Per-example scores over every site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMatrix {
    pub n_layers: usize,
    pub d_ff: usize,
    pub rows: Vec<ExampleScores>,
}

impl AttributionMatrix {
    pub fn new(n_layers: usize, d_ff: usize, rows: Vec<ExampleScores>) -> Result<Self> {
        let n = n_layers * d_ff;
        if let Some(r) = rows.iter().find(|r| r.scores.len() != n) {
            return Err(CoreError::Input(format!(
                "example {} has {} scores, expected {n}",
                r.id,
                r.scores.len()
            )));
        }
        if let Some(r) = rows.iter().find(|r| r.scores.iter().any(|s| !s.is_finite())) {
            return Err(CoreError::Numeric(format!("example {} has a non-finite score", r.id)));
        }
        Ok(Self { n_layers, d_ff, rows })
    }

    pub fn n_sites(&self) -> usize {
        self.n_layers * self.d_ff
    }

    pub fn site(&self, index: usize) -> NeuronSite {
        NeuronSite::new(index / self.d_ff, index % self.d_ff)
    }

    pub fn index(&self, site: NeuronSite) -> usize {
        site.layer * self.d_ff + site.neuron
    }

    pub fn score(&self, row: usize, site: NeuronSite) -> f64 {
        self.rows[row].scores[self.index(site)]
    }

    /// CSV with header `example_id,layer,neuron,score`, rows in example, layer, neuron order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("example_id,layer,neuron,score\n");
        for r in &self.rows {
            for (i, v) in r.scores.iter().enumerate() {
                let site = self.site(i);
                writeln!(s, "{},{},{},{}", r.id, site.layer, site.neuron, v).expect("write to String");
            }
        }
        s
    }

    pub fn from_csv(text: &str, path: &str) -> Result<Self> {
        let err = |line: usize, msg: String| CoreError::Parse {
            path: path.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "example_id,layer,neuron,score" => {}
            _ => return Err(err(1, "expected header example_id,layer,neuron,score".into())),
        }
        let mut raw: Vec<(String, Vec<SiteScore>)> = Vec::new();
        let (mut max_l, mut max_n) = (0, 0);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.rsplitn(4, ',').collect();
            if f.len() != 4 {
                return Err(err(i + 1, "expected 4 fields".into()));
            }
            let (score, neuron, layer, id) = (f[0], f[1], f[2], f[3]);
            let layer: usize = layer.parse().map_err(|_| err(i + 1, format!("bad layer {layer:?}")))?;
            let neuron: usize = neuron.parse().map_err(|_| err(i + 1, format!("bad neuron {neuron:?}")))?;
            let score: f64 = score.parse().map_err(|_| err(i + 1, format!("bad score {score:?}")))?;
            max_l = max_l.max(layer);
            max_n = max_n.max(neuron);
            match raw.last_mut() {
                Some((last, v)) if last == id => v.push((layer, neuron, score)),
                _ => {
                    if raw.iter().any(|(r, _)| r == id) {
                        return Err(err(i + 1, format!("rows of example {id:?} are not contiguous")));
                    }
                    raw.push((id.to_string(), vec![(layer, neuron, score)]));
                }
            }
        }
        let (n_layers, d_ff) = if raw.is_empty() { (0, 0) } else { (max_l + 1, max_n + 1) };
        let mut rows = Vec::with_capacity(raw.len());
        for (id, entries) in raw {
            let mut scores = vec![f64::NAN; n_layers * d_ff];
            for (l, n, s) in entries {
                scores[l * d_ff + n] = s;
            }
            if scores.iter().any(|s| s.is_nan()) {
                return Err(err(0, format!("example {id:?} does not cover every site")));
            }
            rows.push(ExampleScores { id, scores });
        }
        Self::new(n_layers, d_ff, rows)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        Self::from_csv(&fs::read_to_string(p)?, &p.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{FfnKind, PositionKind};
    use crate::model::transformer::tests::tiny;

    fn example() -> ConflictExample {
        ConflictExample {
            id: "e".into(),
            task: Task::Completion,
            context: "a b is c.".into(),
            question: "a b is".into(),
            gold_answer: "c".into(),
            original_gold: "d".into(),
            choices: None,
        }
    }

    #[test]
    fn alpha_one_is_the_natural_probability() {
        let m = tiny(FfnKind::Plain, PositionKind::Learned, 2);
        let ex = prepare(&m, &example(), &PromptTemplate::completion_default()).unwrap();
        let natural = m
            .answer_logprob(&ex.cq_tokens, &ex.answer_tokens, &Overrides::new())
            .unwrap()
            .exp();
        let p1 = path_prob(&m, &ex, NeuronSite::new(1, 3), 1.0).unwrap();
        assert!((p1 - natural).abs() < 1e-12);
    }

    #[test]
    fn zero_path_scores_zero() {
        let m = tiny(FfnKind::Gated, PositionKind::Rotary, 2);
        let mut e = example();
        e.context = String::new();
        let s = attribute_example(&m, &e, &PromptTemplate::completion_default(), &AttributionConfig::default())
            .unwrap();
        assert!(s.scores.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn csv_round_trip() {
        let mat = AttributionMatrix::new(
            2,
            2,
            vec![
                ExampleScores { id: "x,1".into(), scores: vec![0.1, -2.5e-7, 3.0, 0.0] },
                ExampleScores { id: "y".into(), scores: vec![1.0 / 3.0, 2.0, -1.0, 5.0] },
            ],
        )
        .unwrap();
        let back = AttributionMatrix::from_csv(&mat.to_csv(), "m.csv").unwrap();
        assert_eq!(back, mat);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("joint_layer".parse::<AttributionMode>().unwrap(), AttributionMode::JointLayer);
        assert!("other".parse::<AttributionMode>().is_err());
    }
}

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use ircan_core::attribution::{attribute_dataset, AttributionConfig, AttributionMatrix, AttributionMode, Precision};
use ircan_core::data::{gen_synthetic, load_dataset, pseudo_words, save_dataset, ConflictExample, SyntheticSpec, Task};
use ircan_core::editing::{apply_edit, EditPlan, EditTarget};
use ircan_core::harness::{
    ablation_suite, evaluate, grid_search, split_dataset, Decoding, EvalConfig, GridConfig, PromptTemplate,
};
use ircan_core::model::train::Optimizer;
use ircan_core::model::{
    load_checkpoint, save, train_toy, DType, FfnKind, ModelConfig, NeuronSite, PositionKind, Tokenizer,
    TrainConfig, TransformerModel,
};
use ircan_core::parity::{check_parity, load_reference_logits};
use ircan_core::selection::{histogram_csv, layer_histogram, prompt_overlap, select_context_neurons, Selection, SelectionConfig};

use crate::manifest::RunManifest;

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn json(value: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// `<path><suffix>`, e.g. `out.json` + `.hist.csv`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn model(path: &Path) -> Result<TransformerModel> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn dataset(path: &Path) -> Result<Vec<ConflictExample>> {
    let d = load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    ensure!(!d.is_empty(), "dataset {} is empty", path.display());
    Ok(d)
}

fn template(text: Option<&str>, data: &[ConflictExample]) -> Result<PromptTemplate> {
    match text {
        Some(t) => Ok(PromptTemplate::new(t.replace("\\n", "\n"))?),
        None => Ok(match data.first().map(|e| e.task) {
            Some(Task::MultipleChoice) => PromptTemplate::multiple_choice_default(),
            _ => PromptTemplate::completion_default(),
        }),
    }
}

fn selection(path: &Path) -> Result<Selection> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing neuron file {}", path.display()))
}

/// `a..b` (inclusive), `a..b:step` or a comma list.
pub fn parse_range(text: &str) -> Result<Vec<f64>> {
    let text = text.trim();
    if let Some((lo, rest)) = text.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((hi, step)) => (hi, step.trim().parse::<f64>()?),
            None => (rest, 1.0),
        };
        let (lo, hi) = (lo.trim().parse::<f64>()?, hi.trim().parse::<f64>()?);
        ensure!(step > 0.0 && lo <= hi, "bad range {text:?}");
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|i| lo + i as f64 * step).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad range item {s:?}")))
        .collect()
}

fn parse_h_range(text: &str) -> Result<Vec<usize>> {
    parse_range(text)?
        .into_iter()
        .map(|v| {
            ensure!(v >= 1.0 && v.fract() == 0.0, "h values must be positive integers, got {v}");
            Ok(v as usize)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DTypeArg {
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DecodingArg {
    Greedy,
    Cad,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct DecodeOpts {
    #[arg(long, value_enum, default_value = "greedy")]
    pub decoding: DecodingArg,
    /// CAD coefficient.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Tokens generated per completion item.
    #[arg(long, default_value_t = 3)]
    pub max_new: usize,
    /// Divide option log-probabilities by their token counts.
    #[arg(long)]
    pub length_normalized: bool,
}

impl DecodeOpts {
    fn config(&self) -> EvalConfig {
        EvalConfig {
            decoding: match self.decoding {
                DecodingArg::Greedy => Decoding::Greedy,
                DecodingArg::Cad => Decoding::Cad { alpha: self.alpha },
            },
            max_new: self.max_new,
            length_normalized: self.length_normalized,
        }
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Serialize, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub entities: usize,
    #[arg(long, default_value_t = 4)]
    pub relations: usize,
    #[arg(long, default_value_t = 30)]
    pub values: usize,
    #[arg(long, default_value_t = 240)]
    pub conflicts: usize,
    /// Entities that only appear in reading lines.
    #[arg(long, default_value_t = 40)]
    pub novel: usize,
    #[arg(long, default_value_t = 240)]
    pub reading: usize,
    #[arg(long, default_value_t = 120)]
    pub stubborn: usize,
}

pub fn gen_data(a: GenDataArgs, seed: u64) -> Result<()> {
    let spec = SyntheticSpec {
        n_entities: a.entities,
        n_relations: a.relations,
        vocab: pseudo_words(a.entities + a.novel + a.relations + a.values),
        n_conflicts: a.conflicts,
        seed,
        n_novel: a.novel,
        n_reading: a.reading,
        n_stubborn: a.stubborn,
    };
    let dir = &a.out_dir;
    let names = [
        "corpus.txt",
        "facts.json",
        "prompts.txt",
        "completion.jsonl",
        "completion.validation.jsonl",
        "completion.test.jsonl",
        "multiple_choice.jsonl",
        "multiple_choice.validation.jsonl",
        "multiple_choice.test.jsonl",
    ];
    let mut m = RunManifest::new("gen-data", &a, seed)?;
    for n in names {
        m = m.output(&dir.join(n));
    }
    m.write(&dir.join("corpus.txt"))?;

    let data = gen_synthetic(&spec)?;
    write(&dir.join("corpus.txt"), &data.corpus_text())?;
    write(&dir.join("facts.json"), &json(&data.facts)?)?;
    // rendered prompts, so that a model trained on the corpus can also read
    // the template words
    let mut prompts = String::new();
    for (set, t) in [
        (&data.completion, PromptTemplate::completion_default()),
        (&data.multiple_choice, PromptTemplate::multiple_choice_default()),
    ] {
        for ex in set {
            prompts.push_str(&t.render(ex, true));
            prompts.push('\n');
        }
    }
    write(&dir.join("prompts.txt"), &prompts)?;
    for (name, set) in [("completion", &data.completion), ("multiple_choice", &data.multiple_choice)] {
        save_dataset(dir.join(format!("{name}.jsonl")), set)?;
        let (val, test) = split_dataset(set, seed)?;
        save_dataset(dir.join(format!("{name}.validation.jsonl")), &val)?;
        save_dataset(dir.join(format!("{name}.test.jsonl")), &test)?;
    }
    println!(
        "{} facts, {} corpus lines, {} conflicts -> {}",
        data.facts.len(),
        data.corpus.len(),
        data.completion.len(),
        dir.display()
    );
    Ok(())
}

// ------------------------------------------------------------------- train

/// Architecture and optimiser settings read by `train --config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub ffn_kind: FfnKind,
    pub position_kind: PositionKind,
    pub max_seq_len: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub clip: Option<f64>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_ff: 64,
            ffn_kind: FfnKind::Plain,
            position_kind: PositionKind::Learned,
            max_seq_len: 32,
            steps: 300,
            lr: 3e-3,
            batch_size: 16,
            optimizer: Optimizer::Adam,
            clip: Some(1.0),
        }
    }
}

#[derive(Debug, Serialize, Args)]
pub struct TrainArgs {
    /// Training text, one sequence per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// JSON architecture/optimiser config; omitted fields take demo defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's step count.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides the config's learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Extra text whose words join the vocabulary without being trained on.
    #[arg(long)]
    pub vocab_from: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: DTypeArg,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn train(a: TrainArgs, seed: u64) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str::<DemoConfig>(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .with_context(|| format!("parsing train config {}", p.display()))?,
        None => DemoConfig::default(),
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    let corpus_text =
        fs::read_to_string(&a.corpus).with_context(|| format!("reading corpus {}", a.corpus.display()))?;
    let corpus: Vec<String> = corpus_text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    ensure!(!corpus.is_empty(), "corpus {} has no lines", a.corpus.display());
    let mut texts = vec![corpus_text.clone()];
    let mut m = RunManifest::new("train", serde_json::json!({ "args": &a, "resolved": &cfg }), seed)?.input(&a.corpus)?;
    if let Some(p) = &a.config {
        m = m.input(p)?;
    }
    for p in &a.vocab_from {
        texts.push(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?);
        m = m.input(p)?;
    }
    m.output(&a.out).write(&a.out)?;

    let tok = Tokenizer::from_texts(texts.iter().map(String::as_str), false);
    let config = ModelConfig {
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        d_model: cfg.d_model,
        d_ff: cfg.d_ff,
        vocab_size: tok.vocab_size(),
        ffn_kind: cfg.ffn_kind,
        position_kind: cfg.position_kind,
        max_seq_len: cfg.max_seq_len,
        norm_eps: 1e-5,
        rope_base: 10_000.0,
    };
    let tc = TrainConfig {
        steps: cfg.steps,
        lr: cfg.lr,
        seed,
        batch_size: cfg.batch_size,
        optimizer: cfg.optimizer,
        clip: cfg.clip,
    };
    let (model, report) = train_toy(config, tok, &corpus, &tc)?;
    save(&model, &a.out, a.dtype.into())?;
    write(&sibling(&a.out, ".loss.csv"), &{
        let mut s = String::from("step,loss\n");
        for (i, l) in report.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    })?;
    println!(
        "trained {} steps: loss {:.4} -> {:.4}; saved {}",
        cfg.steps,
        report.first_loss(),
        report.final_loss(),
        a.out.display()
    );
    Ok(())
}

// --------------------------------------------------------------- attribute

#[derive(Debug, Clone, Copy, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    PerNeuronExact,
    JointLayer,
}

#[derive(Debug, Clone, Copy, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Serialize, Args)]
pub struct AttributeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Riemann steps.
    #[arg(long, default_value_t = 20)]
    pub m: usize,
    #[arg(long, value_enum, default_value = "joint-layer")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: PrecisionArg,
    /// Prompt template with `{context}`, `{question}` and `{choices}`; `\n` is a newline.
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn attribute(a: AttributeArgs, seed: u64) -> Result<()> {
    RunManifest::new("attribute", &a, seed)?
        .input(&a.model)?
        .input(&a.data)?
        .output(&a.out)
        .write(&a.out)?;
    let model = model(&a.model)?;
    let data = dataset(&a.data)?;
    let t = template(a.template.as_deref(), &data)?;
    let cfg = AttributionConfig {
        m: a.m,
        mode: match a.mode {
            ModeArg::PerNeuronExact => AttributionMode::PerNeuronExact,
            ModeArg::JointLayer => AttributionMode::JointLayer,
        },
        precision: match a.precision {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        },
    };
    let matrix = attribute_dataset(&model, &data, &t, &cfg)?;
    matrix.save_csv(&a.out)?;
    println!("{} examples x {} sites -> {}", matrix.rows.len(), matrix.n_sites(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- identify

#[derive(Debug, Serialize, Args)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Relative threshold against each example's largest score.
    #[arg(long, default_value_t = 0.10)]
    pub t: f64,
    /// Candidates kept per example.
    #[arg(long, default_value_t = 20)]
    pub z: usize,
    /// Neurons selected.
    #[arg(long)]
    pub h: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Layer histogram CSV (default: `<out>.hist.csv`).
    #[arg(long)]
    pub hist_out: Option<PathBuf>,
}

pub fn identify(a: IdentifyArgs, seed: u64) -> Result<()> {
    let hist_out = a.hist_out.clone().unwrap_or_else(|| sibling(&a.out, ".hist.csv"));
    RunManifest::new("identify", &a, seed)?
        .input(&a.scores)?
        .output(&a.out)
        .output(&hist_out)
        .write(&a.out)?;
    let matrix = AttributionMatrix::load_csv(&a.scores)?;
    let cfg = SelectionConfig { t: a.t, z: a.z, h: a.h };
    let (sel, _) = select_context_neurons(&matrix, &cfg)?;
    write(&a.out, &json(&sel)?)?;
    write(
        &hist_out,
        &histogram_csv(&layer_histogram(&sel.neuron_sites(), matrix.n_layers)),
    )?;
    for s in &sel.sites {
        println!("{}\tcount {}\tmean {:.6}", s.site(), s.count, s.mean_score);
    }
    Ok(())
}

// -------------------------------------------------------------------- edit

#[derive(Debug, Clone, Copy, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EditArg {
    Reweight,
    Erase,
    RandomReweight,
    RandomErase,
}

#[derive(Debug, Clone, Copy, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TargetArg {
    Outgoing,
    Incoming,
}

#[derive(Debug, Serialize, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Neuron JSON written by `identify`.
    #[arg(long)]
    pub neurons: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    #[arg(long, value_enum, default_value = "reweight")]
    pub kind: EditArg,
    #[arg(long, value_enum, default_value = "outgoing")]
    pub target: TargetArg,
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: DTypeArg,
    #[arg(long)]
    pub out: PathBuf,
}

fn plan(model: &TransformerModel, sites: Vec<NeuronSite>, kind: EditArg, beta: f64, seed: u64) -> Result<EditPlan> {
    let exclude: BTreeSet<NeuronSite> = sites.iter().copied().collect();
    let cfg = model.config();
    Ok(match kind {
        EditArg::Reweight => EditPlan::reweight(sites, beta),
        EditArg::Erase => EditPlan::erase(sites),
        EditArg::RandomReweight => EditPlan::random_reweight(cfg, sites.len(), beta, seed, &exclude)?,
        EditArg::RandomErase => EditPlan::random_erase(cfg, sites.len(), seed, &exclude)?,
    })
}

pub fn edit(a: EditArgs, seed: u64) -> Result<()> {
    RunManifest::new("edit", &a, seed)?
        .input(&a.model)?
        .input(&a.neurons)?
        .output(&a.out)
        .write(&a.out)?;
    let base = model(&a.model)?;
    let sel = selection(&a.neurons)?;
    let target = match a.target {
        TargetArg::Outgoing => EditTarget::Outgoing,
        TargetArg::Incoming => EditTarget::Incoming,
    };
    let p = plan(&base, sel.neuron_sites(), a.kind, a.beta, seed)?.with_target(target);
    let edited = apply_edit(&base, &p)?;
    save(&edited, &a.out, a.dtype.into())?;
    println!("edited {} neurons -> {}", p.sites.len(), a.out.display());
    Ok(())
}

// -------------------------------------------------------------------- eval

#[derive(Debug, Serialize, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub template: Option<String>,
    /// Reweight these neurons (JSON from `identify`) before scoring.
    #[arg(long)]
    pub neurons: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    #[command(flatten)]
    pub decode: DecodeOpts,
    /// Report JSON; per-example rows go to `<out>.records.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn eval(a: EvalArgs, seed: u64) -> Result<()> {
    let records = sibling(&a.out, ".records.csv");
    let mut m = RunManifest::new("eval", &a, seed)?.input(&a.model)?.input(&a.data)?;
    if let Some(n) = &a.neurons {
        m = m.input(n)?;
    }
    m.output(&a.out).output(&records).write(&a.out)?;
    let mut mdl = model(&a.model)?;
    if let Some(n) = &a.neurons {
        mdl = apply_edit(&mdl, &EditPlan::reweight(selection(n)?.neuron_sites(), a.beta))?;
    }
    let data = dataset(&a.data)?;
    let t = template(a.template.as_deref(), &data)?;
    let report = evaluate(&mdl, &data, &t, &a.decode.config())?;
    write(&a.out, &json(&report.summary())?)?;
    write(&records, &report.to_csv())?;
    println!("n {} acc {:.4} sr {:.4}", report.n, report.acc, report.sr);
    Ok(())
}

// -------------------------------------------------------------------- grid

#[derive(Debug, Serialize, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Attribution scores of the validation split.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub validation: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long, default_value = "1..16")]
    pub h_range: String,
    #[arg(long, default_value = "2..20")]
    pub beta_range: String,
    #[arg(long, default_value_t = 0.10)]
    pub t: f64,
    #[arg(long, default_value_t = 20)]
    pub z: usize,
    #[command(flatten)]
    pub decode: DecodeOpts,
    /// Result JSON; the sweep goes to `<out>.sweep.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn grid(a: GridArgs, seed: u64) -> Result<()> {
    let sweep = sibling(&a.out, ".sweep.csv");
    RunManifest::new("grid", &a, seed)?
        .input(&a.model)?
        .input(&a.scores)?
        .input(&a.validation)?
        .input(&a.test)?
        .output(&a.out)
        .output(&sweep)
        .write(&a.out)?;
    let mdl = model(&a.model)?;
    let matrix = AttributionMatrix::load_csv(&a.scores)?;
    let val = dataset(&a.validation)?;
    let test = dataset(&a.test)?;
    let t = template(a.template.as_deref(), &val)?;
    let cfg = GridConfig {
        h_range: parse_h_range(&a.h_range)?,
        beta_range: parse_range(&a.beta_range)?,
        t: a.t,
        z: a.z,
        eval: a.decode.config(),
    };
    let r = grid_search(&mdl, &matrix, &val, &test, &t, &cfg)?;
    write(&a.out, &json(&r)?)?;
    write(&sweep, &r.sweep_csv())?;
    println!(
        "h* {} beta* {}: test acc {:.4} -> {:.4}, sr {:.4} -> {:.4}",
        r.chosen_h, r.chosen_beta, r.baseline_test.acc, r.test.acc, r.baseline_test.sr, r.test.sr
    );
    Ok(())
}

// ------------------------------------------------------------------ ablate

#[derive(Debug, Serialize, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub neurons: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    /// Random draws per random arm.
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[command(flatten)]
    pub decode: DecodeOpts,
    /// Per-arm CSV; the full report goes to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn ablate(a: AblateArgs, seed: u64) -> Result<()> {
    let full = sibling(&a.out, ".json");
    RunManifest::new("ablate", &a, seed)?
        .input(&a.model)?
        .input(&a.neurons)?
        .input(&a.data)?
        .output(&a.out)
        .output(&full)
        .write(&a.out)?;
    let mdl = model(&a.model)?;
    let sites = selection(&a.neurons)?.neuron_sites();
    let data = dataset(&a.data)?;
    let t = template(a.template.as_deref(), &data)?;
    let r = ablation_suite(&mdl, &sites, &data, &t, a.beta, a.repeats, seed, &a.decode.config())?;
    write(&a.out, &r.to_csv())?;
    write(&full, &json(&r)?)?;
    print!("{}", r.to_csv());
    Ok(())
}

// ----------------------------------------------------------------- overlap

#[derive(Debug, Serialize, Args)]
pub struct OverlapArgs {
    /// Scores from the first prompt set.
    #[arg(long)]
    pub a: PathBuf,
    /// Scores from the second prompt set.
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub k: usize,
    #[arg(long, default_value_t = 0.10)]
    pub t: f64,
    #[arg(long, default_value_t = 20)]
    pub z: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct OverlapReport {
    k: usize,
    overlap: f64,
}

pub fn overlap(a: OverlapArgs, seed: u64) -> Result<()> {
    RunManifest::new("overlap", &a, seed)?
        .input(&a.a)?
        .input(&a.b)?
        .output(&a.out)
        .write(&a.out)?;
    let ma = AttributionMatrix::load_csv(&a.a)?;
    let mb = AttributionMatrix::load_csv(&a.b)?;
    let k = a.k.min(ma.n_sites());
    if k < a.k {
        log::warn!("k = {} exceeds the {} sites; using {k}", a.k, ma.n_sites());
    }
    let overlap = prompt_overlap(&ma, &mb, k, a.t, a.z)?;
    write(&a.out, &json(&OverlapReport { k, overlap })?)?;
    println!("top-{k} overlap {overlap:.4}");
    Ok(())
}

// ------------------------------------------------------------------ parity

#[derive(Debug, Serialize, Args)]
pub struct ParityArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSON object mapping prompts to final-position logits.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn parity(a: ParityArgs, seed: u64) -> Result<()> {
    RunManifest::new("parity", &a, seed)?
        .input(&a.model)?
        .input(&a.reference)?
        .output(&a.out)
        .write(&a.out)?;
    let mdl = model(&a.model)?;
    let reference = load_reference_logits(&a.reference)?;
    let r = check_parity(&mdl, &reference, a.tol)?;
    write(&a.out, &json(&r)?)?;
    println!(
        "{} prompts, max |diff| {:.3e}, tolerance {:.1e}",
        r.prompts.len(),
        r.max_abs_diff(),
        a.tol
    );
    if !r.passed() {
        bail!("parity check failed");
    }
    Ok(())
}

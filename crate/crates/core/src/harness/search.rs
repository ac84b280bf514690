use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, EvalConfig, EvalReport, EvalSummary, PromptTemplate};
use crate::attribution::AttributionMatrix;
use crate::data::ConflictExample;
use crate::editing::{apply_edit, EditPlan};
use crate::error::{CoreError, Result};
use crate::model::{NeuronSite, TransformerModel};
use crate::selection::{select_context_neurons, SelectionConfig};

/// Seeded shuffle into (validation, test); validation takes the odd item.
pub fn split_dataset(
    dataset: &[ConflictExample],
    seed: u64,
) -> Result<(Vec<ConflictExample>, Vec<ConflictExample>)> {
    if dataset.len() < 2 {
        return Err(CoreError::Input(format!(
            "need at least 2 examples to split, got {}",
            dataset.len()
        )));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = dataset.len().div_ceil(2);
    let pick = |ids: &[usize]| ids.iter().map(|&i| dataset[i].clone()).collect::<Vec<_>>();
    Ok((pick(&idx[..n_val]), pick(&idx[n_val..])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub h_range: Vec<usize>,
    pub beta_range: Vec<f64>,
    pub t: f64,
    pub z: usize,
    pub eval: EvalConfig,
}

impl GridConfig {
    pub fn new(h_range: Vec<usize>, beta_range: Vec<f64>) -> Self {
        Self {
            h_range,
            beta_range,
            t: 0.10,
            z: 20,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub h: usize,
    pub beta: f64,
    pub validation: Option<EvalSummary>,
    /// Why the cell was not evaluated.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub chosen_h: usize,
    pub chosen_beta: f64,
    pub sites: Vec<NeuronSite>,
    pub baseline_validation: EvalSummary,
    pub baseline_test: EvalReport,
    pub test: EvalReport,
}

impl GridResult {
    /// `h,beta,split,acc,sr` for every evaluated cell plus the chosen test row.
    pub fn sweep_csv(&self) -> String {
        let mut s = String::from("h,beta,split,acc,sr\n");
        for c in &self.cells {
            if let Some(v) = &c.validation {
                writeln!(s, "{},{},validation,{},{}", c.h, c.beta, v.acc, v.sr).expect("write");
            }
        }
        writeln!(
            s,
            "{},{},test,{},{}",
            self.chosen_h, self.chosen_beta, self.test.acc, self.test.sr
        )
        .expect("write");
        s
    }
}

/// Sweeps `(h, beta)`, picks the best validation accuracy (ties: smaller
/// `h`, then smaller `beta`) and scores the winner on the test split.
pub fn grid_search(
    model: &TransformerModel,
    matrix: &AttributionMatrix,
    validation: &[ConflictExample],
    test: &[ConflictExample],
    template: &PromptTemplate,
    cfg: &GridConfig,
) -> Result<GridResult> {
    if cfg.h_range.is_empty() || cfg.beta_range.is_empty() {
        return Err(CoreError::Parameter("h and beta ranges must be non-empty".into()));
    }
    if let Some(b) = cfg.beta_range.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
        return Err(CoreError::Parameter(format!("invalid beta {b}")));
    }
    let baseline_validation = evaluate(model, validation, template, &cfg.eval)?.summary();
    let mut cells = Vec::with_capacity(cfg.h_range.len() * cfg.beta_range.len());
    let mut best: Option<(f64, usize, f64, Vec<NeuronSite>)> = None;
    for &h in &cfg.h_range {
        let sel = SelectionConfig { t: cfg.t, z: cfg.z, h };
        let sites = match select_context_neurons(matrix, &sel) {
            Ok((s, _)) => s.neuron_sites(),
            Err(e @ (CoreError::Selection { .. } | CoreError::Parameter(_))) => {
                log::warn!("skipping h = {h}: {e}");
                for &beta in &cfg.beta_range {
                    cells.push(GridCell {
                        h,
                        beta,
                        validation: None,
                        skipped: Some(e.to_string()),
                    });
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        for &beta in &cfg.beta_range {
            let edited = apply_edit(model, &EditPlan::reweight(sites.clone(), beta))?;
            let v = evaluate(&edited, validation, template, &cfg.eval)?.summary();
            let better = match &best {
                None => true,
                Some((acc, bh, bb, _)) => {
                    v.acc > *acc || (v.acc == *acc && (h < *bh || (h == *bh && beta < *bb)))
                }
            };
            if better {
                best = Some((v.acc, h, beta, sites.clone()));
            }
            cells.push(GridCell {
                h,
                beta,
                validation: Some(v),
                skipped: None,
            });
        }
    }
    let (_, chosen_h, chosen_beta, sites) = best.ok_or_else(|| CoreError::Selection {
        msg: "no feasible (h, beta) cell".into(),
        available: 0,
    })?;
    let edited = apply_edit(model, &EditPlan::reweight(sites.clone(), chosen_beta))?;
    Ok(GridResult {
        cells,
        chosen_h,
        chosen_beta,
        sites,
        baseline_validation,
        baseline_test: evaluate(model, test, template, &cfg.eval)?,
        test: evaluate(&edited, test, template, &cfg.eval)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub beta: f64,
    pub repeats: usize,
    pub baseline: EvalSummary,
    /// Selected neurons reweighted by `beta`.
    pub ircan: EvalSummary,
    /// Selected neurons erased.
    pub ercan: EvalSummary,
    /// Random neurons reweighted, one entry per repeat.
    pub ern: Vec<EvalSummary>,
    /// Random neurons erased, one entry per repeat.
    pub errn: Vec<EvalSummary>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl AblationReport {
    pub fn ern_mean(&self) -> EvalSummary {
        Self::average(&self.ern)
    }

    pub fn errn_mean(&self) -> EvalSummary {
        Self::average(&self.errn)
    }

    fn average(v: &[EvalSummary]) -> EvalSummary {
        EvalSummary {
            n: v.first().map_or(0, |s| s.n),
            acc: mean(v.iter().map(|s| s.acc)),
            sr: mean(v.iter().map(|s| s.sr)),
        }
    }

    /// One row per arm: `arm,acc,sr` (random arms averaged).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,acc,sr\n");
        for (name, r) in [
            ("original", self.baseline),
            ("ircan", self.ircan),
            ("ercan", self.ercan),
            ("ern", self.ern_mean()),
            ("errn", self.errn_mean()),
        ] {
            writeln!(s, "{name},{},{}", r.acc, r.sr).expect("write");
        }
        s
    }
}

/// Runs the four intervention arms against the unedited model.
///
/// Random arms draw as many sites as `selected` holds, never from `selected`,
/// with one seed per repeat derived from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn ablation_suite(
    model: &TransformerModel,
    selected: &[NeuronSite],
    dataset: &[ConflictExample],
    template: &PromptTemplate,
    beta: f64,
    repeats: usize,
    seed: u64,
    eval: &EvalConfig,
) -> Result<AblationReport> {
    if repeats == 0 {
        return Err(CoreError::Parameter("repeats must be at least 1".into()));
    }
    let run = |plan: &EditPlan| -> Result<EvalSummary> {
        Ok(evaluate(&apply_edit(model, plan)?, dataset, template, eval)?.summary())
    };
    let baseline = evaluate(model, dataset, template, eval)?.summary();
    let ircan = run(&EditPlan::reweight(selected.to_vec(), beta))?;
    let ercan = run(&EditPlan::erase(selected.to_vec()))?;
    let exclude: BTreeSet<NeuronSite> = selected.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..repeats).map(|_| rng.random()).collect();
    let mut ern = Vec::with_capacity(repeats);
    let mut errn = Vec::with_capacity(repeats);
    let c = model.config();
    for &s in &seeds {
        ern.push(run(&EditPlan::random_reweight(c, selected.len(), beta, s, &exclude)?)?);
        errn.push(run(&EditPlan::random_erase(c, selected.len(), s, &exclude)?)?);
    }
    Ok(AblationReport {
        beta,
        repeats,
        baseline,
        ircan,
        ercan,
        ern,
        errn,
    })
}

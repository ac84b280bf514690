//! Reweighting, erasure and random-control edits of feed-forward neurons.
//!
//! An edit multiplies a neuron's outgoing weights (its row of the
//! down-projection) by `beta`. The edited model keeps the untouched
//! original rows together with a cumulative scale per row, and every
//! effective row is recomputed as `original * scale`. That makes
//! `apply(b1)` then `apply(b2)` produce the same bits as `apply(b1 * b2)`,
//! and makes [`revert`] an exact restore, erasures included.

use std::collections::{BTreeMap, BTreeSet};

use numcore::Tensor;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::config::{FfnKind, ModelConfig, NeuronSite};
use crate::model::transformer::{down_proj_name, layer_name, TransformerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Reweight,
    Erase,
    RandomReweight,
    RandomErase,
}

impl EditKind {
    pub fn is_erase(self) -> bool {
        matches!(self, EditKind::Erase | EditKind::RandomErase)
    }

    pub fn is_random(self) -> bool {
        matches!(self, EditKind::RandomReweight | EditKind::RandomErase)
    }
}

/// Which weights of a neuron get scaled.
///
/// `Outgoing` is the default. `Incoming` scales the weights that produce the
/// activation instead (`w_in` column and `b_in` entry, or the `w_gate` and
/// `w_up` columns); it exists for comparison only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditTarget {
    #[default]
    Outgoing,
    Incoming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub sites: Vec<NeuronSite>,
    pub beta: f64,
    pub kind: EditKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub target: EditTarget,
}

impl EditPlan {
    pub fn reweight(sites: Vec<NeuronSite>, beta: f64) -> Self {
        Self {
            sites,
            beta,
            kind: EditKind::Reweight,
            seed: None,
            target: EditTarget::Outgoing,
        }
    }

    pub fn erase(sites: Vec<NeuronSite>) -> Self {
        Self {
            sites,
            beta: 0.0,
            kind: EditKind::Erase,
            seed: None,
            target: EditTarget::Outgoing,
        }
    }

    /// Reweights `n` random sites outside `exclude`.
    pub fn random_reweight(
        config: &ModelConfig,
        n: usize,
        beta: f64,
        seed: u64,
        exclude: &BTreeSet<NeuronSite>,
    ) -> Result<Self> {
        Ok(Self {
            sites: random_sites(config, n, seed, exclude)?,
            beta,
            kind: EditKind::RandomReweight,
            seed: Some(seed),
            target: EditTarget::Outgoing,
        })
    }

    pub fn random_erase(
        config: &ModelConfig,
        n: usize,
        seed: u64,
        exclude: &BTreeSet<NeuronSite>,
    ) -> Result<Self> {
        Ok(Self {
            sites: random_sites(config, n, seed, exclude)?,
            beta: 0.0,
            kind: EditKind::RandomErase,
            seed: Some(seed),
            target: EditTarget::Outgoing,
        })
    }

    pub fn with_target(mut self, target: EditTarget) -> Self {
        self.target = target;
        self
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(CoreError::Parameter(format!(
                "beta must be finite and non-negative, got {}",
                self.beta
            )));
        }
        if self.kind.is_erase() && self.beta != 0.0 {
            return Err(CoreError::Parameter(format!(
                "erase edits need beta 0, got {}",
                self.beta
            )));
        }
        if self.kind.is_random() && self.seed.is_none() {
            return Err(CoreError::Parameter("random edits need a seed".into()));
        }
        let mut seen = BTreeSet::new();
        for &s in &self.sites {
            config.check_site(s)?;
            if !seen.insert(s) {
                return Err(CoreError::Parameter(format!("site {s} listed twice")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Row,
    Col,
}

/// One slice of a weight tensor as it was before any edit, and its current scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedSlice {
    pub tensor: String,
    pub axis: Axis,
    pub index: usize,
    pub original: Vec<f64>,
    pub scale: f64,
}

/// Everything an edited model needs to undo its edits.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EditState {
    pub plans: Vec<EditPlan>,
    pub saved: Vec<SavedSlice>,
}

fn slices_for(config: &ModelConfig, site: NeuronSite, target: EditTarget) -> Vec<(String, Axis)> {
    let l = site.layer;
    match (target, config.ffn_kind) {
        (EditTarget::Outgoing, _) => vec![(down_proj_name(config, l), Axis::Row)],
        (EditTarget::Incoming, FfnKind::Plain) => vec![
            (layer_name(l, "ffn.w_in"), Axis::Col),
            (layer_name(l, "ffn.b_in"), Axis::Col),
        ],
        (EditTarget::Incoming, FfnKind::Gated) => vec![
            (layer_name(l, "ffn.w_gate"), Axis::Col),
            (layer_name(l, "ffn.w_up"), Axis::Col),
        ],
    }
}

/// Flat indices of a row or column; vectors are treated as a single row.
fn slice_indices(shape: &[usize], axis: Axis, index: usize) -> Vec<usize> {
    let (rows, cols) = match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("weights are vectors or matrices"),
    };
    match (axis, shape.len()) {
        (_, 1) => vec![index],
        (Axis::Row, _) => (index * cols..(index + 1) * cols).collect(),
        (Axis::Col, _) => (0..rows).map(|r| r * cols + index).collect(),
    }
}

/// Returns an edited copy of `model`; the source is left untouched.
pub fn apply_edit(model: &TransformerModel, plan: &EditPlan) -> Result<TransformerModel> {
    plan.validate(model.config())?;
    let mut out = model.clone();
    let mut state = out.edit.take().unwrap_or_default();
    let mut pending: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &site in &plan.sites {
        for (tensor, axis) in slices_for(model.config(), site, plan.target) {
            let index = site.neuron;
            let current = model.weight(&tensor)?;
            let idx = slice_indices(current.shape(), axis, index);
            let pos = match state
                .saved
                .iter()
                .position(|s| s.tensor == tensor && s.axis == axis && s.index == index)
            {
                Some(p) => p,
                None => {
                    state.saved.push(SavedSlice {
                        tensor: tensor.clone(),
                        axis,
                        index,
                        original: idx.iter().map(|&i| current.data()[i]).collect(),
                        scale: 1.0,
                    });
                    state.saved.len() - 1
                }
            };
            let slot = &mut state.saved[pos];
            slot.scale *= plan.beta;
            let data = pending
                .entry(tensor.clone())
                .or_insert_with(|| current.to_vec());
            for (&i, &orig) in idx.iter().zip(&slot.original) {
                data[i] = orig * slot.scale;
            }
        }
    }
    for (name, data) in pending {
        let shape = model.weight(&name)?.shape().to_vec();
        out.weights_mut().insert(name, Tensor::new(shape, data)?);
    }
    state.plans.push(plan.clone());
    out.edit = Some(state);
    Ok(out)
}

/// Restores the weights the model had before its first edit.
pub fn revert(model: &TransformerModel) -> Result<TransformerModel> {
    let state = model
        .edit
        .as_ref()
        .ok_or_else(|| CoreError::State("model carries no edit to revert".into()))?;
    let mut out = model.clone();
    let mut pending: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in &state.saved {
        let current = model.weight(&s.tensor)?;
        let data = pending
            .entry(s.tensor.clone())
            .or_insert_with(|| current.to_vec());
        for (&i, &orig) in slice_indices(current.shape(), s.axis, s.index)
            .iter()
            .zip(&s.original)
        {
            data[i] = orig;
        }
    }
    for (name, data) in pending {
        let shape = model.weight(&name)?.shape().to_vec();
        out.weights_mut().insert(name, Tensor::new(shape, data)?);
    }
    out.edit = None;
    Ok(out)
}

/// `n` distinct sites drawn uniformly from those not in `exclude`.
pub fn random_sites(
    config: &ModelConfig,
    n: usize,
    seed: u64,
    exclude: &BTreeSet<NeuronSite>,
) -> Result<Vec<NeuronSite>> {
    let pool: Vec<NeuronSite> = config.sites().filter(|s| !exclude.contains(s)).collect();
    if n > pool.len() {
        return Err(CoreError::Selection {
            msg: format!("cannot draw {n} random sites"),
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

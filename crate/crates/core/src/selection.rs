//! From attribution scores to a shared set of context-aware neurons.
//!
//! Per example, sites scoring at least `t * max` survive (none survive when
//! the maximum is not positive) and the best `z` survivors form that
//! example's candidate set. Sites are then ranked by how many candidate sets
//! contain them.
//!
//! Ties: equal scores order by `(layer, neuron)`; equal counts order by the
//! higher mean score over all examples, then `(layer, neuron)`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMatrix;
use crate::error::{CoreError, Result};
use crate::model::NeuronSite;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub t: f64,
    pub z: usize,
    pub h: usize,
}

impl SelectionConfig {
    pub fn new(h: usize) -> Self {
        Self { t: 0.10, z: 20, h }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(CoreError::Parameter(format!("t must lie in (0, 1], got {}", self.t)));
        }
        if self.z == 0 {
            return Err(CoreError::Parameter("z must be at least 1".into()));
        }
        if self.h == 0 {
            return Err(CoreError::Parameter("h must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sites with `score >= t * max`; empty when the maximum is not positive.
pub fn threshold_filter(scores: &[(NeuronSite, f64)], t: f64) -> Vec<(NeuronSite, f64)> {
    let max = scores.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(max > 0.0) {
        return Vec::new();
    }
    let cut = t * max;
    scores.iter().copied().filter(|&(_, s)| s >= cut).collect()
}

fn by_score(a: &(NeuronSite, f64), b: &(NeuronSite, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// At most `z` sites, best score first.
pub fn topk_candidates(scores: &[(NeuronSite, f64)], z: usize) -> Vec<NeuronSite> {
    let mut v = scores.to_vec();
    v.sort_by(by_score);
    v.into_iter().take(z).map(|(s, _)| s).collect()
}

fn row_scores(matrix: &AttributionMatrix, row: usize) -> Vec<(NeuronSite, f64)> {
    matrix.rows[row]
        .scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (matrix.site(i), s))
        .collect()
}

pub fn candidate_sets(matrix: &AttributionMatrix, t: f64, z: usize) -> Vec<Vec<NeuronSite>> {
    (0..matrix.rows.len())
        .map(|r| topk_candidates(&threshold_filter(&row_scores(matrix, r), t), z))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedSite {
    pub layer: usize,
    pub neuron: usize,
    pub count: usize,
    pub mean_score: f64,
}

impl SelectedSite {
    pub fn site(&self) -> NeuronSite {
        NeuronSite::new(self.layer, self.neuron)
    }
}

/// Every candidate site with its co-occurrence count, in selection order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceTable {
    pub ranked: Vec<SelectedSite>,
}

impl CooccurrenceTable {
    pub fn count(&self, site: NeuronSite) -> usize {
        self.ranked
            .iter()
            .find(|s| s.site() == site)
            .map_or(0, |s| s.count)
    }
}

/// Mean over examples, summed in sorted order so row order cannot change it.
fn mean_score(matrix: &AttributionMatrix, idx: usize) -> f64 {
    let mut col: Vec<f64> = matrix.rows.iter().map(|r| r.scores[idx]).collect();
    col.sort_by(f64::total_cmp);
    col.iter().sum::<f64>() / matrix.rows.len().max(1) as f64
}

pub fn cooccurrence(matrix: &AttributionMatrix, t: f64, z: usize) -> CooccurrenceTable {
    let mut counts: BTreeMap<NeuronSite, usize> = BTreeMap::new();
    for set in candidate_sets(matrix, t, z) {
        for s in set {
            *counts.entry(s).or_default() += 1;
        }
    }
    let mut ranked: Vec<SelectedSite> = counts
        .into_iter()
        .map(|(site, count)| {
            let idx = matrix.index(site);
            let mean_score = mean_score(matrix, idx);
            SelectedSite {
                layer: site.layer,
                neuron: site.neuron,
                count,
                mean_score,
            }
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(b.mean_score.total_cmp(&a.mean_score))
            .then(a.site().cmp(&b.site()))
    });
    CooccurrenceTable { ranked }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub config: SelectionConfig,
    pub sites: Vec<SelectedSite>,
}

impl Selection {
    pub fn neuron_sites(&self) -> Vec<NeuronSite> {
        self.sites.iter().map(SelectedSite::site).collect()
    }
}

pub fn select_context_neurons(
    matrix: &AttributionMatrix,
    config: &SelectionConfig,
) -> Result<(Selection, CooccurrenceTable)> {
    config.validate()?;
    if matrix.rows.is_empty() {
        return Err(CoreError::Selection {
            msg: "attribution matrix has no examples".into(),
            available: 0,
        });
    }
    let table = cooccurrence(matrix, config.t, config.z);
    if config.h > table.ranked.len() {
        return Err(CoreError::Selection {
            msg: format!("h = {} exceeds the number of distinct candidate sites", config.h),
            available: table.ranked.len(),
        });
    }
    let sites = table.ranked[..config.h].to_vec();
    Ok((
        Selection {
            config: *config,
            sites,
        },
        table,
    ))
}

pub fn layer_histogram<'a>(
    sites: impl IntoIterator<Item = &'a NeuronSite>,
    n_layers: usize,
) -> Vec<usize> {
    let mut h = vec![0; n_layers];
    for s in sites {
        if s.layer < n_layers {
            h[s.layer] += 1;
        }
    }
    h
}

pub fn histogram_csv(hist: &[usize]) -> String {
    let mut s = String::from("layer,count\n");
    for (l, c) in hist.iter().enumerate() {
        writeln!(s, "{l},{c}").expect("write to String");
    }
    s
}

/// Fraction of shared sites among the top `k` of two co-occurrence rankings.
///
/// Rankings are extended past the candidate sites by mean score so that `k`
/// may be as large as the number of sites.
pub fn prompt_overlap(a: &AttributionMatrix, b: &AttributionMatrix, k: usize, t: f64, z: usize) -> Result<f64> {
    if a.n_layers != b.n_layers || a.d_ff != b.d_ff {
        return Err(CoreError::Input("matrices come from different model shapes".into()));
    }
    if k == 0 || k > a.n_sites() {
        return Err(CoreError::Selection {
            msg: format!("k = {k} is not within 1..=number of sites"),
            available: a.n_sites(),
        });
    }
    let ta: BTreeSet<NeuronSite> = full_ranking(a, t, z).into_iter().take(k).collect();
    let tb: BTreeSet<NeuronSite> = full_ranking(b, t, z).into_iter().take(k).collect();
    Ok(ta.intersection(&tb).count() as f64 / k as f64)
}

/// Candidates by co-occurrence, then the remaining sites by mean score.
pub fn full_ranking(matrix: &AttributionMatrix, t: f64, z: usize) -> Vec<NeuronSite> {
    let table = cooccurrence(matrix, t, z);
    let mut out: Vec<NeuronSite> = table.ranked.iter().map(SelectedSite::site).collect();
    let taken: BTreeSet<NeuronSite> = out.iter().copied().collect();
    let mut rest: Vec<(NeuronSite, f64)> = (0..matrix.n_sites())
        .map(|i| matrix.site(i))
        .filter(|s| !taken.contains(s))
        .map(|s| {
            (s, mean_score(matrix, matrix.index(s)))
        })
        .collect();
    rest.sort_by(by_score);
    out.extend(rest.into_iter().map(|(s, _)| s));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::ExampleScores;

    fn s(l: usize, n: usize) -> NeuronSite {
        NeuronSite::new(l, n)
    }

    #[test]
    fn threshold_examples() {
        let sc = vec![(s(0, 0), 10.0), (s(0, 1), 5.0), (s(0, 2), 0.5)];
        let kept: Vec<_> = threshold_filter(&sc, 0.1).into_iter().map(|x| x.0).collect();
        assert_eq!(kept, vec![s(0, 0), s(0, 1)]);
        let eq = vec![(s(0, 0), 2.0), (s(0, 1), 2.0)];
        assert_eq!(threshold_filter(&eq, 0.1).len(), 2);
        assert_eq!(threshold_filter(&sc, 1.0), vec![(s(0, 0), 10.0)]);
        let neg = vec![(s(0, 0), -1.0), (s(0, 1), 0.0)];
        assert!(threshold_filter(&neg, 0.1).is_empty());
    }

    #[test]
    fn topk_examples() {
        let sc = vec![(s(0, 0), 3.0), (s(0, 1), 1.0), (s(0, 2), 2.0), (s(0, 3), 5.0)];
        assert_eq!(topk_candidates(&sc, 2), vec![s(0, 3), s(0, 0)]);
        assert_eq!(topk_candidates(&sc, 10).len(), 4);
        let tie = vec![(s(1, 0), 1.0), (s(0, 5), 1.0)];
        assert_eq!(topk_candidates(&tie, 1), vec![s(0, 5)]);
    }

    fn matrix(rows: Vec<Vec<f64>>) -> AttributionMatrix {
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(i, scores)| ExampleScores { id: format!("e{i}"), scores })
            .collect();
        AttributionMatrix::new(1, 3, rows).unwrap()
    }

    #[test]
    fn shared_site_wins() {
        // candidate sets {A,B}, {B,C}, {B}
        let m = matrix(vec![vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0], vec![0.0, 1.0, 0.0]]);
        let (sel, table) = select_context_neurons(&m, &SelectionConfig::new(1)).unwrap();
        assert_eq!(sel.neuron_sites(), vec![s(0, 1)]);
        assert_eq!(table.count(s(0, 1)), 3);
        let err = select_context_neurons(&m, &SelectionConfig::new(4)).unwrap_err();
        assert!(matches!(err, CoreError::Selection { available: 3, .. }));
    }

    #[test]
    fn overlap_bounds() {
        let m = matrix(vec![vec![1.0, 2.0, 3.0]]);
        assert_eq!(prompt_overlap(&m, &m, 3, 0.1, 20).unwrap(), 1.0);
        let other = matrix(vec![vec![3.0, 2.0, 1.0]]);
        assert_eq!(prompt_overlap(&m, &other, 1, 0.1, 20).unwrap(), 0.0);
        assert!(prompt_overlap(&m, &m, 4, 0.1, 20).is_err());
    }

    #[test]
    fn histogram() {
        assert_eq!(layer_histogram(&[], 3), vec![0, 0, 0]);
        let sites = [s(3, 0), s(3, 1)];
        assert_eq!(layer_histogram(&sites, 4), vec![0, 0, 0, 2]);
        assert_eq!(histogram_csv(&[1, 2]), "layer,count\n0,1\n1,2\n");
    }
}

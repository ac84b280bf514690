use std::collections::HashMap;

use ircan_core::attribution::{AttributionMatrix, ExampleScores};
use ircan_core::model::NeuronSite;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LAYERS: usize = 2;
pub const D_FF: usize = 16;

pub fn matrix(rows: Vec<Vec<f64>>) -> AttributionMatrix {
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(i, scores)| ExampleScores {
            id: format!("e{i}"),
            scores,
        })
        .collect();
    AttributionMatrix::new(LAYERS, D_FF, rows).unwrap()
}

pub fn site_of(i: usize) -> NeuronSite {
    NeuronSite::new(i / D_FF, i % D_FF)
}

/// Recount written without sorting helpers: repeated best-pick over plain loops.
pub fn brute_force(rows: &[Vec<f64>], t: f64, z: usize, h: usize) -> Vec<(NeuronSite, usize)> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for row in rows {
        let mut max = f64::NEG_INFINITY;
        for &s in row {
            if s > max {
                max = s;
            }
        }
        if max <= 0.0 {
            continue;
        }
        let mut alive: Vec<usize> = (0..row.len()).filter(|&i| row[i] >= t * max).collect();
        for _ in 0..z {
            if alive.is_empty() {
                break;
            }
            // highest score, lowest index on ties (index order is (layer, neuron) order)
            let mut best = 0;
            for k in 1..alive.len() {
                if row[alive[k]] > row[alive[best]] {
                    best = k;
                }
            }
            *counts.entry(alive.remove(best)).or_insert(0) += 1;
        }
    }
    let mean = |i: usize| {
        let mut col: Vec<f64> = rows.iter().map(|r| r[i]).collect();
        col.sort_by(f64::total_cmp);
        col.iter().sum::<f64>() / rows.len() as f64
    };
    let mut pool: Vec<usize> = counts.keys().copied().collect();
    pool.sort();
    let mut out = Vec::new();
    for _ in 0..h.min(pool.len()) {
        let mut best = 0;
        for k in 1..pool.len() {
            let (a, b) = (pool[k], pool[best]);
            let better = counts[&a] > counts[&b] || (counts[&a] == counts[&b] && mean(a) > mean(b));
            if better {
                best = k;
            }
        }
        let i = pool.remove(best);
        out.push((site_of(i), counts[&i]));
    }
    out
}

/// Ten examples over 2 x 16 sites with coarse integer scores, so score,
/// count and mean ties all occur.
pub fn fixture() -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut rows: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..LAYERS * D_FF).map(|_| rng.random_range(-3..10) as f64).collect())
        .collect();
    // an all-negative example contributes no candidates
    rows[3] = vec![-1.0; LAYERS * D_FF];
    // two examples that are exact copies tie every score pairwise
    rows[7] = rows[6].clone();
    rows
}


//! Minimal next-token trainer for desk-scale fact memorisation.

use std::collections::BTreeMap;

use numcore::{Graph, NumError, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::config::ModelConfig;
use crate::model::tokenizer::Tokenizer;
use crate::model::transformer::TransformerModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl TrainConfig {
    pub fn new(steps: usize, lr: f64, seed: u64) -> Self {
        Self {
            steps,
            lr,
            seed,
            batch_size: 16,
            optimizer: Optimizer::Adam,
            clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss at every step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn first_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one step")
    }
}

type Grads = BTreeMap<String, Vec<f64>>;

fn sequence_grad(model: &TransformerModel, seq: &[u32]) -> Result<(f64, Grads)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let input = &seq[..seq.len() - 1];
    let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
    let f = model.forward_graph(&mut g, &p, input, &[], true)?;
    let loss = g.cross_entropy(f.logits, &targets)?;
    let value = g.value(loss)?.item()?;
    let grads = g.backward(loss)?;
    let mut out = Grads::new();
    for (name, &v) in &p {
        out.insert(name.clone(), grads.wrt(v)?.to_vec());
    }
    Ok((value, out))
}

struct AdamState {
    m: Grads,
    v: Grads,
    t: i32,
}

/// Trains a fresh model on `corpus` (one training sequence per line, each
/// followed by the end-of-sequence token).
///
/// Per-sequence gradients are computed in parallel and summed in batch order,
/// so the result depends only on the seed.
pub fn train_toy(
    config: ModelConfig,
    tokenizer: Tokenizer,
    corpus: &[String],
    train: &TrainConfig,
) -> Result<(TransformerModel, TrainReport)> {
    if train.steps == 0 {
        return Err(CoreError::Parameter("steps must be at least 1".into()));
    }
    if train.batch_size == 0 {
        return Err(CoreError::Parameter("batch_size must be at least 1".into()));
    }
    if !(train.lr > 0.0 && train.lr.is_finite()) {
        return Err(CoreError::Parameter(format!("invalid learning rate {}", train.lr)));
    }
    let eos = tokenizer.eos_id();
    let mut seqs = Vec::with_capacity(corpus.len());
    for (i, line) in corpus.iter().enumerate() {
        let mut ids = tokenizer
            .tokenize(line)
            .map_err(|e| CoreError::Input(format!("corpus line {}: {e}", i + 1)))?;
        ids.push(eos);
        if ids.len() - 1 > config.max_seq_len {
            return Err(CoreError::Input(format!(
                "corpus line {} has {} tokens, max_seq_len is {}",
                i + 1,
                ids.len() - 1,
                config.max_seq_len
            )));
        }
        if ids.len() >= 2 {
            seqs.push(ids);
        }
    }
    if seqs.is_empty() {
        return Err(CoreError::Input("corpus has no trainable lines".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let init_seed = rand::Rng::random::<u64>(&mut rng);
    let mut model = TransformerModel::random(config, tokenizer, init_seed)?;
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut cursor = order.len();
    let mut adam = AdamState {
        m: Grads::new(),
        v: Grads::new(),
        t: 0,
    };
    let mut losses = Vec::with_capacity(train.steps);

    for step in 0..train.steps {
        let mut batch = Vec::with_capacity(train.batch_size);
        while batch.len() < train.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let results: Vec<Result<(f64, Grads)>> = batch
            .par_iter()
            .map(|&i| sequence_grad(&model, &seqs[i]))
            .collect();
        let mut loss = 0.0;
        let mut total: Option<Grads> = None;
        for r in results {
            let (l, g) = r.map_err(|e| match e {
                CoreError::Num(NumError::NonFinite { .. }) => CoreError::Training {
                    step,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            loss += l;
            match &mut total {
                None => total = Some(g),
                Some(acc) => {
                    for (name, v) in g {
                        let a = acc.get_mut(&name).expect("same parameter set");
                        a.iter_mut().zip(&v).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let n = batch.len() as f64;
        loss /= n;
        if !loss.is_finite() {
            return Err(CoreError::Training { step, loss });
        }
        losses.push(loss);
        let mut grads = total.expect("non-empty batch");
        let mut sq = 0.0;
        for v in grads.values_mut() {
            for x in v.iter_mut() {
                *x /= n;
                sq += *x * *x;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(CoreError::Training { step, loss: f64::NAN });
        }
        let factor = match train.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        adam.t += 1;
        let weights = model.weights_mut();
        for (name, g) in grads {
            let t = weights.get_mut(&name).expect("parameter exists");
            let mut w = t.to_vec();
            match train.optimizer {
                Optimizer::Sgd => {
                    for (wi, gi) in w.iter_mut().zip(&g) {
                        *wi -= train.lr * factor * gi;
                    }
                }
                Optimizer::Adam => {
                    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                    let m = adam.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = adam.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - f64::powi(b1, adam.t);
                    let c2 = 1.0 - f64::powi(b2, adam.t);
                    for i in 0..w.len() {
                        let gi = g[i] * factor;
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        w[i] -= train.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
            *t = Tensor::new(t.shape().to_vec(), w).map_err(|_| CoreError::Training {
                step,
                loss: f64::NAN,
            })?;
        }
        if step % 100 == 0 {
            log::debug!("step {step} loss {loss:.4}");
        }
    }
    Ok((model, TrainReport { losses }))
}

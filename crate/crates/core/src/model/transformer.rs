//! Decoder-only transformer with activation recording and overriding.
//!
//! Weights are stored by name (see [`weight_shapes`]) in `[in, out]` layout,
//! so `x · W` is a linear layer and row `i` of a down-projection holds
//! neuron `i`'s outgoing weights.
//!
//! The "activation" of a neuron is the value that enters the down-projection:
//! `gelu(·)` for plain blocks and `silu(gate) · up` for gated blocks.
//! Activations are read and overridden at the final input position only.

use std::collections::{BTreeMap, HashMap};

use numcore::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::editing::EditState;
use crate::error::{CoreError, Result};
use crate::model::config::{FfnKind, ModelConfig, NeuronSite, PositionKind};
use crate::model::tokenizer::Tokenizer;

/// Fixed activation values for a forward pass, applied at the final position.
pub type Overrides = BTreeMap<NeuronSite, f64>;

pub const TOK_EMBED: &str = "tok_embed";
pub const POS_EMBED: &str = "pos_embed";
pub const FINAL_NORM_W: &str = "final_norm.weight";
pub const FINAL_NORM_B: &str = "final_norm.bias";
pub const LM_HEAD: &str = "lm_head";

pub fn layer_name(layer: usize, suffix: &str) -> String {
    format!("layers.{layer}.{suffix}")
}

/// Name of the tensor whose row `i` carries neuron `i`'s outgoing weights.
pub fn down_proj_name(config: &ModelConfig, layer: usize) -> String {
    match config.ffn_kind {
        FfnKind::Plain => layer_name(layer, "ffn.w_out"),
        FfnKind::Gated => layer_name(layer, "ffn.w_down"),
    }
}

/// Every tensor the architecture needs, with its exact shape.
pub fn weight_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
    let plain = c.ffn_kind == FfnKind::Plain;
    let mut out = vec![(TOK_EMBED.to_string(), vec![v, d])];
    if c.position_kind == PositionKind::Learned {
        out.push((POS_EMBED.to_string(), vec![c.max_seq_len, d]));
    }
    for l in 0..c.n_layers {
        let mut push = |s: &str, shape: Vec<usize>| out.push((layer_name(l, s), shape));
        push("attn_norm.weight", vec![d]);
        if plain {
            push("attn_norm.bias", vec![d]);
        }
        for w in ["wq", "wk", "wv", "wo"] {
            push(&format!("attn.{w}"), vec![d, d]);
        }
        if plain {
            for b in ["bq", "bk", "bv", "bo"] {
                push(&format!("attn.{b}"), vec![d]);
            }
        }
        push("ffn_norm.weight", vec![d]);
        if plain {
            push("ffn_norm.bias", vec![d]);
            push("ffn.w_in", vec![d, f]);
            push("ffn.b_in", vec![f]);
            push("ffn.w_out", vec![f, d]);
            push("ffn.b_out", vec![d]);
        } else {
            push("ffn.w_gate", vec![d, f]);
            push("ffn.w_up", vec![d, f]);
            push("ffn.w_down", vec![f, d]);
        }
    }
    out.push((FINAL_NORM_W.to_string(), vec![d]));
    if plain {
        out.push((FINAL_NORM_B.to_string(), vec![d]));
    }
    out.push((LM_HEAD.to_string(), vec![d, v]));
    out
}

fn is_norm_gain(name: &str) -> bool {
    name.ends_with("norm.weight")
}

fn is_bias(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|last| last.starts_with('b'))
}

/// Post-nonlinearity activations at the final input position.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub(crate) layers: Vec<Vec<f64>>,
}

impl ActivationTrace {
    pub fn get(&self, site: NeuronSite) -> f64 {
        self.layers[site.layer][site.neuron]
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.layers[layer]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

/// An override whose values are graph nodes (usually leaves).
#[derive(Debug, Clone)]
pub(crate) struct LayerOverride {
    pub layer: usize,
    pub cols: Vec<usize>,
    pub values: Var,
}

pub(crate) struct Forward {
    pub logits: Var,
    pub acts: Vec<Var>,
    pub residual: Var,
}

pub(crate) type Params = HashMap<String, Var>;

#[derive(Debug, Clone)]
pub struct TransformerModel {
    config: ModelConfig,
    tokenizer: Tokenizer,
    weights: BTreeMap<String, Tensor>,
    pub(crate) edit: Option<EditState>,
}

impl TransformerModel {
    /// Assembles a model, checking that every architectural tensor is present with its shape.
    pub fn from_weights(
        config: ModelConfig,
        tokenizer: Tokenizer,
        weights: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(CoreError::Config(format!(
                "tokenizer has {} tokens but vocab_size is {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        for (name, shape) in weight_shapes(&config) {
            match weights.get(&name) {
                None => {
                    return Err(CoreError::Format {
                        tensor: name,
                        msg: "missing tensor".into(),
                    })
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(CoreError::Format {
                        msg: format!("expected shape {shape:?}, found {:?}", t.shape()),
                        tensor: name,
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = weights
            .keys()
            .find(|k| !weight_shapes(&config).iter().any(|(n, _)| n == *k))
        {
            return Err(CoreError::Format {
                tensor: extra.clone(),
                msg: "not part of the architecture".into(),
            });
        }
        Ok(Self {
            config,
            tokenizer,
            weights,
            edit: None,
        })
    }

    /// Randomly initialised model; norm gains start at 1 and biases at 0.
    pub fn random(config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = BTreeMap::new();
        for (name, shape) in weight_shapes(&config) {
            let n: usize = shape.iter().product();
            let data = if is_norm_gain(&name) {
                vec![1.0; n]
            } else if is_bias(&name) {
                vec![0.0; n]
            } else {
                let fan_in = if name == TOK_EMBED || name == POS_EMBED {
                    config.d_model
                } else {
                    shape[0]
                };
                let std = if name.ends_with("wo") || name.ends_with("w_out") || name.ends_with("w_down") {
                    0.5 / (fan_in as f64).sqrt()
                } else {
                    1.0 / (fan_in as f64).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            weights.insert(name, Tensor::new(shape, data)?);
        }
        Self::from_weights(config, tokenizer, weights)
    }

    /// Model whose every weight is zero (norm gains included).
    pub fn zeros(config: ModelConfig, tokenizer: Tokenizer) -> Result<Self> {
        let weights = weight_shapes(&config)
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s)))
            .collect();
        Self::from_weights(config, tokenizer, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor> {
        self.weights.get(name).ok_or_else(|| CoreError::Format {
            tensor: name.into(),
            msg: "missing tensor".into(),
        })
    }

    pub(crate) fn weights_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.weights
    }

    pub fn edit_state(&self) -> Option<&EditState> {
        self.edit.as_ref()
    }

    pub(crate) fn bind(&self, g: &mut Graph, trainable: bool) -> Params {
        self.weights
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(CoreError::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(CoreError::Input(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(CoreError::Input(format!("token id {t} out of vocabulary")));
        }
        Ok(())
    }

    fn norm(&self, g: &mut Graph, p: &Params, x: Var, prefix: &str) -> Result<Var> {
        let gain = p[&format!("{prefix}.weight")];
        Ok(match self.config.ffn_kind {
            FfnKind::Plain => {
                let bias = p[&format!("{prefix}.bias")];
                g.layer_norm(x, gain, bias, self.config.norm_eps)?
            }
            FfnKind::Gated => g.rms_norm(x, gain, self.config.norm_eps)?,
        })
    }

    fn linear(&self, g: &mut Graph, p: &Params, x: Var, w: &str, b: Option<&str>) -> Result<Var> {
        let y = g.matmul(x, p[w])?;
        match (self.config.ffn_kind, b) {
            (FfnKind::Plain, Some(b)) => Ok(g.add_row(y, p[b])?),
            _ => Ok(y),
        }
    }

    fn attention(&self, g: &mut Graph, p: &Params, h: Var, l: usize) -> Result<Var> {
        let c = &self.config;
        let n = |s: &str| layer_name(l, s);
        let mut q = self.linear(g, p, h, &n("attn.wq"), Some(&n("attn.bq")))?;
        let mut k = self.linear(g, p, h, &n("attn.wk"), Some(&n("attn.bk")))?;
        let v = self.linear(g, p, h, &n("attn.wv"), Some(&n("attn.bv")))?;
        if c.position_kind == PositionKind::Rotary {
            q = g.rope(q, c.n_heads, c.rope_base)?;
            k = g.rope(k, c.n_heads, c.rope_base)?;
        }
        let hd = c.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(c.n_heads);
        for head in 0..c.n_heads {
            let qh = g.slice_cols(q, head * hd, hd)?;
            let kh = g.slice_cols(k, head * hd, hd)?;
            let vh = g.slice_cols(v, head * hd, hd)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let probs = g.causal_softmax(scores)?;
            heads.push(g.matmul(probs, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        self.linear(g, p, cat, &n("attn.wo"), Some(&n("attn.bo")))
    }

    /// Returns the feed-forward output and the (possibly overridden) activation matrix.
    fn ffn(
        &self,
        g: &mut Graph,
        p: &Params,
        h: Var,
        l: usize,
        last_row: usize,
        overrides: &[LayerOverride],
    ) -> Result<(Var, Var)> {
        let n = |s: &str| layer_name(l, s);
        let mut act = match self.config.ffn_kind {
            FfnKind::Plain => {
                let pre = self.linear(g, p, h, &n("ffn.w_in"), Some(&n("ffn.b_in")))?;
                g.gelu(pre)?
            }
            FfnKind::Gated => {
                let gate = g.matmul(h, p[&n("ffn.w_gate")])?;
                let gate = g.silu(gate)?;
                let up = g.matmul(h, p[&n("ffn.w_up")])?;
                g.mul(gate, up)?
            }
        };
        for o in overrides.iter().filter(|o| o.layer == l) {
            act = g.override_entries(act, last_row, &o.cols, o.values)?;
        }
        let out = match self.config.ffn_kind {
            FfnKind::Plain => self.linear(g, p, act, &n("ffn.w_out"), Some(&n("ffn.b_out")))?,
            FfnKind::Gated => g.matmul(act, p[&n("ffn.w_down")])?,
        };
        Ok((out, act))
    }

    /// Records the whole forward pass on `g`.
    ///
    /// With `all_rows == false` only the final position's logits are produced.
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph,
        p: &Params,
        tokens: &[u32],
        overrides: &[LayerOverride],
        all_rows: bool,
    ) -> Result<Forward> {
        self.check_tokens(tokens)?;
        for o in overrides {
            if o.layer >= self.config.n_layers {
                return Err(CoreError::Site {
                    site: NeuronSite::new(o.layer, o.cols.first().copied().unwrap_or(0)),
                    n_layers: self.config.n_layers,
                    d_ff: self.config.d_ff,
                });
            }
            if let Some(&c) = o.cols.iter().find(|&&c| c >= self.config.d_ff) {
                return Err(CoreError::Site {
                    site: NeuronSite::new(o.layer, c),
                    n_layers: self.config.n_layers,
                    d_ff: self.config.d_ff,
                });
            }
        }
        let m = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut x = g.embedding(p[TOK_EMBED], &ids)?;
        if self.config.position_kind == PositionKind::Learned {
            let pos = g.rows(p[POS_EMBED], 0, m)?;
            x = g.add(x, pos)?;
        }
        let mut acts = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let h = self.norm(g, p, x, &layer_name(l, "attn_norm"))?;
            let a = self.attention(g, p, h, l)?;
            x = g.add(x, a)?;
            let h = self.norm(g, p, x, &layer_name(l, "ffn_norm"))?;
            let (f, act) = self.ffn(g, p, h, l, m - 1, overrides)?;
            acts.push(act);
            x = g.add(x, f)?;
        }
        let x = if all_rows { x } else { g.rows(x, m - 1, 1)? };
        let h = self.norm(g, p, x, "final_norm")?;
        let logits = g.matmul(h, p[LM_HEAD])?;
        Ok(Forward {
            logits,
            acts,
            residual: x,
        })
    }

    /// Final-position residual stream before the final norm.
    pub fn final_residual(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let f = self.forward_graph(&mut g, &p, tokens, &[], false)?;
        Ok(g.value(f.residual)?.to_vec())
    }

    pub(crate) fn constant_overrides(
        &self,
        g: &mut Graph,
        overrides: &Overrides,
    ) -> Result<Vec<LayerOverride>> {
        let mut by_layer: BTreeMap<usize, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for (&site, &value) in overrides {
            self.config.check_site(site)?;
            let e = by_layer.entry(site.layer).or_default();
            e.0.push(site.neuron);
            e.1.push(value);
        }
        by_layer
            .into_iter()
            .map(|(layer, (cols, vals))| {
                let values = g.constant(Tensor::vector(vals)?);
                Ok(LayerOverride {
                    layer,
                    cols,
                    values,
                })
            })
            .collect()
    }

    /// Final-position logits with no overrides.
    pub fn logits(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        self.forward_with_overrides(tokens, &Overrides::new())
    }

    /// Final-position logits with the given activation overrides in place.
    pub fn forward_with_overrides(&self, tokens: &[u32], overrides: &Overrides) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let ovr = self.constant_overrides(&mut g, overrides)?;
        let f = self.forward_graph(&mut g, &p, tokens, &ovr, false)?;
        Ok(g.value(f.logits)?.to_vec())
    }

    pub fn record_activations(&self, tokens: &[u32]) -> Result<ActivationTrace> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let f = self.forward_graph(&mut g, &p, tokens, &[], false)?;
        let m = tokens.len();
        let layers = f
            .acts
            .iter()
            .map(|&a| Ok(g.value(a)?.row(m - 1)?.to_vec()))
            .collect::<Result<_>>()?;
        Ok(ActivationTrace { layers })
    }

    fn check_answer(&self, prompt: &[u32], answer: &[u32]) -> Result<()> {
        if answer.is_empty() {
            return Err(CoreError::Input("answer has no tokens".into()));
        }
        if prompt.is_empty() {
            return Err(CoreError::Input("prompt has no tokens".into()));
        }
        let longest = prompt.len() + answer.len() - 1;
        if longest > self.config.max_seq_len {
            return Err(CoreError::Input(format!(
                "prompt + answer needs {longest} positions, max_seq_len is {}",
                self.config.max_seq_len
            )));
        }
        Ok(())
    }

    /// Teacher-forced `log p(answer | prompt)` recorded on `g`; overrides apply at
    /// the final position of every step.
    pub(crate) fn answer_logprob_graph(
        &self,
        g: &mut Graph,
        p: &Params,
        prompt: &[u32],
        answer: &[u32],
        overrides: &[LayerOverride],
    ) -> Result<Var> {
        self.check_answer(prompt, answer)?;
        let mut seq = prompt.to_vec();
        let mut total: Option<Var> = None;
        for &tok in answer {
            let f = self.forward_graph(g, p, &seq, overrides, false)?;
            let lp = g.log_softmax(f.logits)?;
            let step = g.pick(lp, tok as usize)?;
            total = Some(match total {
                None => step,
                Some(t) => g.add(t, step)?,
            });
            seq.push(tok);
        }
        Ok(total.expect("answer is non-empty"))
    }

    pub fn answer_logprob(
        &self,
        prompt: &[u32],
        answer: &[u32],
        overrides: &Overrides,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let ovr = self.constant_overrides(&mut g, overrides)?;
        let lp = self.answer_logprob_graph(&mut g, &p, prompt, answer, &ovr)?;
        Ok(g.value(lp)?.item()?)
    }

    /// Per-step log-probabilities of `answer` without overrides.
    pub fn stepwise_logprobs(&self, prompt: &[u32], answer: &[u32]) -> Result<Vec<f64>> {
        self.check_answer(prompt, answer)?;
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(answer.len());
        for &tok in answer {
            let logits = self.logits(&seq)?;
            let probs = Tensor::vector(logits)?.softmax()?;
            out.push(probs.data()[tok as usize].ln());
            seq.push(tok);
        }
        Ok(out)
    }

    /// Logits at every position (used by training and tests).
    pub fn all_logits(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let f = self.forward_graph(&mut g, &p, tokens, &[], true)?;
        Ok(g.value(f.logits)?.clone())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        self.tokenizer.tokenize(text)
    }
}

//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass in creation
//! order, so parents always precede children and the tape is acyclic by
//! construction. [`Graph::backward`] walks the tape once in reverse from a
//! scalar root and returns a [`Gradients`] table for the graph's leaves.
//!
//! Two kinds of inputs exist:
//!
//! - [`Graph::leaf`]: differentiable inputs (weights during training, or
//!   activation-override values during attribution);
//! - [`Graph::constant`]: inputs that never receive a gradient. Nodes that
//!   only depend on constants are skipped entirely during the backward pass.
//!
//! ```
//! use numcore::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let root = g.sum(sq).unwrap();
//! let grads = g.backward(root).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{NumError, Result};
use crate::tensor::{check_finite, matmul_nn, matmul_nt, matmul_tn, softmax_in_place, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node recorded on a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Gelu(usize),
    Silu(usize),
    Exp(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        rinv: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Rows {
        a: usize,
        start: usize,
    },
    SliceCols {
        a: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    Rope {
        a: usize,
        n_heads: usize,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    CausalSoftmax(usize),
    LogSoftmax(usize),
    Pick {
        a: usize,
        flat: usize,
    },
    Sum(usize),
    Override {
        a: usize,
        row: usize,
        cols: Vec<usize>,
        values: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to the leaves of one graph.
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `leaf`; zeros if the root does not depend on it.
    pub fn wrt(&self, leaf: Var) -> Result<Tensor> {
        if leaf.graph != self.graph {
            return Err(NumError::UnknownLeaf(format!(
                "node {} belongs to graph {}, not {}",
                leaf.index, leaf.graph, self.graph
            )));
        }
        match self.leaves.get(leaf.index) {
            Some(Some(t)) => Ok(t.clone()),
            _ => Err(NumError::UnknownLeaf(format!(
                "node {} is not a leaf of graph {}",
                leaf.index, self.graph
            ))),
        }
    }
}

fn dims2(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    t.dims2()
        .map_err(|_| NumError::Dimension(format!("{op} expects a matrix, got {:?}", t.shape())))
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(NumError::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(NumError::UnknownLeaf(format!(
                "node {} is not part of graph {}",
                v.index, self.id
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn record(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        parents: &[usize],
        name: &'static str,
    ) -> Result<Var> {
        check_finite(&data, name)?;
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        Ok(self.push(Tensor::from_parts(shape, data), op, needs_grad))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.idx(v)?;
        Ok(&self.nodes[i].value)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, k) = dims2(ta, "matmul")?;
        let (k2, n) = dims2(tb, "matmul")?;
        if k != k2 {
            return Err(NumError::Dimension(format!(
                "matmul inner dimensions disagree: [{m}×{k}] · [{k2}×{n}]"
            )));
        }
        let out = matmul_nn(ta.data(), tb.data(), m, k, n);
        self.record(vec![m, n], out, Op::MatMul(ia, ib), &[ia, ib], "matmul")
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, k) = dims2(ta, "matmul_nt")?;
        let (n, k2) = dims2(tb, "matmul_nt")?;
        if k != k2 {
            return Err(NumError::Dimension(format!(
                "matmul_nt inner dimensions disagree: [{m}×{k}] · [{n}×{k2}]ᵀ"
            )));
        }
        let out = matmul_nt(ta.data(), tb.data(), m, k, n);
        self.record(vec![m, n], out, Op::MatMulNt(ia, ib), &[ia, ib], "matmul_nt")
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape(ta, tb, name)?;
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.record(shape, out, op(ia, ib), &[ia, ib], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let out = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        self.record(shape, out, Op::Scale(ia, c), &[ia], "scale")
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, n) = dims2(ta, "add_row")?;
        if tb.len() != n {
            return Err(NumError::Dimension(format!(
                "add_row: bias of length {} for {n} columns",
                tb.len()
            )));
        }
        let mut out = ta.to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.record(vec![m, n], out, Op::AddRow(ia, ib), &[ia, ib], "add_row")
    }

    fn unary(
        &mut self,
        a: Var,
        name: &'static str,
        f: fn(f64) -> f64,
        op: fn(usize) -> Op,
    ) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let out = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.record(shape, out, op(ia), &[ia], name)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "gelu", gelu, Op::Gelu)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "silu", |x| x * sigmoid(x), Op::Silu)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", f64::exp, Op::Exp)
    }

    /// Row-wise layer normalisation with gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let (m, n) = dims2(&self.nodes[ix].value, "layer_norm")?;
        let (g, b) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if g.len() != n || b.len() != n {
            return Err(NumError::Dimension("layer_norm: gain/bias length".into()));
        }
        let xs = self.nodes[ix].value.data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let op = Op::LayerNorm {
            x: ix,
            gain: ig,
            bias: ib,
            xhat,
            rstd,
        };
        self.record(vec![m, n], out, op, &[ix, ig, ib], "layer_norm")
    }

    /// Row-wise RMS normalisation with gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (ix, ig) = (self.idx(x)?, self.idx(gain)?);
        let (m, n) = dims2(&self.nodes[ix].value, "rms_norm")?;
        let g = &self.nodes[ig].value;
        if g.len() != n {
            return Err(NumError::Dimension("rms_norm: gain length".into()));
        }
        let xs = self.nodes[ix].value.data();
        let mut rinv = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let ri = 1.0 / (ms + eps).sqrt();
            rinv[r] = ri;
            for c in 0..n {
                out[r * n + c] = row[c] * ri * g.data()[c];
            }
        }
        let op = Op::RmsNorm {
            x: ix,
            gain: ig,
            rinv,
        };
        self.record(vec![m, n], out, op, &[ix, ig], "rms_norm")
    }

    /// Gathers rows `ids` of a `[V×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let (v, d) = dims2(&self.nodes[it].value, "embedding")?;
        let data = self.nodes[it].value.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumError::Dimension(format!("embedding id {id} >= {v}")));
            }
            out.extend_from_slice(&data[id * d..(id + 1) * d]);
        }
        let op = Op::Embedding {
            table: it,
            ids: ids.to_vec(),
        };
        self.record(vec![ids.len(), d], out, op, &[it], "embedding")
    }

    /// Rows `start..start+len` of a matrix.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let (m, n) = dims2(&self.nodes[ia].value, "rows")?;
        if start + len > m {
            return Err(NumError::Dimension(format!(
                "rows {start}..{} out of {m}",
                start + len
            )));
        }
        let out = self.nodes[ia].value.data()[start * n..(start + len) * n].to_vec();
        self.record(vec![len, n], out, Op::Rows { a: ia, start }, &[ia], "rows")
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let (m, n) = dims2(&self.nodes[ia].value, "slice_cols")?;
        if start + len > n {
            return Err(NumError::Dimension(format!(
                "cols {start}..{} out of {n}",
                start + len
            )));
        }
        let data = self.nodes[ia].value.data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&data[r * n + start..r * n + start + len]);
        }
        self.record(
            vec![m, len],
            out,
            Op::SliceCols { a: ia, start },
            &[ia],
            "slice_cols",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let first = *idx
            .first()
            .ok_or_else(|| NumError::Dimension("concat of zero parts".into()))?;
        let (m, _) = dims2(&self.nodes[first].value, "concat_cols")?;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (mi, ni) = dims2(&self.nodes[i].value, "concat_cols")?;
            if mi != m {
                return Err(NumError::Dimension("concat_cols: row counts differ".into()));
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&i, &w) in idx.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[i].value.data()[r * w..(r + 1) * w]);
            }
        }
        self.record(
            vec![m, total],
            out,
            Op::ConcatCols(idx.clone()),
            &idx,
            "concat_cols",
        )
    }

    /// Rotary position embedding on an `[m × n_heads·head_dim]` matrix.
    ///
    /// Row `p` is rotated as position `p`; each head's first and second halves
    /// form the rotated pairs.
    pub fn rope(&mut self, a: Var, n_heads: usize, base: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let (m, n) = dims2(&self.nodes[ia].value, "rope")?;
        if n_heads == 0 || !n.is_multiple_of(n_heads) || !(n / n_heads).is_multiple_of(2) {
            return Err(NumError::Dimension(format!(
                "rope: width {n} is not n_heads({n_heads}) × even head_dim"
            )));
        }
        let hd = n / n_heads;
        let half = hd / 2;
        let mut cos = vec![0.0; m * half];
        let mut sin = vec![0.0; m * half];
        for p in 0..m {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / hd as f64);
                let theta = p as f64 * freq;
                cos[p * half + i] = theta.cos();
                sin[p * half + i] = theta.sin();
            }
        }
        let x = self.nodes[ia].value.data();
        let mut out = vec![0.0; m * n];
        for p in 0..m {
            for h in 0..n_heads {
                let base_ix = p * n + h * hd;
                for i in 0..half {
                    let (c, s) = (cos[p * half + i], sin[p * half + i]);
                    let x1 = x[base_ix + i];
                    let x2 = x[base_ix + half + i];
                    out[base_ix + i] = x1 * c - x2 * s;
                    out[base_ix + half + i] = x1 * s + x2 * c;
                }
            }
        }
        let op = Op::Rope {
            a: ia,
            n_heads,
            cos,
            sin,
        };
        self.record(vec![m, n], out, op, &[ia], "rope")
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`; masked entries are 0.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (m, n) = dims2(&self.nodes[ia].value, "causal_softmax")?;
        if n < m {
            return Err(NumError::Dimension(format!(
                "causal_softmax needs cols >= rows, got [{m}×{n}]"
            )));
        }
        let mut out = self.nodes[ia].value.to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            softmax_in_place(&mut row[..=r]);
            for v in &mut row[r + 1..] {
                *v = 0.0;
            }
        }
        self.record(
            vec![m, n],
            out,
            Op::CausalSoftmax(ia),
            &[ia],
            "causal_softmax",
        )
    }

    /// Row-wise log-softmax of a matrix (a vector is treated as one row).
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let n = *t.shape().last().unwrap_or(&0);
        if n == 0 {
            return Err(NumError::Dimension("log_softmax of an empty row".into()));
        }
        let mut out = t.to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = t.shape().to_vec();
        self.record(shape, out, Op::LogSoftmax(ia), &[ia], "log_softmax")
    }

    /// Scalar element at row-major position `flat`.
    pub fn pick(&mut self, a: Var, flat: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if flat >= t.len() {
            return Err(NumError::Dimension(format!(
                "pick {flat} out of {}",
                t.len()
            )));
        }
        let v = t.data()[flat];
        self.record(vec![], vec![v], Op::Pick { a: ia, flat }, &[ia], "pick")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        self.record(vec![], vec![s], Op::Sum(ia), &[ia], "sum")
    }

    /// Replaces entries `(row, cols[j])` of `a` with `values[j]`.
    ///
    /// This is how activation overrides enter the graph: `values` is usually
    /// a leaf, so one backward pass yields the gradient at every overridden entry.
    pub fn override_entries(
        &mut self,
        a: Var,
        row: usize,
        cols: &[usize],
        values: Var,
    ) -> Result<Var> {
        let (ia, iv) = (self.idx(a)?, self.idx(values)?);
        let (m, n) = dims2(&self.nodes[ia].value, "override_entries")?;
        let vals = &self.nodes[iv].value;
        if row >= m || vals.len() != cols.len() {
            return Err(NumError::Dimension(format!(
                "override_entries: row {row} of {m}, {} values for {} columns",
                vals.len(),
                cols.len()
            )));
        }
        let mut seen = vec![false; n];
        for &c in cols {
            if c >= n || seen[c] {
                return Err(NumError::Invalid(format!(
                    "override column {c} out of range or repeated"
                )));
            }
            seen[c] = true;
        }
        let mut out = self.nodes[ia].value.to_vec();
        for (&c, &v) in cols.iter().zip(vals.data()) {
            out[row * n + c] = v;
        }
        let op = Op::Override {
            a: ia,
            row,
            cols: cols.to_vec(),
            values: iv,
        };
        self.record(vec![m, n], out, op, &[ia, iv], "override_entries")
    }

    /// Mean next-token cross-entropy of `[m×V]` logits against `m` targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let (m, v) = dims2(&self.nodes[il].value, "cross_entropy")?;
        if targets.len() != m || m == 0 {
            return Err(NumError::Dimension(format!(
                "cross_entropy: {} targets for {m} rows",
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= v) {
            return Err(NumError::Dimension(format!("target {t} >= vocab {v}")));
        }
        let mut probs = self.nodes[il].value.to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(v).enumerate() {
            softmax_in_place(row);
            loss -= row[targets[r]].max(f64::MIN_POSITIVE).ln();
        }
        loss /= m as f64;
        let op = Op::CrossEntropy {
            logits: il,
            targets: targets.to_vec(),
            probs,
        };
        self.record(vec![], vec![loss], op, &[il], "cross_entropy")
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let ir = self.idx(root)?;
        let rt = &self.nodes[ir].value;
        if rt.len() != 1 {
            return Err(NumError::NotScalar(rt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; ir + 1];
        grads[ir] = Some(vec![1.0]);
        for i in (0..=ir).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        let mut leaves = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                check_finite(&g, "backward")?;
                leaves[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        Ok(Gradients {
            graph: self.id,
            leaves,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let wants = |p: usize| self.nodes[p].needs_grad;
        let val = |p: usize| &self.nodes[p].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let (_, n) = val(*b).dims2()?;
                if wants(*a) {
                    // dA = G · Bᵀ
                    let d = matmul_nt(g, val(*b).data(), m, n, k);
                    accumulate(&mut grads[*a], &d);
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let d = matmul_tn(val(*a).data(), g, m, k, n);
                    accumulate(&mut grads[*b], &d);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let (n, _) = val(*b).dims2()?;
                if wants(*a) {
                    // dA = G · B
                    let d = matmul_nn(g, val(*b).data(), m, n, k);
                    accumulate(&mut grads[*a], &d);
                }
                if wants(*b) {
                    // dB = Gᵀ · A
                    let d = matmul_tn(g, val(*a).data(), m, n, k);
                    accumulate(&mut grads[*b], &d);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g);
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g);
                }
                if wants(*b) {
                    let d: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads[*b], &d);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d: Vec<f64> = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[*a], &d);
                }
                if wants(*b) {
                    let d: Vec<f64> = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[*b], &d);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(&mut grads[*a], &d);
            }
            Op::AddRow(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g);
                }
                if wants(*b) {
                    let n = val(*b).len();
                    let mut d = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (o, v) in d.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[*b], &d);
                }
            }
            Op::Gelu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gv, &x)| gv * gelu_grad(x))
                    .collect();
                accumulate(&mut grads[*a], &d);
            }
            Op::Silu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gv, &x)| {
                        let s = sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                accumulate(&mut grads[*a], &d);
            }
            Op::Exp(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(x, y)| x * y)
                    .collect();
                accumulate(&mut grads[*a], &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = val(*x).dims2()?;
                let gd = val(*gain).data();
                if wants(*x) {
                    let mut d = vec![0.0; m * n];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let dxhat: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh =
                            dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            d[r * n + c] = rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                    accumulate(&mut grads[*x], &d);
                }
                if wants(*gain) {
                    let mut d = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            d[c] += gr[c] * hr[c];
                        }
                    }
                    accumulate(&mut grads[*gain], &d);
                }
                if wants(*bias) {
                    let mut d = vec![0.0; n];
                    for gr in g.chunks(n) {
                        for c in 0..n {
                            d[c] += gr[c];
                        }
                    }
                    accumulate(&mut grads[*bias], &d);
                }
            }
            Op::RmsNorm { x, gain, rinv } => {
                let (m, n) = val(*x).dims2()?;
                let xd = val(*x).data();
                let gd = val(*gain).data();
                if wants(*x) {
                    let mut d = vec![0.0; m * n];
                    for r in 0..m {
                        let xr = &xd[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let ri = rinv[r];
                        let dot = (0..n).map(|c| gr[c] * gd[c] * xr[c]).sum::<f64>() / n as f64;
                        for c in 0..n {
                            d[r * n + c] = ri * (gr[c] * gd[c] - xr[c] * ri * ri * dot);
                        }
                    }
                    accumulate(&mut grads[*x], &d);
                }
                if wants(*gain) {
                    let mut d = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            d[c] += g[r * n + c] * xd[r * n + c] * rinv[r];
                        }
                    }
                    accumulate(&mut grads[*gain], &d);
                }
            }
            Op::Embedding { table, ids } => {
                let (v, dm) = val(*table).dims2()?;
                let mut d = vec![0.0; v * dm];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..dm {
                        d[id * dm + c] += g[r * dm + c];
                    }
                }
                accumulate(&mut grads[*table], &d);
            }
            Op::Rows { a, start } => {
                let (m, n) = val(*a).dims2()?;
                let mut d = vec![0.0; m * n];
                d[start * n..start * n + g.len()].copy_from_slice(g);
                accumulate(&mut grads[*a], &d);
            }
            Op::SliceCols { a, start } => {
                let (m, n) = val(*a).dims2()?;
                let len = g.len() / m.max(1);
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                accumulate(&mut grads[*a], &d);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = val(p).dims2()?;
                    if wants(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads[p], &d);
                    }
                    offset += w;
                }
            }
            Op::Rope {
                a,
                n_heads,
                cos,
                sin,
            } => {
                let (m, n) = val(*a).dims2()?;
                let hd = n / n_heads;
                let half = hd / 2;
                let mut d = vec![0.0; m * n];
                for p in 0..m {
                    for h in 0..*n_heads {
                        let b = p * n + h * hd;
                        for i in 0..half {
                            let (c, s) = (cos[p * half + i], sin[p * half + i]);
                            let (g1, g2) = (g[b + i], g[b + half + i]);
                            d[b + i] = g1 * c + g2 * s;
                            d[b + half + i] = -g1 * s + g2 * c;
                        }
                    }
                }
                accumulate(&mut grads[*a], &d);
            }
            Op::CausalSoftmax(a) => {
                let (m, n) = node.value.dims2()?;
                let y = node.value.data();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y[r * n..r * n + r + 1];
                    let gr = &g[r * n..r * n + r + 1];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..=r {
                        d[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                accumulate(&mut grads[*a], &d);
            }
            Op::LogSoftmax(a) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let gs: f64 = gr.iter().sum();
                    for c in 0..n {
                        dr[c] = gr[c] - yr[c].exp() * gs;
                    }
                }
                accumulate(&mut grads[*a], &d);
            }
            Op::Pick { a, flat } => {
                let mut d = vec![0.0; val(*a).len()];
                d[*flat] = g[0];
                accumulate(&mut grads[*a], &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; val(*a).len()];
                accumulate(&mut grads[*a], &d);
            }
            Op::Override {
                a,
                row,
                cols,
                values,
            } => {
                let (_, n) = node.value.dims2()?;
                if wants(*a) {
                    let mut d = g.to_vec();
                    for &c in cols {
                        d[row * n + c] = 0.0;
                    }
                    accumulate(&mut grads[*a], &d);
                }
                if wants(*values) {
                    let d: Vec<f64> = cols.iter().map(|&c| g[row * n + c]).collect();
                    accumulate(&mut grads[*values], &d);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let m = targets.len();
                let v = probs.len() / m;
                let scale = g[0] / m as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * v + t] -= scale;
                }
                accumulate(&mut grads[*logits], &d);
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Tanh-approximated GELU, as used by GPT-2.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let root = g.sum(sq).unwrap();
        assert_eq!(g.value(root).unwrap().item().unwrap(), 14.0);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn independent_leaf_gets_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = g.leaf(Tensor::vector(vec![5.0]).unwrap());
        let root = g.sum(x).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.wrt(y).unwrap().data(), &[0.0]);
    }

    #[test]
    fn foreign_leaf_is_unknown() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let x = g1.leaf(Tensor::vector(vec![1.0]).unwrap());
        let y = g2.leaf(Tensor::vector(vec![1.0]).unwrap());
        let root = g1.sum(x).unwrap();
        let grads = g1.backward(root).unwrap();
        assert!(matches!(grads.wrt(y), Err(NumError::UnknownLeaf(_))));
        // an intermediate node is not a leaf either
        assert!(matches!(grads.wrt(root), Err(NumError::UnknownLeaf(_))));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(NumError::NotScalar(_))));
    }

    #[test]
    fn constants_are_not_differentiated() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let x = g.leaf(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        // d/dx sum(x·W) = row sums of W
        assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![0.0, 5.0, 1.0, 1.0]).unwrap());
        let s = g.causal_softmax(a).unwrap();
        assert_eq!(g.value(s).unwrap().data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn override_replaces_and_routes_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let v = g.leaf(Tensor::vector(vec![10.0]).unwrap());
        let o = g.override_entries(a, 1, &[2], v).unwrap();
        assert_eq!(g.value(o).unwrap().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 10.0]);
        let sq = g.mul(o, o).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(v).unwrap().data(), &[20.0]);
        assert_eq!(
            grads.wrt(a).unwrap().data(),
            &[2.0, 4.0, 6.0, 8.0, 10.0, 0.0]
        );
    }

    #[test]
    fn override_rejects_repeated_columns() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![1, 3]));
        let v = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(g.override_entries(a, 0, &[1, 1], v).is_err());
    }

    #[test]
    fn nan_fails_fast() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![800.0]).unwrap());
        assert!(matches!(g.exp(a), Err(NumError::NonFinite { .. })));
    }
}

//! Reverse-mode differentiation over a recorded operation list.
//!
//! Every operation appends a node holding its forward value. [`Tape::backward`]
//! walks the list in reverse and accumulates gradients into a [`Gradients`]
//! buffer, one accumulator per node with the node's shape.

use std::rc::Rc;

use super::tensor::{normalize_row, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of a transformer a matmul belongs to, for multiply-accumulate
/// accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacCategory {
    /// Q/K/V/O projections.
    Projection,
    /// Score (`QKᵀ`) and context (`PV`) products.
    Attention,
    /// Feed-forward up/down projections.
    FeedForward,
    /// Embeddings, input projectors, heads.
    Other,
}

/// Multiply-accumulate counts by category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounts {
    pub projection: u128,
    pub attention: u128,
    pub feed_forward: u128,
    pub other: u128,
}

impl MacCounts {
    /// Attention + projection + feed-forward, i.e. the per-layer terms.
    pub fn layer_total(&self) -> u128 {
        self.projection + self.attention + self.feed_forward
    }

    pub fn add(&mut self, other: &MacCounts) {
        self.projection += other.projection;
        self.attention += other.attention;
        self.feed_forward += other.feed_forward;
        self.other += other.other;
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Custom {
        x: Var,
        grad: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: MacCounts,
    category: Option<MacCategory>,
}

/// Gradient accumulators, one per tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Sets the category charged for subsequent matmuls. `None` disables
    /// charging.
    pub fn set_mac_category(&mut self, category: Option<MacCategory>) {
        self.category = category;
    }

    pub fn mac_counts(&self) -> MacCounts {
        self.macs
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let (m, k, n) = (
            self.value(a).rows(),
            self.value(a).cols(),
            self.value(b).cols(),
        );
        let macs = (m * k * n) as u128;
        match self.category {
            Some(MacCategory::Projection) => self.macs.projection += macs,
            Some(MacCategory::Attention) => self.macs.attention += macs,
            Some(MacCategory::FeedForward) => self.macs.feed_forward += macs,
            Some(MacCategory::Other) => self.macs.other += macs,
            None => {}
        }
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s))
    }

    /// `[m×n] + [n]`, the bias broadcast used by linear layers.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).numel() != n {
            return Err(Error::Dimension(format!(
                "add_row: {:?} + {:?}",
                self.value(x).shape(),
                self.value(bias).shape()
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bj) in row.iter_mut().zip(&b) {
                *o += bj;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax_rows();
        self.push(out, Op::Softmax(x))
    }

    /// Softmax with a fixed boolean mask; masked entries are exactly zero and
    /// receive no gradient.
    pub fn softmax_rows_masked(&mut self, x: Var, allowed: &Rc<[bool]>) -> Result<Var> {
        if allowed.len() != self.value(x).numel() {
            return Err(Error::Dimension(format!(
                "mask has {} entries for {:?}",
                allowed.len(),
                self.value(x).shape()
            )));
        }
        let out = self.value(x).softmax_rows_masked(Some(allowed));
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.numel() != d || b.numel() != d {
            return Err(Error::Dimension(format!(
                "layer_norm: last axis {d}, gain {:?}, bias {:?}",
                g.shape(),
                b.shape()
            )));
        }
        let mut out = self.value(x).clone();
        let mut xhat_all = Vec::with_capacity(out.numel());
        let mut inv_stds = Vec::with_capacity(out.rows());
        let (g, b) = (g.data().to_vec(), b.data().to_vec());
        for row in out.data_mut().chunks_mut(d) {
            let (xhat, inv_std) = normalize_row(row);
            for j in 0..d {
                row[j] = xhat[j] * g[j] + b[j];
            }
            xhat_all.extend(xhat);
            inv_stds.push(inv_std);
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: xhat_all,
                inv_std: inv_stds,
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    /// Row lookup into an embedding table `[vocab×d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("token id {id} >= vocabulary {vocab}")));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        if start + len > m {
            return Err(Error::Index(format!(
                "rows {start}..{} of {m}",
                start + len
            )));
        }
        let out = Tensor::new(
            vec![len, n],
            t.data()[start * n..(start + len) * n].to_vec(),
        )?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        if start + len > n {
            return Err(Error::Index(format!(
                "cols {start}..{} of {n}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(Error::Dimension(format!(
                    "concat_rows: {n} vs {} columns",
                    t.cols()
                )));
            }
            m += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::Dimension("concat_cols: row counts differ".into()));
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Column means: `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let out = Tensor::new(vec![1, n], out).expect("shape matches");
        self.push(out, Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Softmax cross-entropy of a single logit row against `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        if target >= t.numel() {
            return Err(Error::Index(format!(
                "class {target} >= {} logits",
                t.numel()
            )));
        }
        let row = Tensor::new(vec![1, t.numel()], t.data().to_vec())?;
        let probs = row.softmax_rows().into_data();
        let loss = -probs[target].max(f64::MIN_POSITIVE).ln();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        ))
    }

    /// Scalar node `value = f(x)` whose gradient w.r.t. `x` is supplied.
    pub fn custom_scalar(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.numel() != self.value(x).numel() {
            return Err(Error::Dimension(format!(
                "custom gradient {:?} for input {:?}",
                grad.shape(),
                self.value(x).shape()
            )));
        }
        let grad = grad.reshape(self.value(x).shape().to_vec())?;
        Ok(self.push(Tensor::scalar(value), Op::Custom { x, grad }))
    }

    /// Back-propagates from scalar node `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::filled(self.value(out).shape(), 1.0));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.accumulate(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul(&bv.transpose()?)?);
                acc(*b, av.transpose()?.matmul(g)?);
            }
            Op::Transpose(x) => acc(*x, g.transpose()?),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.mul(bv)?);
                acc(*b, g.mul(av)?);
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s)),
            Op::AddRow(x, bias) => {
                acc(*x, g.clone());
                let n = g.cols();
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                let shape = self.value(*bias).shape().to_vec();
                acc(*bias, Tensor::new(shape, gb)?);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut gx = vec![0.0; y.numel()];
                for ((yr, gr), out) in y
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(gx.chunks_mut(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gv = self.value(*gain).data();
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = vec![0.0; g.numel()];
                for (r, (grow, dxrow)) in g.data().chunks(d).zip(dx.chunks_mut(d)).enumerate() {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        dgain[j] += grow[j] * xh[j];
                        dbias[j] += grow[j];
                        let dxh = grow[j] * gv[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        let dxh = grow[j] * gv[j];
                        dxrow[j] = inv_std[r] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
                acc(*x, Tensor::new(g.shape().to_vec(), dx)?);
                let gs = self.value(*gain).shape().to_vec();
                let bs = self.value(*bias).shape().to_vec();
                acc(*gain, Tensor::new(gs, dgain)?);
                acc(*bias, Tensor::new(bs, dbias)?);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = xv.map(gelu_grad);
                acc(*x, d.mul(g)?);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut gt = Tensor::zeros(t.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt.data_mut()[id * d..(id + 1) * d];
                    for (o, v) in dst.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*table, gt);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                gx.data_mut()[start * n..start * n + g.numel()].copy_from_slice(g.data());
                acc(*x, gx);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (m, n, len) = (xv.rows(), xv.cols(), g.cols());
                let mut gx = Tensor::zeros(xv.shape());
                for i in 0..m {
                    gx.data_mut()[i * n + start..i * n + start + len].copy_from_slice(g.row(i));
                }
                acc(*x, gx);
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.numel();
                    let t =
                        Tensor::new(pv.shape().to_vec(), g.data()[offset..offset + len].to_vec())?;
                    debug_assert_eq!(len % n.max(1), 0);
                    offset += len;
                    acc(p, t);
                }
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let mut col = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    let mut data = Vec::with_capacity(m * w);
                    for i in 0..m {
                        data.extend_from_slice(&g.row(i)[col..col + w]);
                    }
                    col += w;
                    acc(p, Tensor::new(pv.shape().to_vec(), data)?);
                }
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let m = xv.rows();
                let mut gx = Tensor::zeros(xv.shape());
                let n = xv.cols();
                for row in gx.data_mut().chunks_mut(n) {
                    for (o, v) in row.iter_mut().zip(g.data()) {
                        *o = v / m as f64;
                    }
                }
                acc(*x, gx);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::filled(xv.shape(), g.data()[0]));
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let mut d = probs.clone();
                d[*target] -= 1.0;
                let shape = self.value(*logits).shape().to_vec();
                acc(*logits, Tensor::new(shape, d)?.scale(g.data()[0]));
            }
            Op::Custom { x, grad } => acc(*x, grad.scale(g.data()[0])),
        }
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

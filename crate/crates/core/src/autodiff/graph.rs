//! Dynamic tape for reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so insertion order is a topological order and `backward`
//! is a single reverse sweep. All reductions run in a fixed order, which makes
//! gradients bit-reproducible.

use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    /// Constant, or any value no trainable tensor flows into.
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddTiled(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulColumn(Var, Var),
    Relu(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L1(Var),
    Sum(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    MeanPool {
        x: Var,
        seq: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inference: bool,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2().map_err(|_| Error::dim(op, t.shape(), &[0, 0]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that never records gradients; parameters enter as constants.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            inference: true,
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite value",
                op_name(&op)
            )));
        }
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("constant input".into()));
        }
        self.push(Op::Leaf, value, false)
    }

    /// Bring a stored parameter onto the tape. It participates in `backward`
    /// only when it is trainable and the graph is not an inference graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let rg = !self.inference && t.requires_grad();
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid stored tensor");
        self.nodes.push(Node {
            op: if rg { Op::Param(id) } else { Op::Leaf },
            value,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], data)?, rg)
    }

    /// `a · bᵀ`, the row-vector form of applying a `d_out×d_in` weight.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_nt")?;
        let (n, k2) = dims2(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMulNt(a, b), Tensor::new(vec![m, n], data)?, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(Op::Add(a, b), out, rg)
    }

    /// Add `t` (R×d) to every block of R rows of `x` (N×d, N a multiple of R).
    /// Covers bias rows (R=1) and positional tables (R=seq).
    pub fn add_tiled(&mut self, x: Var, t: Var) -> Result<Var> {
        let (n, d) = dims2(self.value(x), "add_tiled")?;
        let (r, d2) = dims2(self.value(t), "add_tiled")?;
        if d != d2 || n % r != 0 {
            return Err(Error::dim("add_tiled", self.shape(x), self.shape(t)));
        }
        let tv = self.value(t).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(idx, v)| v + tv[((idx / d) % r) * d + idx % d])
            .collect();
        let rg = self.rg(&[x, t]);
        self.push(Op::AddTiled(x, t), Tensor::new(vec![n, d], data)?, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Op::Mul(a, b), Tensor::new(shape, data)?, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, s), out, rg)
    }

    /// Multiply each row `i` of `a` (N×d) by the scalar `col[i]` (`col` is N×1).
    pub fn mul_column(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, d) = dims2(self.value(a), "mul_column")?;
        if self.shape(col) != [n, 1] {
            return Err(Error::dim("mul_column", self.shape(a), self.shape(col)));
        }
        let c = self.value(col).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(idx, v)| v * c[idx / d])
            .collect();
        let rg = self.rg(&[a, col]);
        self.push(Op::MulColumn(a, col), Tensor::new(vec![n, d], data)?, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Op::Relu(a), Tensor::new(shape, data)?, rg)
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax()?;
        let rg = self.rg(&[a]);
        self.push(Op::Softmax(a), out, rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = dims2(self.value(logits), "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for (row, &label) in lv.chunks(c).zip(labels) {
            total += kernels::logsumexp(row) - row[label];
        }
        let probs = kernels::softmax_rows(lv, c);
        let rg = self.rg(&[logits]);
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(total / b as f64),
            rg,
        )
    }

    /// Sum of absolute values; the subgradient at 0 is 0.
    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).l1_norm();
        let rg = self.rg(&[a]);
        self.push(Op::L1(a), Tensor::scalar(s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.value(table), "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Validation(format!(
                "row index {bad} out of range for table of {v} rows"
            )));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            Tensor::new(vec![ids.len(), d], data)?,
            rg,
        )
    }

    /// Row-wise layer normalization with a learned gain and bias (both 1×d).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = dims2(self.value(x), "layer_norm")?;
        if self.shape(gain) != [1, d] || self.shape(bias) != [1, d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let bb = self.value(bias).data();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + bb[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            Tensor::new(vec![n, d], out)?,
            rg,
        )
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// length `seq`. `q`, `k`, `v` are `(batch·seq)×d`; heads split `d` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (n, d) = dims2(self.value(q), "attention")?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if n != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::dim("attention", &[n, d], &[batch * seq, heads]));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; n * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kv[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                        *s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    let p = kernels::softmax_rows(&scores, seq);
                    let base = ((b * heads + h) * seq + i) * seq;
                    probs[base..base + seq].copy_from_slice(&p);
                    let orow = &mut out[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    for (j, pj) in p.iter().enumerate() {
                        let vj = &vv[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            Tensor::new(vec![n, d], out)?,
            rg,
        )
    }

    /// Average each block of `seq` consecutive rows: `(b·seq)×d → b×d`.
    pub fn mean_pool(&mut self, x: Var, seq: usize) -> Result<Var> {
        let (n, d) = dims2(self.value(x), "mean_pool")?;
        if seq == 0 || n % seq != 0 {
            return Err(Error::dim("mean_pool", &[n, d], &[seq]));
        }
        let b = n / seq;
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * d];
        for i in 0..n {
            let orow = &mut out[(i / seq) * d..(i / seq + 1) * d];
            for (o, v) in orow.iter_mut().zip(&xv[i * d..(i + 1) * d]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= seq as f64);
        let rg = self.rg(&[x]);
        self.push(Op::MeanPool { x, seq }, Tensor::new(vec![b, d], out)?, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let (n, _) = dims2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_cols")?;
            if r != n {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(vec![n, total], data)?, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = dims2(self.value(x), "slice_cols")?;
        if len == 0 || start + len > d {
            return Err(Error::dim("slice_cols", &[n, d], &[start, len]));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xv[i * d + start..i * d + start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(Op::SliceCols { x, start }, Tensor::new(vec![n, len], data)?, rg)
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into the
    /// trainable parameters of `store`. Trainable parameters that were put on
    /// the tape but receive no signal get an explicit zero gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("loss is not on this graph".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                if let Op::Param(id) = node.op {
                    store.get_mut(id).accumulate_grad(&vec![0.0; node.value.numel()]);
                }
                continue;
            };
            self.backprop_node(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.get_mut(*id).accumulate_grad(g),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                acc(*a, kernels::matmul_nt(g, self.value(*b).data(), m, n, k));
                acc(*b, kernels::matmul_tn(self.value(*a).data(), g, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[0];
                acc(*a, kernels::matmul(g, self.value(*b).data(), m, n, k));
                acc(*b, kernels::matmul_tn(g, self.value(*a).data(), m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddTiled(x, t) => {
                acc(*x, g.to_vec());
                let (r, d) = self.value(*t).dims2().unwrap();
                let mut gt = vec![0.0; r * d];
                for (idx, gv) in g.iter().enumerate() {
                    gt[((idx / d) % r) * d + idx % d] += gv;
                }
                acc(*t, gt);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
            Op::MulColumn(a, col) => {
                let (n, d) = self.value(*a).dims2().unwrap();
                let av = self.value(*a).data();
                let cv = self.value(*col).data();
                acc(*a, g.iter().enumerate().map(|(i, gv)| gv * cv[i / d]).collect());
                let gc = (0..n)
                    .map(|i| (0..d).map(|j| g[i * d + j] * av[i * d + j]).sum())
                    .collect();
                acc(*col, gc);
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*a, gx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * c + l] -= scale;
                }
                acc(*logits, gl);
            }
            Op::L1(a) => {
                let av = self.value(*a).data();
                acc(
                    *a,
                    av.iter()
                        .map(|x| {
                            if *x > 0.0 {
                                g[0]
                            } else if *x < 0.0 {
                                -g[0]
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Gather { table, ids } => {
                let (v, d) = self.value(*table).dims2().unwrap();
                let mut gt = vec![0.0; v * d];
                for (row, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[row * d + j];
                    }
                }
                acc(*table, gt);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (n, d) = node.value.dims2().unwrap();
                let gv = self.value(*gain).data();
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    let gr = &g[i * d..(i + 1) * d];
                    let hr = &xhat[i * d..(i + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        gx[i * d + j] = rstd[i] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                acc(*x, gx);
                acc(*gain, gg);
                acc(*bias, gb);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let (n, d) = node.value.dims2().unwrap();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; n * d];
                let mut gvv = vec![0.0; n * d];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        let at = |row: usize| (b * seq + row) * d + off;
                        for i in 0..seq {
                            let base = ((b * heads + h) * seq + i) * seq;
                            let p = &probs[base..base + seq];
                            let go = &g[at(i)..at(i) + dh];
                            for j in 0..seq {
                                let vj = &vv[at(j)..at(j) + dh];
                                dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                                for c in 0..dh {
                                    gvv[at(j) + c] += p[j] * go[c];
                                }
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..seq {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    gq[at(i) + c] += ds * kv[at(j) + c];
                                    gk[at(j) + c] += ds * qv[at(i) + c];
                                }
                            }
                        }
                    }
                }
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gvv);
            }
            Op::MeanPool { x, seq } => {
                let (n, d) = self.value(*x).dims2().unwrap();
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        gx[i * d + j] = g[(i / seq) * d + j] / *seq as f64;
                    }
                }
                acc(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let (n, total) = node.value.dims2().unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut gp = Vec::with_capacity(n * w);
                    for i in 0..n {
                        gp.extend_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    acc(p, gp);
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (n, d) = self.value(*x).dims2().unwrap();
                let len = node.value.shape()[1];
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    gx[i * d + start..i * d + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(*x, gx);
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::MatMulNt(..) => "matmul_nt",
        Op::Add(..) => "add",
        Op::AddTiled(..) => "add_tiled",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MulColumn(..) => "mul_column",
        Op::Relu(..) => "relu",
        Op::Softmax(..) => "softmax",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::L1(..) => "l1_norm",
        Op::Sum(..) => "sum",
        Op::Gather { .. } => "gather_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Attention { .. } => "attention",
        Op::MeanPool { .. } => "mean_pool",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name, t, true).unwrap();
        (s, id)
    }

    #[test]
    fn linear_map_gradient_is_input_per_row() {
        // loss = sum(W·x), W 2×3, x 3×1  ⇒  dW[i][j] = x[j]
        let w = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.5, 2.0]]).unwrap();
        let (mut store, id) = store_with("w", w);
        let mut g = Graph::new();
        let wv = g.param(&store, id);
        let x = g
            .constant(Tensor::new(vec![3, 1], vec![1.5, -2.0, 4.0]).unwrap())
            .unwrap();
        let y = g.matmul(wv, x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad().unwrap(), &[1.5, -2.0, 4.0, 1.5, -2.0, 4.0]);
    }

    #[test]
    fn l1_sign_subgradient() {
        let (mut store, id) = store_with("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.0]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let loss = g.l1_norm(w).unwrap();
        assert_eq!(g.value(loss).data(), &[3.0]);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad().unwrap(), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let (mut store, id) = store_with("w", Tensor::zeros(&[2, 2]));
        let mut g = Graph::new();
        let w = g.param(&store, id);
        assert!(matches!(g.backward(w, &mut store), Err(Error::Usage(_))));
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::filled(&[1, 2], 2.0), false).unwrap();
        let b = store.add("b", Tensor::filled(&[1, 2], 3.0), true).unwrap();
        let mut g = Graph::new();
        let (av, bv) = (g.param(&store, a), g.param(&store, b));
        let p = g.mul(av, bv).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert!(store.get(a).grad().is_none());
        assert_eq!(store.get(b).grad().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn unreached_trainable_param_gets_zero_grad() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::filled(&[1, 2], 2.0), true).unwrap();
        let b = store.add("b", Tensor::filled(&[1, 2], 3.0), true).unwrap();
        let mut g = Graph::new();
        let _unused = g.param(&store, a);
        let bv = g.param(&store, b);
        let loss = g.sum(bv).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(a).grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::filled(&[2, 4], 0.7)).unwrap();
        let ce = g.cross_entropy(x, &[0, 3]).unwrap();
        assert!((g.value(ce).data()[0] - 4f64.ln()).abs() < 1e-12);

        let mut logits = Tensor::zeros(&[1, 3]);
        logits.data_mut()[2] = 1e6;
        let x = g.constant(logits).unwrap();
        let ce = g.cross_entropy(x, &[2]).unwrap();
        assert!(g.value(ce).data()[0].abs() < 1e-9);

        let x = g
            .constant(Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap())
            .unwrap();
        let ce = g.cross_entropy(x, &[1]).unwrap();
        assert!((g.value(ce).data()[0] + 0.75f64.ln()).abs() < 1e-12);

        assert!(matches!(g.cross_entropy(x, &[2]), Err(Error::Validation(_))));
    }

    #[test]
    fn inference_graph_records_nothing_trainable() {
        let (store, id) = store_with("w", Tensor::filled(&[2, 2], 1.0));
        let mut g = Graph::inference();
        let w = g.param(&store, id);
        assert!(!g.requires_grad(w));
    }
}

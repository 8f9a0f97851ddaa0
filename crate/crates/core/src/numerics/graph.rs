//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is an arena of nodes. Every operation appends a node holding its
//! value and the rule for pushing gradient back to its parents; a [`Var`] is a
//! handle into that arena. Parents always precede children, so a single reverse
//! sweep over the arena is a valid topological order. Graphs are meant to live
//! for one training step and be dropped after [`Graph::backward`].

use crate::error::{Error, Result};
use crate::numerics::matrix::{gemm_nn, gemm_nt, gemm_tn, Mat};
use crate::scalar::Scalar;

/// Variance stabilizer inside [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Const,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Mat<T>,
        count: usize,
    },
    Kl {
        p: Var,
        q: Var,
        detach_p: bool,
        mask: Vec<bool>,
        p_probs: Mat<T>,
        q_probs: Mat<T>,
        row_kl: Vec<T>,
        count: usize,
    },
    SumAll(Var),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    PickPerRow(Var, Vec<usize>),
    ScaleRows(Var, Var),
}

struct Node<T> {
    value: Mat<T>,
    grad: Option<Mat<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Arena-backed computation graph. Confine a graph to one thread.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Const, false)
    }

    /// Copy of `a` cut off from its ancestors: no gradient flows through it.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient, or zeros when nothing reached this node.
    pub fn grad(&self, v: Var) -> Mat<T> {
        let n = &self.nodes[v.0];
        n.grad
            .clone()
            .unwrap_or_else(|| Mat::zeros(n.value.rows(), n.value.cols()))
    }

    pub fn grad_ref(&self, v: Var) -> Option<&Mat<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.nodes[a.0].value.shape(),
            right: self.nodes[b.0].value.shape(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.rows() {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = Mat::zeros(va.rows(), vb.cols());
        gemm_nn(va, vb, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.cols() {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = Mat::zeros(va.rows(), vb.rows());
        gemm_nt(va, vb, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.nodes[a.0]
            .value
            .add(&self.nodes[b.0].value)
            .map_err(|_| self.shape_err("add", a, b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(self.shape_err("sub", a, b));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Mat::new(va.rows(), va.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Adds the 1×n row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(self.shape_err("add_row", a, bias));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.nodes[a.0].value.scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Row-wise layer normalization with 1×n `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let n = vx.cols();
        for p in [gain, bias] {
            let vp = &self.nodes[p.0].value;
            if vp.rows() != 1 || vp.cols() != n {
                return Err(self.shape_err("layer_norm", x, p));
            }
        }
        let vg = self.nodes[gain.0].value.data();
        let vb = self.nodes[bias.0].value.data();
        let nf = T::lit(n as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = Mat::zeros(vx.rows(), n);
        let mut out = Mat::zeros(vx.rows(), n);
        let mut inv_std = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            let xh = xhat.row(r).to_vec();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = xh[j] * vg[j] + vb[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(&self.nodes[a.0].value);
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping positions equal to `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let vl = &self.nodes[logits.0].value;
        if targets.len() != vl.rows() {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: vl.shape(),
                right: (targets.len(), 1),
            });
        }
        let vocab = vl.cols();
        let mut tg = Vec::with_capacity(targets.len());
        for &t in targets {
            if t == ignore_index {
                tg.push(None);
            } else if t >= vocab {
                return Err(Error::data(format!("target id {t} outside vocabulary of {vocab}")));
            } else {
                tg.push(Some(t));
            }
        }
        let count = tg.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let logp = log_softmax_rows(vl);
        let mut total = T::zero();
        for (r, t) in tg.iter().enumerate() {
            if let Some(t) = *t {
                total -= logp.get(r, t);
            }
        }
        let loss = total / T::lit(count as f64);
        let probs = logp.map(|v| v.exp());
        let rg = self.rg(logits);
        Ok(self.push(
            Mat::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: tg,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean over unmasked rows of KL(softmax(p) ∥ softmax(q)).
    ///
    /// With `detach_p` the teacher side `p` receives no gradient. `mask`
    /// selects rows to include; `None` includes all.
    pub fn kl_rows(&mut self, p: Var, q: Var, detach_p: bool, mask: Option<&[bool]>) -> Result<Var> {
        let (vp, vq) = (&self.nodes[p.0].value, &self.nodes[q.0].value);
        if vp.shape() != vq.shape() {
            return Err(self.shape_err("kl_rows", p, q));
        }
        let mask: Vec<bool> = match mask {
            Some(m) if m.len() != vp.rows() => {
                return Err(Error::Shape {
                    op: "kl_rows mask",
                    left: vp.shape(),
                    right: (m.len(), 1),
                })
            }
            Some(m) => m.to_vec(),
            None => vec![true; vp.rows()],
        };
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let logp = log_softmax_rows(vp);
        let logq = log_softmax_rows(vq);
        let mut row_kl = vec![T::zero(); vp.rows()];
        let mut total = T::zero();
        for r in 0..vp.rows() {
            if !mask[r] {
                continue;
            }
            let kl: T = logp
                .row(r)
                .iter()
                .zip(logq.row(r))
                .map(|(&lp, &lq)| lp.exp() * (lp - lq))
                .sum();
            row_kl[r] = kl;
            total += kl;
        }
        let loss = total / T::lit(count as f64);
        let rg = (!detach_p && self.rg(p)) || self.rg(q);
        Ok(self.push(
            Mat::filled(1, 1, loss),
            Op::Kl {
                p,
                q,
                detach_p,
                mask,
                p_probs: logp.map(|v| v.exp()),
                q_probs: logq.map(|v| v.exp()),
                row_kl,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let rg = self.rg(a);
        self.push(Mat::filled(1, 1, s), Op::SumAll(a), rg)
    }

    /// Column means as a 1×n row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let mut out = Mat::zeros(1, va.cols());
        let inv = T::one() / T::lit(va.rows().max(1) as f64);
        for r in 0..va.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(va.row(r)) {
                *o += v * inv;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = &self.nodes[table.0].value;
        let mut out = Mat::zeros(ids.len(), vt.cols());
        for (i, &id) in ids.iter().enumerate() {
            if id >= vt.rows() {
                return Err(Error::data(format!(
                    "row index {id} out of range for {} rows",
                    vt.rows()
                )));
            }
            out.row_mut(i).copy_from_slice(vt.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// Places row `i` of `src` at row `idx[i]` of an `n_rows`-row zero matrix.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let vs = &self.nodes[src.0].value;
        if idx.len() != vs.rows() || idx.iter().any(|&i| i >= n_rows) {
            return Err(Error::Shape {
                op: "scatter_rows",
                left: vs.shape(),
                right: (idx.len(), n_rows),
            });
        }
        let mut out = Mat::zeros(n_rows, vs.cols());
        for (i, &dst) in idx.iter().enumerate() {
            for (o, &v) in out.row_mut(dst).iter_mut().zip(vs.row(i)) {
                *o += v;
            }
        }
        let rg = self.rg(src);
        Ok(self.push(out, Op::ScatterRows(src, idx.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if start + len > va.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                left: va.shape(),
                right: (start, len),
            });
        }
        let cols = va.cols();
        let data = va.data()[start * cols..(start + len) * cols].to_vec();
        let out = Mat::new(len, cols, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if start + len > va.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                left: va.shape(),
                right: (start, len),
            });
        }
        let mut out = Mat::zeros(va.rows(), len);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.concat_check(parts, "concat_rows", |m| m.cols())?;
        let rows = parts.iter().map(|p| self.nodes[p.0].value.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Mat::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.concat_check(parts, "concat_cols", |m| m.rows())?;
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    fn concat_check(&self, parts: &[Var], op: &'static str, dim: impl Fn(&Mat<T>) -> usize) -> Result<usize> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config(format!("{op} of zero parts")))?;
        let d = dim(&self.nodes[first.0].value);
        for p in parts {
            if dim(&self.nodes[p.0].value) != d {
                return Err(self.shape_err(op, *first, *p));
            }
        }
        Ok(d)
    }

    /// Column vector whose row `i` is `a[i, idx[i]]`.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if idx.len() != va.rows() || idx.iter().any(|&j| j >= va.cols()) {
            return Err(Error::Shape {
                op: "pick_per_row",
                left: va.shape(),
                right: (idx.len(), 1),
            });
        }
        let data = idx.iter().enumerate().map(|(i, &j)| va.get(i, j)).collect();
        let out = Mat::new(idx.len(), 1, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::PickPerRow(a, idx.to_vec()), rg))
    }

    /// Multiplies row `i` of `a` by `s[i, 0]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (va, vs) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        if vs.cols() != 1 || vs.rows() != va.rows() {
            return Err(self.shape_err("scale_rows", a, s));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            let k = vs.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::ScaleRows(a, s), rg))
    }

    /// Seeds `d root = 1` (elementwise) and propagates to every ancestor.
    pub fn backward(&mut self, root: Var) {
        let (r, c) = self.nodes[root.0].value.shape();
        self.nodes[root.0].grad = Some(Mat::filled(r, c, T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, m) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(m.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(m),
                }
            }
        }
    }

    fn local_grads(&self, i: usize, g: &Mat<T>) -> Vec<(Var, Mat<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    let mut ga = Mat::zeros(val(*a).rows(), val(*a).cols());
                    gemm_nt(g, val(*b), &mut ga);
                    out.push((*a, ga));
                }
                if wants(*b) {
                    let mut gb = Mat::zeros(val(*b).rows(), val(*b).cols());
                    gemm_tn(val(*a), g, &mut gb);
                    out.push((*b, gb));
                }
            }
            Op::MatMulNt(a, b) => {
                if wants(*a) {
                    let mut ga = Mat::zeros(val(*a).rows(), val(*a).cols());
                    gemm_nn(g, val(*b), &mut ga);
                    out.push((*a, ga));
                }
                if wants(*b) {
                    let mut gb = Mat::zeros(val(*b).rows(), val(*b).cols());
                    gemm_tn(g, val(*a), &mut gb);
                    out.push((*b, gb));
                }
            }
            Op::Transpose(a) => out.push((*a, g.transpose())),
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.scale(-T::one())));
            }
            Op::AddRow(a, bias) => {
                out.push((*a, g.clone()));
                if wants(*bias) {
                    let mut gb = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    out.push((*bias, gb));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.scale(*s))),
            Op::Relu(a) => {
                let x = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*a, Mat::new(g.rows(), g.cols(), data).expect("shape")));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let nf = T::lit(n as f64);
                let gv = val(*gain).data();
                let mut gx = Mat::zeros(g.rows(), n);
                let mut ggain = Mat::zeros(1, n);
                let mut gbias = Mat::zeros(1, n);
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..n {
                        let d = gr[j] * gv[j];
                        sum_d += d;
                        sum_dx += d * xr[j];
                        ggain.data_mut()[j] += gr[j] * xr[j];
                        gbias.data_mut()[j] += gr[j];
                    }
                    let k = inv_std[r] / nf;
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        let d = gr[j] * gv[j];
                        *o = k * (nf * d - sum_d - xr[j] * sum_dx);
                    }
                }
                out.push((*x, gx));
                out.push((*gain, ggain));
                out.push((*bias, gbias));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: T = g.row(r).iter().zip(y.row(r)).map(|(&a, &b)| a * b).sum();
                    for (j, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = y.get(r, j) * (g.get(r, j) - dot);
                    }
                }
                out.push((*a, ga));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let k = g.data()[0] / T::lit(*count as f64);
                let mut gl = Mat::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for (o, &p) in gl.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *o = p * k;
                        }
                        let cur = gl.get(r, t);
                        gl.set(r, t, cur - k);
                    }
                }
                out.push((*logits, gl));
            }
            Op::Kl {
                p,
                q,
                detach_p,
                mask,
                p_probs,
                q_probs,
                row_kl,
                count,
            } => {
                let k = g.data()[0] / T::lit(*count as f64);
                let (rows, cols) = p_probs.shape();
                if wants(*q) {
                    let mut gq = Mat::zeros(rows, cols);
                    for r in (0..rows).filter(|&r| mask[r]) {
                        for (j, o) in gq.row_mut(r).iter_mut().enumerate() {
                            *o = k * (q_probs.get(r, j) - p_probs.get(r, j));
                        }
                    }
                    out.push((*q, gq));
                }
                if !*detach_p && wants(*p) {
                    let mut gp = Mat::zeros(rows, cols);
                    for r in (0..rows).filter(|&r| mask[r]) {
                        for (j, o) in gp.row_mut(r).iter_mut().enumerate() {
                            let pj = p_probs.get(r, j);
                            let s = pj.ln() - q_probs.get(r, j).ln();
                            let s = if pj > T::zero() { s } else { T::zero() };
                            *o = k * pj * (s - row_kl[r]);
                        }
                    }
                    out.push((*p, gp));
                }
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                out.push((*a, Mat::filled(r, c, g.data()[0])));
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).shape();
                let inv = T::one() / T::lit(r.max(1) as f64);
                let mut ga = Mat::zeros(r, c);
                for i in 0..r {
                    for (o, &v) in ga.row_mut(i).iter_mut().zip(g.data()) {
                        *o = v * inv;
                    }
                }
                out.push((*a, ga));
            }
            Op::GatherRows(table, ids) => {
                let (r, c) = val(*table).shape();
                let mut gt = Mat::zeros(r, c);
                for (i, &id) in ids.iter().enumerate() {
                    for (o, &v) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                out.push((*table, gt));
            }
            Op::ScatterRows(src, idx) => {
                let c = g.cols();
                let mut gs = Mat::zeros(idx.len(), c);
                for (i, &dst) in idx.iter().enumerate() {
                    gs.row_mut(i).copy_from_slice(g.row(dst));
                }
                out.push((*src, gs));
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Mat::zeros(r, c);
                ga.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                out.push((*a, ga));
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Mat::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                out.push((*a, ga));
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for p in parts {
                    let rows = val(*p).rows();
                    if wants(*p) {
                        let data = g.data()[off * c..(off + rows) * c].to_vec();
                        out.push((*p, Mat::new(rows, c, data).expect("shape")));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (rows, cols) = val(*p).shape();
                    if wants(*p) {
                        let mut gp = Mat::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        out.push((*p, gp));
                    }
                    off += cols;
                }
            }
            Op::PickPerRow(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut ga = Mat::zeros(r, c);
                for (i, &j) in idx.iter().enumerate() {
                    ga.set(i, j, g.data()[i]);
                }
                out.push((*a, ga));
            }
            Op::ScaleRows(a, s) => {
                let (va, vs) = (val(*a), val(*s));
                if wants(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let k = vs.data()[r];
                        ga.row_mut(r).iter_mut().for_each(|v| *v *= k);
                    }
                    out.push((*a, ga));
                }
                if wants(*s) {
                    let data = (0..va.rows())
                        .map(|r| g.row(r).iter().zip(va.row(r)).map(|(&x, &y)| x * y).sum())
                        .collect();
                    out.push((*s, Mat::new(va.rows(), 1, data).expect("shape")));
                }
            }
        }
        out
    }
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows<T: Scalar>(m: &Mat<T>) -> Mat<T> {
    log_softmax_rows(m).map(|v| v.exp())
}

/// Row-wise log-softmax, stabilized by the row maximum.
pub fn log_softmax_rows<T: Scalar>(m: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let row = m.row(r);
        let max = row
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

//! Reverse-mode differentiation over a linear record of sequence-level ops.
//!
//! Parameters are borrowed from a [`ParamStore`]; a tape never mutates them.
//! `backward` runs at most once per tape.

use std::collections::HashMap;

use super::kernels::{self, affine, affine_transpose_acc, dot, lstm_cell, outer_acc, LstmWeights};
use super::params::{Gradients, ParamId, ParamStore};
use super::rnnt;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param(ParamId),
    Const,
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Scale(NodeId, f64),
    MatMulNT(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    SoftmaxRows(NodeId),
    Lstm { x: NodeId, w_ih: NodeId, w_hh: NodeId, b: NodeId, reverse: bool },
    TimeReduce { x: NodeId },
    GatherRows { x: NodeId, idx: Vec<usize> },
    SelectRow { x: NodeId, row: usize },
    Concat(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    Sum(NodeId),
    Rnnt { enc: NodeId, pred: NodeId, w: NodeId, b: NodeId, labels: Vec<usize>, blank: usize },
}

#[derive(Clone, Debug)]
enum Saved {
    None,
    Lstm { gates: Vec<f64>, cells: Vec<f64> },
    Rnnt(Box<RnntSaved>),
}

#[derive(Clone, Debug)]
struct RnntSaved {
    z: Vec<f64>,
    probs: Vec<f64>,
    grad_blank: Vec<f64>,
    grad_label: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    saved: Saved,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    backward_done: bool,
}

fn shape_err(what: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_nodes: HashMap::new(), backward_done: false }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded op so the tape can be reused for a new forward.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_nodes.clear();
        self.backward_done = false;
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (Op::Param(p), _) => self.store.tensor(*p),
            (_, Some(v)) => v,
            _ => unreachable!("non-param node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, saved: Saved) -> NodeId {
        self.nodes.push(Node { op, value: Some(value), saved });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None, saved: Saved::None });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const, t, Saved::None)
    }

    /// Row-wise `x Wᵀ (+ b)`; `x` may be a vector or a `[T × n]` matrix.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (m, n) = match wv.shape() {
            [m, n] => (*m, *n),
            _ => return Err(shape_err("linear weight must be 2-D", wv, xv)),
        };
        if xv.cols() != n || xv.shape().len() > 2 {
            return Err(shape_err("linear weight/input", wv, xv));
        }
        let bv = b.map(|b| self.value(b));
        if let Some(bv) = bv {
            if bv.numel() != m {
                return Err(shape_err("linear weight/bias", wv, bv));
            }
        }
        let rows = xv.rows();
        let mut out = vec![0.0; rows * m];
        for t in 0..rows {
            affine(wv.data(), xv.row(t), bv.map(Tensor::data), &mut out[t * m..(t + 1) * m]);
        }
        let shape = if xv.shape().len() == 1 { vec![m] } else { vec![rows, m] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Linear { x, w, b }, value, Saved::None))
    }

    fn zip_same(&mut self, a: NodeId, b: NodeId, what: &str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(what, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v, Saved::None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v, Saved::None))
    }

    fn map(&mut self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::new(av.shape().to_vec(), av.data().iter().map(|v| f(*v)).collect())
            .expect("same shape")
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, f64::tanh);
        self.push(Op::Tanh(a), v, Saved::None)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, kernels::sigmoid);
        self.push(Op::Sigmoid(a), v, Saved::None)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.map(a, |x| x * s);
        self.push(Op::Scale(a, s), v, Saved::None)
    }

    /// `a bᵀ` for `a: [T × p]`, `b: [R × p]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(shape_err("matmul_nt", av, bv));
        }
        let (t_len, r_len) = (av.rows(), bv.rows());
        let mut out = vec![0.0; t_len * r_len];
        for t in 0..t_len {
            for r in 0..r_len {
                out[t * r_len + r] = dot(av.row(t), bv.row(r));
            }
        }
        let v = Tensor::matrix(t_len, r_len, out)?;
        Ok(self.push(Op::MatMulNT(a, b), v, Saved::None))
    }

    /// `a b` for `a: [T × R]`, `b: [R × p]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let (t_len, r_len, p) = (av.rows(), bv.rows(), bv.cols());
        let mut out = vec![0.0; t_len * p];
        for t in 0..t_len {
            let o = &mut out[t * p..(t + 1) * p];
            for r in 0..r_len {
                let a_tr = av.row(t)[r];
                for (ov, bvv) in o.iter_mut().zip(bv.row(r)) {
                    *ov += a_tr * bvv;
                }
            }
        }
        let v = Tensor::matrix(t_len, p, out)?;
        Ok(self.push(Op::MatMul(a, b), v, Saved::None))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.cols() == 0 {
            return Err(Error::Invalid("softmax over zero columns".into()));
        }
        let mut v = av.clone();
        for t in 0..v.rows() {
            kernels::softmax_in_place(v.row_mut(t));
        }
        Ok(self.push(Op::SoftmaxRows(a), v, Saved::None))
    }

    /// Full-sequence LSTM from zero state (see [`kernels::lstm_sequence`]).
    pub fn lstm(&mut self, x: NodeId, w_ih: NodeId, w_hh: NodeId, b: NodeId, reverse: bool) -> Result<NodeId> {
        let w = LstmWeights::from_tensors(self.value(w_ih), self.value(w_hh), self.value(b))?;
        let xv = self.value(x);
        if xv.shape().len() != 2 || xv.cols() != w.input {
            return Err(Error::Shape(format!(
                "lstm expects [T × {}] input, got {:?}",
                w.input,
                xv.shape()
            )));
        }
        let (t_len, u) = (xv.rows(), w.units);
        let mut out = vec![0.0; t_len * u];
        let mut gates = vec![0.0; t_len * 4 * u];
        let mut cells = vec![0.0; t_len * u];
        let mut h = vec![0.0; u];
        let mut c = vec![0.0; u];
        for k in 0..t_len {
            let t = if reverse { t_len - 1 - k } else { k };
            lstm_cell(&w, xv.row(t), &mut h, &mut c, &mut gates[t * 4 * u..(t + 1) * 4 * u]);
            out[t * u..(t + 1) * u].copy_from_slice(&h);
            cells[t * u..(t + 1) * u].copy_from_slice(&c);
        }
        let v = Tensor::matrix(t_len, u, out)?;
        Ok(self.push(Op::Lstm { x, w_ih, w_hh, b, reverse }, v, Saved::Lstm { gates, cells }))
    }

    pub fn time_reduce(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let v = super::time_reduce(self.value(x), factor)?;
        Ok(self.push(Op::TimeReduce { x }, v, Saved::None))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::Shape(format!("gather_rows needs a matrix, got {:?}", xv.shape())));
        }
        let (rows, d) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(Error::Invalid(format!("row {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let v = Tensor::matrix(idx.len(), d, out)?;
        Ok(self.push(Op::GatherRows { x, idx: idx.to_vec() }, v, Saved::None))
    }

    pub fn select_row(&mut self, x: NodeId, row: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if row >= xv.rows() {
            return Err(Error::Invalid(format!("row {row} out of range for {:?}", xv.shape())));
        }
        let v = Tensor::vector(xv.row(row).to_vec());
        Ok(self.push(Op::SelectRow { x, row }, v, Saved::None))
    }

    /// Flat concatenation into a vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let data: Vec<f64> = parts.iter().flat_map(|p| self.value(*p).data().iter().copied()).collect();
        self.push(Op::Concat(parts.to_vec()), Tensor::vector(data), Saved::None)
    }

    /// Stacks vectors and/or matrices of equal width along the row axis.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let d = parts.first().map(|p| self.value(*p).cols()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != d {
                return Err(Error::Shape(format!("stack_rows width {d} vs {:?}", v.shape())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let v = Tensor::matrix(rows, d, data)?;
        Ok(self.push(Op::StackRows(parts.to_vec()), v, Saved::None))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), Saved::None)
    }

    /// Negative log-likelihood of `labels` under a transducer whose joint is
    /// `log_softmax(w · tanh(enc[t] + pred[u]) + b)`.
    pub fn rnnt_loss(
        &mut self,
        enc: NodeId,
        pred: NodeId,
        w: NodeId,
        b: NodeId,
        labels: &[usize],
        blank: usize,
    ) -> Result<NodeId> {
        let (ev, pv, wv, bv) = (self.value(enc), self.value(pred), self.value(w), self.value(b));
        let frames = ev.rows();
        let n_labels = labels.len();
        let j = ev.cols();
        let vocab = bv.numel();
        if ev.shape().len() != 2 || frames == 0 {
            return Err(Error::Invalid(format!("rnnt encodings must be [T≥1 × J], got {:?}", ev.shape())));
        }
        if pv.shape() != [n_labels + 1, j] {
            return Err(Error::Shape(format!(
                "predictor rows must be [{} × {j}], got {:?}",
                n_labels + 1,
                pv.shape()
            )));
        }
        if wv.shape() != [vocab, j] {
            return Err(shape_err("rnnt output weight/bias", wv, bv));
        }
        if blank >= vocab || labels.iter().any(|&l| l >= vocab || l == blank) {
            return Err(Error::Invalid("rnnt labels must be non-blank ids inside the vocabulary".into()));
        }
        let w1 = n_labels + 1;
        let cells = frames * w1;
        let mut z = vec![0.0; cells * j];
        let mut probs = vec![0.0; cells * vocab];
        let mut lp_blank = vec![0.0; cells];
        let mut lp_label = vec![0.0; frames * n_labels];
        let mut logits = vec![0.0; vocab];
        for t in 0..frames {
            for u in 0..w1 {
                let cell = t * w1 + u;
                let zc = &mut z[cell * j..(cell + 1) * j];
                for ((zv, e), p) in zc.iter_mut().zip(ev.row(t)).zip(pv.row(u)) {
                    *zv = (e + p).tanh();
                }
                affine(wv.data(), zc, Some(bv.data()), &mut logits);
                kernels::log_softmax_in_place(&mut logits);
                lp_blank[cell] = logits[blank];
                if u < n_labels {
                    lp_label[t * n_labels + u] = logits[labels[u]];
                }
                for (pr, l) in probs[cell * vocab..(cell + 1) * vocab].iter_mut().zip(&logits) {
                    *pr = l.exp();
                }
            }
        }
        let lattice = rnnt::forward_lattice(&lp_blank, &lp_label, frames, n_labels);
        let beta = rnnt::backward_lattice(&lp_blank, &lp_label, frames, n_labels);
        let (grad_blank, grad_label) = rnnt::nll_grads(&lp_blank, &lp_label, &lattice, &beta);
        let saved = RnntSaved { z, probs, grad_blank, grad_label };
        let v = Tensor::scalar(-lattice.log_likelihood);
        Ok(self.push(
            Op::Rnnt { enc, pred, w, b, labels: labels.to_vec(), blank },
            v,
            Saved::Rnnt(Box::new(saved)),
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are returned for every
    /// parameter of the store (zero where unreachable), frozen ones included.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(loss.0));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.store);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            out.visited.push(i);
            self.backprop_node(i, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> &'g mut Vec<f64> {
        let n = self.value(id).numel();
        grads[id.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Param(p) => {
                for (d, v) in out.per_param[p.index()].data_mut().iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::Const => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let m = wv.shape()[0];
                let rows = xv.rows();
                {
                    let dx = self.acc(grads, *x);
                    let n = xv.cols();
                    for t in 0..rows {
                        affine_transpose_acc(wv.data(), &g[t * m..(t + 1) * m], &mut dx[t * n..(t + 1) * n]);
                    }
                }
                {
                    let dw = self.acc(grads, *w);
                    for t in 0..rows {
                        outer_acc(dw, &g[t * m..(t + 1) * m], xv.row(t));
                    }
                }
                if let Some(b) = b {
                    let db = self.acc(grads, *b);
                    for t in 0..rows {
                        for (d, v) in db.iter_mut().zip(&g[t * m..(t + 1) * m]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    let d = self.acc(grads, *id);
                    for (d, v) in d.iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                {
                    let da = self.acc(grads, *a);
                    for k in 0..g.len() {
                        da[k] += g[k] * bv[k];
                    }
                }
                let db = self.acc(grads, *b);
                for k in 0..g.len() {
                    db[k] += g[k] * av[k];
                }
            }
            Op::Tanh(a) => {
                let y = node.value.as_ref().expect("value").data();
                let da = self.acc(grads, *a);
                for k in 0..g.len() {
                    da[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.as_ref().expect("value").data();
                let da = self.acc(grads, *a);
                for k in 0..g.len() {
                    da[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }
            Op::Scale(a, s) => {
                let da = self.acc(grads, *a);
                for k in 0..g.len() {
                    da[k] += g[k] * s;
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (t_len, r_len, p) = (av.rows(), bv.rows(), av.cols());
                {
                    let da = self.acc(grads, *a);
                    for t in 0..t_len {
                        for r in 0..r_len {
                            let gv = g[t * r_len + r];
                            for (d, bvv) in da[t * p..(t + 1) * p].iter_mut().zip(bv.row(r)) {
                                *d += gv * bvv;
                            }
                        }
                    }
                }
                let db = self.acc(grads, *b);
                for t in 0..t_len {
                    for r in 0..r_len {
                        let gv = g[t * r_len + r];
                        for (d, avv) in db[r * p..(r + 1) * p].iter_mut().zip(av.row(t)) {
                            *d += gv * avv;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (t_len, r_len, p) = (av.rows(), bv.rows(), bv.cols());
                {
                    let da = self.acc(grads, *a);
                    for t in 0..t_len {
                        for r in 0..r_len {
                            da[t * r_len + r] += dot(&g[t * p..(t + 1) * p], bv.row(r));
                        }
                    }
                }
                let db = self.acc(grads, *b);
                for t in 0..t_len {
                    for r in 0..r_len {
                        let a_tr = av.row(t)[r];
                        for (d, gv) in db[r * p..(r + 1) * p].iter_mut().zip(&g[t * p..(t + 1) * p]) {
                            *d += a_tr * gv;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.as_ref().expect("value");
                let c = y.cols();
                let da = self.acc(grads, *a);
                for t in 0..y.rows() {
                    let yr = y.row(t);
                    let gr = &g[t * c..(t + 1) * c];
                    let s = dot(gr, yr);
                    for k in 0..c {
                        da[t * c + k] += yr[k] * (gr[k] - s);
                    }
                }
            }
            Op::Lstm { x, w_ih, w_hh, b, reverse } => {
                let Saved::Lstm { gates, cells } = &node.saved else { unreachable!() };
                self.lstm_backward(node, *x, *w_ih, *w_hh, *b, *reverse, gates, cells, g, grads)?;
            }
            Op::TimeReduce { x, .. } => {
                let xv = self.value(*x);
                let n = xv.numel();
                let dx = self.acc(grads, *x);
                // Reduced row k holds original rows k*f..k*f+f back to back,
                // so the flat layouts coincide up to the zero padding.
                for (d, v) in dx.iter_mut().zip(&g[..n]) {
                    *d += v;
                }
            }
            Op::GatherRows { x, idx } => {
                let d = self.value(*x).cols();
                let dx = self.acc(grads, *x);
                for (k, &r) in idx.iter().enumerate() {
                    for (dv, gv) in dx[r * d..(r + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]) {
                        *dv += gv;
                    }
                }
            }
            Op::SelectRow { x, row } => {
                let d = self.value(*x).cols();
                let dx = self.acc(grads, *x);
                for (dv, gv) in dx[row * d..(row + 1) * d].iter_mut().zip(g) {
                    *dv += gv;
                }
            }
            Op::Concat(parts) | Op::StackRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    let dp = self.acc(grads, *p);
                    for (dv, gv) in dp.iter_mut().zip(&g[off..off + n]) {
                        *dv += gv;
                    }
                    off += n;
                }
            }
            Op::Sum(a) => {
                let da = self.acc(grads, *a);
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
            Op::Rnnt { enc, pred, w, b, labels, blank } => {
                let Saved::Rnnt(saved) = &node.saved else { unreachable!() };
                self.rnnt_backward(*enc, *pred, *w, *b, labels, *blank, saved, g[0], grads);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        node: &Node,
        x: NodeId,
        w_ih: NodeId,
        w_hh: NodeId,
        b: NodeId,
        reverse: bool,
        gates: &[f64],
        cells: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let w = LstmWeights::from_tensors(self.value(w_ih), self.value(w_hh), self.value(b))?;
        let xv = self.value(x);
        let hs = node.value.as_ref().expect("value").data();
        let (t_len, u, n) = (xv.rows(), w.units, w.input);
        let mut dx = vec![0.0; t_len * n];
        let mut dw_ih = vec![0.0; 4 * u * n];
        let mut dw_hh = vec![0.0; 4 * u * u];
        let mut db = vec![0.0; 4 * u];
        let mut dh_next = vec![0.0; u];
        let mut dc_next = vec![0.0; u];
        let mut da = vec![0.0; 4 * u];
        let zeros = vec![0.0; u];
        for k in (0..t_len).rev() {
            let t = if reverse { t_len - 1 - k } else { k };
            let prev = if k == 0 { None } else if reverse { Some(t + 1) } else { Some(t - 1) };
            let (h_prev, c_prev) = match prev {
                Some(p) => (&hs[p * u..(p + 1) * u], &cells[p * u..(p + 1) * u]),
                None => (&zeros[..], &zeros[..]),
            };
            let gt = &gates[t * 4 * u..(t + 1) * 4 * u];
            let ct = &cells[t * u..(t + 1) * u];
            for j in 0..u {
                let (ig, fg, cg, og) = (gt[j], gt[u + j], gt[2 * u + j], gt[3 * u + j]);
                let dh = g[t * u + j] + dh_next[j];
                let tc = ct[j].tanh();
                let dc = dh * og * (1.0 - tc * tc) + dc_next[j];
                da[j] = dc * cg * ig * (1.0 - ig);
                da[u + j] = dc * c_prev[j] * fg * (1.0 - fg);
                da[2 * u + j] = dc * ig * (1.0 - cg * cg);
                da[3 * u + j] = dh * tc * og * (1.0 - og);
                dc_next[j] = dc * fg;
            }
            outer_acc(&mut dw_ih, &da, xv.row(t));
            outer_acc(&mut dw_hh, &da, h_prev);
            for (d, v) in db.iter_mut().zip(&da) {
                *d += v;
            }
            affine_transpose_acc(w.w_ih, &da, &mut dx[t * n..(t + 1) * n]);
            dh_next.fill(0.0);
            affine_transpose_acc(w.w_hh, &da, &mut dh_next);
        }
        for (id, d) in [(x, dx), (w_ih, dw_ih), (w_hh, dw_hh), (b, db)] {
            let acc = self.acc(grads, id);
            for (a, v) in acc.iter_mut().zip(d) {
                *a += v;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn rnnt_backward(
        &self,
        enc: NodeId,
        pred: NodeId,
        w: NodeId,
        b: NodeId,
        labels: &[usize],
        blank: usize,
        saved: &RnntSaved,
        upstream: f64,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (ev, wv, bv) = (self.value(enc), self.value(w), self.value(b));
        let (frames, j, vocab) = (ev.rows(), ev.cols(), bv.numel());
        let n_labels = labels.len();
        let w1 = n_labels + 1;
        let mut d_enc = vec![0.0; frames * j];
        let mut d_pred = vec![0.0; w1 * j];
        let mut d_w = vec![0.0; vocab * j];
        let mut d_b = vec![0.0; vocab];
        let mut d_logits = vec![0.0; vocab];
        let mut dz = vec![0.0; j];
        for t in 0..frames {
            for u in 0..w1 {
                let cell = t * w1 + u;
                let gb = saved.grad_blank[cell] * upstream;
                let gl = if u < n_labels { saved.grad_label[t * n_labels + u] * upstream } else { 0.0 };
                if gb == 0.0 && gl == 0.0 {
                    continue;
                }
                let total = gb + gl;
                let probs = &saved.probs[cell * vocab..(cell + 1) * vocab];
                for (d, p) in d_logits.iter_mut().zip(probs) {
                    *d = -p * total;
                }
                d_logits[blank] += gb;
                if u < n_labels {
                    d_logits[labels[u]] += gl;
                }
                let z = &saved.z[cell * j..(cell + 1) * j];
                outer_acc(&mut d_w, &d_logits, z);
                for (d, v) in d_b.iter_mut().zip(&d_logits) {
                    *d += v;
                }
                dz.fill(0.0);
                affine_transpose_acc(wv.data(), &d_logits, &mut dz);
                for k in 0..j {
                    let da = dz[k] * (1.0 - z[k] * z[k]);
                    d_enc[t * j + k] += da;
                    d_pred[u * j + k] += da;
                }
            }
        }
        for (id, d) in [(enc, d_enc), (pred, d_pred), (w, d_w), (b, d_b)] {
            let acc = self.acc(grads, id);
            for (a, v) in acc.iter_mut().zip(d) {
                *a += v;
            }
        }
    }
}

//! Reverse-mode differentiation over dense row-major matrices.
//!
//! The vocabulary is deliberately small: it covers exactly what the query
//! policy and the weight-synthesizing networks need. Nodes live on a [`Tape`]
//! in creation order, so the tape is always topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use al_policy::diff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::from_vec(2, 1, vec![0.5, -1.0]).unwrap());
//! let x = tape.constant(Tensor::from_vec(1, 2, vec![2.0, 3.0]).unwrap());
//! let y = tape.matmul(x, w).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(&tape, w).data(), &[2.0, 3.0]);
//! ```

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "ragged rows: expected {cols} columns, found {}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm(
            Operand::plain(self),
            Operand::plain(other),
            &mut out,
            0.0,
        );
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`, shapes must agree.
    pub fn axpy(&mut self, scale: f64, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// A matrix operand of a GEMM call, possibly viewed transposed.
#[derive(Clone, Copy)]
struct Operand<'a> {
    t: &'a Tensor,
    transposed: bool,
}

impl<'a> Operand<'a> {
    fn plain(t: &'a Tensor) -> Self {
        Self {
            t,
            transposed: false,
        }
    }

    fn trans(t: &'a Tensor) -> Self {
        Self {
            t,
            transposed: true,
        }
    }

    fn rows(&self) -> usize {
        if self.transposed {
            self.t.cols
        } else {
            self.t.rows
        }
    }

    fn cols(&self) -> usize {
        if self.transposed {
            self.t.rows
        } else {
            self.t.cols
        }
    }

    fn strides(&self) -> (isize, isize) {
        let (rs, cs) = (self.t.cols as isize, 1);
        if self.transposed {
            (cs, rs)
        } else {
            (rs, cs)
        }
    }
}

/// `out = a * b + beta * out`
fn gemm(a: Operand<'_>, b: Operand<'_>, out: &mut Tensor, beta: f64) {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(k, b.rows());
    debug_assert_eq!(out.shape(), (m, n));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.scale_in_place(beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the pointers come from live tensors whose extents match the
    // dimensions and strides computed above; `out` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.t.data.as_ptr(),
            rsa,
            csa,
            b.t.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    RowSoftmax(NodeId),
    NegEntropy(NodeId),
    Mse(NodeId, NodeId),
    Scale(NodeId, f64),
    Add(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    Transpose(NodeId),
    LogPick(NodeId, usize, usize),
    Sum(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a computation. Inputs always precede the nodes that use
/// them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records `op` only when some input is differentiable; otherwise the
    /// result is stored as a constant.
    fn record(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let rg = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        if rg {
            self.push(value, op, true)
        } else {
            self.push(value, Op::Leaf, false)
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.record(v, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a 1xC bias row to every row of an RxC input.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows != 1 || bv.cols != xv.cols {
            return Err(Error::Shape(format!(
                "bias {}x{} for input {}x{}",
                bv.rows, bv.cols, xv.rows, xv.cols
            )));
        }
        let mut v = xv.clone();
        for row in v.data.chunks_mut(bv.cols.max(1)) {
            for (a, b) in row.iter_mut().zip(&bv.data) {
                *a += b;
            }
        }
        Ok(self.record(v, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|a| *a = a.max(0.0));
        self.record(v, Op::Relu(x), &[x])
    }

    /// Softmax of every row independently, computed with max subtraction.
    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.cols == 0 {
            return Err(Error::EmptyInput("row_softmax"));
        }
        let mut v = xv.clone();
        for row in v.data.chunks_mut(xv.cols) {
            softmax_in_place(row);
        }
        Ok(self.record(v, Op::RowSoftmax(x), &[x]))
    }

    /// `sum p ln p` over all entries (the negated entropy of each row, summed),
    /// with `0 ln 0 = 0`. Returns a 1x1 node.
    pub fn neg_entropy(&mut self, p: NodeId) -> NodeId {
        let s = self
            .value(p)
            .data
            .iter()
            .map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 })
            .sum();
        self.record(Tensor::scalar(s), Op::NegEntropy(p), &[p])
    }

    /// Mean squared difference over all entries. Returns a 1x1 node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "mse of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        if av.is_empty() {
            return Err(Error::EmptyInput("mse"));
        }
        let s: f64 = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let v = Tensor::scalar(s / av.len() as f64);
        Ok(self.record(v, Op::Mse(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let mut v = self.value(x).clone();
        v.scale_in_place(s);
        self.record(v, Op::Scale(x, s), &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "add of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut v = av.clone();
        v.axpy(1.0, bv);
        Ok(self.record(v, Op::Add(a, b), &[a, b]))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows != bv.rows {
            return Err(Error::Shape(format!(
                "concat_cols of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let cols = av.cols + bv.cols;
        let mut data = Vec::with_capacity(av.rows * cols);
        for r in 0..av.rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let v = Tensor {
            rows: av.rows,
            cols,
            data,
        };
        Ok(self.record(v, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).transpose();
        self.record(v, Op::Transpose(x), &[x])
    }

    /// `ln x[r, c]` as a 1x1 node; the log-likelihood of one entry of a
    /// probability row.
    pub fn log_pick(&mut self, x: NodeId, r: usize, c: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if r >= xv.rows || c >= xv.cols {
            return Err(Error::Shape(format!(
                "log_pick ({r}, {c}) outside {:?}",
                xv.shape()
            )));
        }
        let v = Tensor::scalar(xv.get(r, c).max(f64::MIN_POSITIVE).ln());
        Ok(self.record(v, Op::LogPick(x, r, c), &[x]))
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).data.iter().sum());
        self.record(v, Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`. Nodes not on a path from a
    /// differentiable leaf to `loss` get no gradient.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a 1x1 loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if rg(a) {
                    let slot = slot_for(grads, a, av.shape());
                    gemm(Operand::plain(g), Operand::trans(bv), slot, 1.0);
                }
                if rg(b) {
                    let slot = slot_for(grads, b, bv.shape());
                    gemm(Operand::trans(av), Operand::plain(g), slot, 1.0);
                }
            }
            Op::AddBias(x, bias) => {
                if rg(x) {
                    accumulate(grads, x, g);
                }
                if rg(bias) {
                    let cols = g.cols;
                    let slot = slot_for(grads, bias, (1, cols));
                    for row in g.data.chunks(cols.max(1)) {
                        for (s, v) in slot.data.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let out = &node.value;
                let slot = slot_for(grads, x, out.shape());
                for ((s, gv), o) in slot.data.iter_mut().zip(&g.data).zip(&out.data) {
                    if *o > 0.0 {
                        *s += gv;
                    }
                }
            }
            Op::RowSoftmax(x) => {
                let p = &node.value;
                let cols = p.cols;
                let slot = slot_for(grads, x, p.shape());
                for ((srow, grow), prow) in slot
                    .data
                    .chunks_mut(cols)
                    .zip(g.data.chunks(cols))
                    .zip(p.data.chunks(cols))
                {
                    let dot: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for ((s, gv), pv) in srow.iter_mut().zip(grow).zip(prow) {
                        *s += pv * (gv - dot);
                    }
                }
            }
            Op::NegEntropy(p) => {
                let pv = self.value(p);
                let gs = g.item();
                let slot = slot_for(grads, p, pv.shape());
                for (s, &q) in slot.data.iter_mut().zip(&pv.data) {
                    if q > 0.0 {
                        *s += gs * (q.ln() + 1.0);
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let k = 2.0 * g.item() / av.len() as f64;
                if rg(a) {
                    let slot = slot_for(grads, a, av.shape());
                    for ((s, x), y) in slot.data.iter_mut().zip(&av.data).zip(&bv.data) {
                        *s += k * (x - y);
                    }
                }
                if rg(b) {
                    let slot = slot_for(grads, b, bv.shape());
                    for ((s, x), y) in slot.data.iter_mut().zip(&av.data).zip(&bv.data) {
                        *s -= k * (x - y);
                    }
                }
            }
            Op::Scale(x, s) => {
                let slot = slot_for(grads, x, g.shape());
                slot.axpy(s, g);
            }
            Op::Add(a, b) => {
                if rg(a) {
                    accumulate(grads, a, g);
                }
                if rg(b) {
                    accumulate(grads, b, g);
                }
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(a).cols;
                let bc = self.value(b).cols;
                if rg(a) {
                    let slot = slot_for(grads, a, (g.rows, ac));
                    for r in 0..g.rows {
                        for c in 0..ac {
                            slot.data[r * ac + c] += g.get(r, c);
                        }
                    }
                }
                if rg(b) {
                    let slot = slot_for(grads, b, (g.rows, bc));
                    for r in 0..g.rows {
                        for c in 0..bc {
                            slot.data[r * bc + c] += g.get(r, ac + c);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let gt = g.transpose();
                accumulate(grads, x, &gt);
            }
            Op::LogPick(x, r, c) => {
                let xv = self.value(x);
                let shape = xv.shape();
                let q = xv.get(r, c).max(f64::MIN_POSITIVE);
                let slot = slot_for(grads, x, shape);
                let cols = slot.cols;
                slot.data[r * cols + c] += g.item() / q;
            }
            Op::Sum(x) => {
                let gs = g.item();
                let shape = self.value(x).shape();
                let slot = slot_for(grads, x, shape);
                slot.data.iter_mut().for_each(|s| *s += gs);
            }
        }
    }
}

fn slot_for(grads: &mut [Option<Tensor>], id: NodeId, shape: (usize, usize)) -> &mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: &Tensor) {
    match &mut grads[id.0] {
        Some(t) => t.axpy(1.0, g),
        slot @ None => *slot = Some(g.clone()),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, or zeros shaped like its value when it is not on the
    /// path to the loss.
    pub fn wrt(&self, tape: &Tape, id: NodeId) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(id).shape();
            Tensor::zeros(r, c)
        })
    }
}

/// Adam optimizer state with bias correction. Minimizes.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 0.001;

    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, lr: f64) -> Self {
        let first: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.rows, p.cols))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    /// One bias-corrected Adam update of `params` along `-grads`.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "adam over {} params with {} grads and {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "adam param {:?} grad {:?} moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((w, &gi), mi), vi) in p
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(&mut m.data)
                .zip(&mut v.data)
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the largest relative error over all parameter
/// entries.
///
/// `build` receives a fresh tape plus one node per parameter and must return
/// the scalar output node. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn finite_diff_check<F>(build: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidStep(h));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = build(&mut tape, &ids)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = build(&mut tape, &ids)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, &id) in ids.iter().enumerate() {
        let analytic = grads.wrt(&tape, id);
        for k in 0..params[pi].len() {
            let orig = work[pi].data[k];
            work[pi].data[k] = orig + h;
            let up = eval(&work)?;
            work[pi].data[k] = orig - h;
            let down = eval(&work)?;
            work[pi].data[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data[k];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Result of [`finite_diff_check_piecewise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    pub max_error: f64,
    /// Entries whose two one-sided differences disagreed.
    pub kinks: usize,
}

/// Like [`finite_diff_check`], for functions built from ReLUs. A pre-activation
/// within `h` of zero makes the central difference straddle a kink; such
/// entries are recognised by one-sided differences that disagree by more than
/// `1e-3` relative, and are scored against the best of the central and the two
/// one-sided differences.
pub fn finite_diff_check_piecewise<F>(build: F, params: &[Tensor], h: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidStep(h));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = build(&mut tape, &ids)?;
        Ok(tape.value(out).item())
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = build(&mut tape, &ids)?;
    let centre = tape.value(out).item();
    let grads = tape.backward(out)?;

    let mut report = FdReport {
        max_error: 0.0,
        kinks: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, &id) in ids.iter().enumerate() {
        let analytic = grads.wrt(&tape, id);
        for k in 0..params[pi].len() {
            let orig = work[pi].data[k];
            work[pi].data[k] = orig + h;
            let up = eval(&work)?;
            work[pi].data[k] = orig - h;
            let down = eval(&work)?;
            work[pi].data[k] = orig;
            let a = analytic.data[k];
            let fwd = (up - centre) / h;
            let bwd = (centre - down) / h;
            let mut err = rel(a, (up - down) / (2.0 * h));
            if rel(fwd, bwd) > 1e-3 {
                report.kinks += 1;
                err = err.min(rel(a, fwd)).min(rel(a, bwd));
            }
            report.max_error = report.max_error.max(err);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 2, &[-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 3, &[4.2, 4.2, 4.2]));
        let p = tape.row_softmax(x).unwrap();
        for &v in tape.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_empty_row_fails() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 0));
        assert!(matches!(tape.row_softmax(x), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn mse_of_identical_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let m = tape.mse(a, a).unwrap();
        assert_eq!(tape.value(m).item(), 0.0);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
        let bias = tape.constant(Tensor::zeros(1, 2));
        assert!(matches!(tape.add_bias(a, bias), Err(Error::Shape(_))));
        let c = tape.constant(Tensor::zeros(3, 3));
        assert!(matches!(tape.add(a, c), Err(Error::Shape(_))));
        assert!(matches!(tape.concat_cols(a, c), Err(Error::Shape(_))));
        assert!(matches!(tape.backward(a), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_map_gradient_is_input() {
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 3, &[0.5, -2.0, 7.0]));
        let w = tape.param(t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap().wrt(&tape, w);
        assert_eq!(g.data(), &[0.5, 0.5, -2.0, -2.0, 7.0, 7.0]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(t(1, 1, &[3.0]));
        let unused = tape.param(t(2, 2, &[1.0; 4]));
        let loss = tape.scale(w, 2.0);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(&tape, unused), Tensor::zeros(2, 2));
        assert_eq!(grads.wrt(&tape, w).item(), 2.0);
    }

    #[test]
    fn constants_do_not_record() {
        let mut tape = Tape::new();
        let a = tape.constant(t(1, 1, &[1.0]));
        let b = tape.scale(a, 3.0);
        assert!(!tape.requires_grad(b));
        let grads = tape.backward(b).unwrap();
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn softmax_log_likelihood_gradient_is_p_minus_onehot() {
        let logits = [0.3, -1.2, 2.5, 0.0, 0.7];
        for target in 0..logits.len() {
            let mut tape = Tape::new();
            let x = tape.param(t(1, 5, &logits));
            let p = tape.row_softmax(x).unwrap();
            let lp = tape.log_pick(p, 0, target).unwrap();
            let nll = tape.scale(lp, -1.0);
            let g = tape.backward(nll).unwrap().wrt(&tape, x);
            let probs = tape.value(p).clone();
            for k in 0..5 {
                let expect = probs.get(0, k) - if k == target { 1.0 } else { 0.0 };
                assert!((g.get(0, k) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = t(1, 3, &[1.0, -2.0, 0.5]);
        let before = p.clone();
        let mut st = AdamState::new([&p], 0.001);
        st.update(&mut [&mut p], &[Tensor::zeros(1, 3)]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_sign() {
        let mut p = t(1, 4, &[0.0, 1.0, -1.0, 3.0]);
        let before = p.clone();
        let g = t(1, 4, &[0.2, -5.0, 1e-3, -0.7]);
        let mut st = AdamState::new([&p], 0.001);
        st.update(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
        for k in 0..4 {
            let delta = p.data()[k] - before.data()[k];
            let expect = -g.data()[k].signum() * 0.001;
            assert!((delta - expect).abs() < 1e-6, "{delta} vs {expect}");
        }
    }

    #[test]
    fn adam_is_deterministic_and_checks_shapes() {
        let g = t(2, 1, &[0.3, -0.1]);
        let run = || {
            let mut p = t(2, 1, &[1.0, 2.0]);
            let mut st = AdamState::new([&p], 0.001);
            for _ in 0..3 {
                st.update(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
        let mut p = t(2, 1, &[1.0, 2.0]);
        let mut st = AdamState::new([&p], 0.001);
        assert!(matches!(
            st.update(&mut [&mut p], &[Tensor::zeros(1, 2)]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn finite_diff_rejects_zero_step() {
        let r = finite_diff_check(|tape, ids| Ok(tape.sum(ids[0])), &[Tensor::zeros(1, 1)], 0.0);
        assert!(matches!(r, Err(Error::InvalidStep(_))));
    }

    #[test]
    fn finite_diff_on_quadratic_is_tight() {
        let p = t(2, 2, &[0.3, -0.7, 1.1, 0.2]);
        let err = finite_diff_check(
            |tape, ids| {
                let z = tape.constant(Tensor::zeros(2, 2));
                tape.mse(ids[0], z)
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }
}

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::tensor::{matmul_nt_into, matmul_tn_into, transpose_data, Tensor};
use super::DiffError;

const NORM_EPS: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

thread_local! {
    static BACKWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of backward passes executed on the current thread.
pub fn backward_passes() -> u64 {
    BACKWARD_PASSES.with(Cell::get)
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Affine(usize, f64),
    MulScalar(usize, usize),
    Recip(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Clamp(usize, f64, f64),
    StretchGate(usize, f64, f64, f64),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SqDist(usize, usize),
    NormalizeRows(usize),
    LayerNormRows(usize),
    Select(usize, usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    // false when no leaf feeds this node
    grad: bool,
}

impl Op {
    fn needs_grad(&self, nodes: &[Node]) -> bool {
        let g = |i: usize| nodes[i].grad;
        match self {
            Op::Leaf => true,
            Op::Const => false,
            Op::ConcatCols(p) | Op::ConcatRows(p) => p.iter().any(|&i| g(i)),
            Op::Transpose(a)
            | Op::Affine(a, _)
            | Op::Recip(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Clamp(a, _, _)
            | Op::StretchGate(a, _, _, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::NormalizeRows(a)
            | Op::LayerNormRows(a)
            | Op::Select(a, _) => g(*a),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulScalar(a, b)
            | Op::SqDist(a, b) => g(*a) || g(*b),
        }
    }
}

/// Single-use record of a forward computation.
///
/// Ops never fail eagerly: the first shape or finiteness error poisons the
/// tape and is reported by [`Tape::status`], [`Tape::backward`] and [`Tape::grad`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    error: RefCell<Option<DiffError>>,
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

/// Adjoints from one backward pass, indexed by node.
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match self.adjoints.get(var.id).and_then(Option::as_ref) {
            Some(g) => Tensor::raw(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn wrt_all(&self, vars: &[Var<'_>]) -> Vec<Tensor> {
        vars.iter().map(|&v| self.wrt(v)).collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First error recorded on this tape, if any.
    pub fn status(&self) -> Result<(), DiffError> {
        match &*self.error.borrow() {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        if !value.is_finite() {
            self.fail(DiffError::NonFinite { op: "leaf" });
        }
        self.push(value, Op::Leaf)
    }

    /// A value that takes part in the forward pass but is never differentiated.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        if !value.is_finite() {
            self.fail(DiffError::NonFinite { op: "constant" });
        }
        self.push(value, Op::Const)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(v))
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let Some(first) = vals.first() else {
            return self.shape_error("concat_cols", vec![], vec![]);
        };
        let rows = first.rows();
        if let Some(bad) = vals.iter().find(|v| v.rows() != rows) {
            return self.shape_error("concat_cols", first.shape().to_vec(), bad.shape().to_vec());
        }
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &vals {
                out.extend_from_slice(v.row(r));
            }
        }
        self.push_checked(
            Tensor::raw(vec![rows, cols], out),
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            "concat_cols",
        )
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let Some(first) = vals.first() else {
            return self.shape_error("concat_rows", vec![], vec![]);
        };
        let cols = first.cols();
        if let Some(bad) = vals.iter().find(|v| v.cols() != cols) {
            return self.shape_error("concat_rows", first.shape().to_vec(), bad.shape().to_vec());
        }
        let rows: usize = vals.iter().map(|v| v.rows()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for v in &vals {
            out.extend_from_slice(v.data());
        }
        self.push_checked(
            Tensor::raw(vec![rows, cols], out),
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            "concat_rows",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, DiffError> {
        assert!(std::ptr::eq(self, loss.tape), "loss belongs to another tape");
        self.status()?;
        let nodes = self.nodes.borrow();
        let loss_val = &nodes[loss.id].value;
        if loss_val.numel() != 1 {
            return Err(DiffError::NotScalar(loss_val.shape().to_vec()));
        }
        BACKWARD_PASSES.with(|c| c.set(c.get() + 1));

        let n = nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut done: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !nodes[id].grad {
                continue;
            }
            let out = &nodes[id].value;
            backprop_node(&nodes, &mut adj, &nodes[id].op, out, &g);
            done[id] = Some(g);
        }
        Ok(Gradients {
            adjoints: done,
            shapes: nodes.iter().map(|nd| nd.value.shape().to_vec()).collect(),
        })
    }

    /// Adjoints of `loss` with respect to each of `wrt`.
    pub fn grad(&self, loss: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>, DiffError> {
        let g = self.backward(loss)?;
        Ok(g.wrt_all(wrt))
    }

    fn fail(&self, err: DiffError) {
        let mut slot = self.error.borrow_mut();
        if slot.is_none() {
            *slot = Some(err);
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let grad = op.needs_grad(&nodes);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_checked(&self, value: Tensor, op: Op, name: &'static str) -> Var<'_> {
        if !value.is_finite() {
            self.fail(DiffError::NonFinite { op: name });
        }
        self.push(value, op)
    }

    fn shape_error(&self, op: &'static str, lhs: Vec<usize>, rhs: Vec<usize>) -> Var<'_> {
        self.fail(DiffError::ShapeMismatch { op, lhs, rhs });
        self.push(Tensor::zeros(&[1]), Op::Leaf)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }
}

fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> &'a mut Vec<f64> {
    adj[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()])
}

fn backprop_node(nodes: &[Node], adj: &mut [Option<Vec<f64>>], op: &Op, out: &Tensor, g: &[f64]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    match *op {
        Op::Leaf | Op::Const => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[a].grad {
                matmul_nt_into(g, bv.data(), slot(adj, nodes, a), m, n, k);
            }
            if nodes[b].grad {
                matmul_tn_into(av.data(), g, slot(adj, nodes, b), m, k, n);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.rows(), out.cols());
            let gt = transpose_data(g, r, c);
            add_into(slot(adj, nodes, a), &gt);
        }
        Op::Add(a, b) => {
            add_into(slot(adj, nodes, a), g);
            add_into(slot(adj, nodes, b), g);
        }
        Op::Sub(a, b) => {
            add_into(slot(adj, nodes, a), g);
            for (d, &gv) in slot(adj, nodes, b).iter_mut().zip(g) {
                *d -= gv;
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a).data().to_vec(), val(b).data().to_vec());
            for ((d, &gv), &x) in slot(adj, nodes, a).iter_mut().zip(g).zip(&bv) {
                *d += gv * x;
            }
            for ((d, &gv), &x) in slot(adj, nodes, b).iter_mut().zip(g).zip(&av) {
                *d += gv * x;
            }
        }
        Op::AddRow(a, b) => {
            add_into(slot(adj, nodes, a), g);
            let c = out.cols();
            let db = slot(adj, nodes, b);
            for row in g.chunks(c) {
                add_into(db, row);
            }
        }
        Op::MulRow(a, b) => {
            let c = out.cols();
            let bv = val(b).data().to_vec();
            let av = val(a).data().to_vec();
            {
                let da = slot(adj, nodes, a);
                for (i, (d, &gv)) in da.iter_mut().zip(g).enumerate() {
                    *d += gv * bv[i % c];
                }
            }
            let db = slot(adj, nodes, b);
            for (i, (&gv, &x)) in g.iter().zip(&av).enumerate() {
                db[i % c] += gv * x;
            }
        }
        Op::Affine(a, mul) => {
            for (d, &gv) in slot(adj, nodes, a).iter_mut().zip(g) {
                *d += mul * gv;
            }
        }
        Op::MulScalar(a, s) => {
            let sv = val(s).data()[0];
            let av = val(a).data().to_vec();
            for (d, &gv) in slot(adj, nodes, a).iter_mut().zip(g) {
                *d += gv * sv;
            }
            let ds: f64 = g.iter().zip(&av).map(|(gv, x)| gv * x).sum();
            slot(adj, nodes, s)[0] += ds;
        }
        Op::Recip(a) => unary(adj, nodes, a, g, out, |_, y| -y * y),
        Op::Sigmoid(a) => unary(adj, nodes, a, g, out, |_, y| y * (1.0 - y)),
        Op::Tanh(a) => unary(adj, nodes, a, g, out, |_, y| 1.0 - y * y),
        Op::Relu(a) => unary(adj, nodes, a, g, out, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Exp(a) => unary(adj, nodes, a, g, out, |_, y| y),
        Op::Ln(a) => unary(adj, nodes, a, g, out, |x, _| 1.0 / x),
        Op::Clamp(a, lo, hi) => unary(adj, nodes, a, g, out, |x, _| {
            if x > lo && x < hi {
                1.0
            } else {
                0.0
            }
        }),
        Op::StretchGate(a, inv_temp, lo, hi) => unary(adj, nodes, a, g, out, |_, y| {
            if y > 0.0 && y < 1.0 {
                let s = (y - lo) / (hi - lo);
                (hi - lo) * s * (1.0 - s) * inv_temp
            } else {
                0.0
            }
        }),
        Op::SoftmaxRows(a) => {
            let c = out.cols();
            let da = slot(adj, nodes, a);
            for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(gv, y)| gv * y).sum();
                for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d += y * (gv - dot);
                }
            }
        }
        Op::LogSoftmaxRows(a) => {
            let c = out.cols();
            let p = softmax_rows(val(a));
            let da = slot(adj, nodes, a);
            for ((drow, grow), prow) in da.chunks_mut(c).zip(g.chunks(c)).zip(p.data().chunks(c)) {
                let gsum: f64 = grow.iter().sum();
                for ((d, &gv), &pv) in drow.iter_mut().zip(grow).zip(prow) {
                    *d += gv - pv * gsum;
                }
            }
        }
        Op::Sum(a) => {
            for d in slot(adj, nodes, a).iter_mut() {
                *d += g[0];
            }
        }
        Op::Mean(a) => {
            let n = val(a).numel() as f64;
            for d in slot(adj, nodes, a).iter_mut() {
                *d += g[0] / n;
            }
        }
        Op::ConcatCols(ref parts) => {
            let (rows, cols) = (out.rows(), out.cols());
            let mut offset = 0;
            for &p in parts {
                let pc = val(p).cols();
                let dp = slot(adj, nodes, p);
                for r in 0..rows {
                    let src = &g[r * cols + offset..r * cols + offset + pc];
                    add_into(&mut dp[r * pc..(r + 1) * pc], src);
                }
                offset += pc;
            }
        }
        Op::ConcatRows(ref parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                add_into(slot(adj, nodes, p), &g[offset..offset + n]);
                offset += n;
            }
        }
        Op::SqDist(a, b) => {
            let (av, bv) = (val(a).clone(), val(b).clone());
            let (m, n, d) = (av.rows(), bv.rows(), av.cols());
            {
                let da = slot(adj, nodes, a);
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            da[i * d + k] += 2.0 * gij * (av.data()[i * d + k] - bv.data()[j * d + k]);
                        }
                    }
                }
            }
            let db = slot(adj, nodes, b);
            for i in 0..m {
                for j in 0..n {
                    let gij = g[i * n + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        db[j * d + k] -= 2.0 * gij * (av.data()[i * d + k] - bv.data()[j * d + k]);
                    }
                }
            }
        }
        Op::NormalizeRows(a) => {
            let c = out.cols();
            let av = val(a).clone();
            let da = slot(adj, nodes, a);
            for (((drow, grow), yrow), xrow) in da
                .chunks_mut(c)
                .zip(g.chunks(c))
                .zip(out.data().chunks(c))
                .zip(av.data().chunks(c))
            {
                let norm = (xrow.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
                let dot: f64 = grow.iter().zip(yrow).map(|(gv, y)| gv * y).sum();
                for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d += (gv - y * dot) / norm;
                }
            }
        }
        Op::LayerNormRows(a) => {
            let c = out.cols();
            let av = val(a).clone();
            let da = slot(adj, nodes, a);
            for (((drow, grow), yrow), xrow) in da
                .chunks_mut(c)
                .zip(g.chunks(c))
                .zip(out.data().chunks(c))
                .zip(av.data().chunks(c))
            {
                let inv = inv_std(xrow);
                let n = c as f64;
                let gmean: f64 = grow.iter().sum::<f64>() / n;
                let gy: f64 = grow.iter().zip(yrow).map(|(gv, y)| gv * y).sum::<f64>() / n;
                for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d += inv * (gv - gmean - y * gy);
                }
            }
        }
        Op::Select(a, idx) => {
            slot(adj, nodes, a)[idx] += g[0];
        }
    }
}

fn unary(
    adj: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    a: usize,
    g: &[f64],
    out: &Tensor,
    deriv: impl Fn(f64, f64) -> f64,
) {
    let x = Rc::clone(&nodes[a].value);
    let da = slot(adj, nodes, a);
    for (((d, &gv), &xv), &yv) in da.iter_mut().zip(g).zip(x.data()).zip(out.data()) {
        *d += gv * deriv(xv, yv);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn inv_std(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    1.0 / (var + LAYER_NORM_EPS).sqrt()
}

fn row_softmax(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for &x in row {
        let e = (x - max).exp();
        total += e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v /= total;
    }
}

fn row_log_softmax(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    out.extend(row.iter().map(|x| x - lse));
}

/// Row-wise softmax of a plain tensor.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = Vec::with_capacity(t.numel());
    for row in t.data().chunks(c) {
        row_softmax(row, &mut out);
    }
    Tensor::raw(t.shape().to_vec(), out)
}

/// Row-wise log-softmax of a plain tensor.
pub fn log_softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = Vec::with_capacity(t.numel());
    for row in t.data().chunks(c) {
        row_log_softmax(row, &mut out);
    }
    Tensor::raw(t.shape().to_vec(), out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn map_op(&self, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push_checked(v, op, name)
    }

    fn zip_op(&self, other: Var<'t>, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return self.tape.shape_error(name, a.shape().to_vec(), b.shape().to_vec());
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.tape.push_checked(Tensor::raw(a.shape().to_vec(), data), op, name)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        match self.value().matmul(&other.value()) {
            Ok(v) => self.tape.push_checked(v, Op::MatMul(self.id, other.id), "matmul"),
            Err(_) => self
                .tape
                .shape_error("matmul", self.shape(), other.shape()),
        }
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().transpose();
        self.tape.push(v, Op::Transpose(self.id))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.zip_op(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.zip_op(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.zip_op(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    /// Adds a row vector to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.row_op(row, Op::AddRow(self.id, row.id), "add_row", |a, b| a + b)
    }

    /// Scales every row elementwise by a row vector.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        self.row_op(row, Op::MulRow(self.id, row.id), "mul_row", |a, b| a * b)
    }

    fn row_op(&self, row: Var<'t>, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        self.same_tape(&row);
        let (a, b) = (self.value(), row.value());
        let c = a.cols();
        if b.numel() != c {
            return self.tape.shape_error(name, a.shape().to_vec(), b.shape().to_vec());
        }
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % c]))
            .collect();
        self.tape.push_checked(Tensor::raw(a.shape().to_vec(), data), op, name)
    }

    /// `mul * x + add` with constant coefficients.
    pub fn affine(self, mul: f64, add: f64) -> Var<'t> {
        self.map_op(Op::Affine(self.id, mul), "affine", |x| mul * x + add)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.affine(c, 0.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.affine(1.0, c)
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(self, c: &Tensor) -> Var<'t> {
        let k = self.tape.constant(c.clone());
        self.add(k)
    }

    /// Scales by a one-element node.
    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        self.same_tape(&s);
        let sv = s.value();
        if sv.numel() != 1 {
            return self.tape.shape_error("mul_scalar", self.shape(), sv.shape().to_vec());
        }
        let k = sv.data()[0];
        self.map_op(Op::MulScalar(self.id, s.id), "mul_scalar", |x| x * k)
    }

    pub fn recip(self) -> Var<'t> {
        self.map_op(Op::Recip(self.id), "recip", |x| 1.0 / x)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map_op(Op::Sigmoid(self.id), "sigmoid", sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.map_op(Op::Tanh(self.id), "tanh", f64::tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.map_op(Op::Relu(self.id), "relu", |x| x.max(0.0))
    }

    pub fn exp(self) -> Var<'t> {
        self.map_op(Op::Exp(self.id), "exp", f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.map_op(Op::Ln(self.id), "ln", f64::ln)
    }

    /// Clamp with subgradient 1 strictly inside `(lo, hi)` and 0 elsewhere.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.map_op(Op::Clamp(self.id, lo, hi), "clamp", |x| x.clamp(lo, hi))
    }

    /// `clamp(sigmoid((x + shift) * inv_temp) * (hi - lo) + lo, 0, 1)` as one node.
    pub fn stretch_gate(self, shift: &Tensor, inv_temp: f64, lo: f64, hi: f64) -> Var<'t> {
        let a = self.value();
        if a.shape() != shift.shape() {
            return self.tape.shape_error("stretch_gate", a.shape().to_vec(), shift.shape().to_vec());
        }
        let data = a
            .data()
            .iter()
            .zip(shift.data())
            .map(|(&x, &u)| (sigmoid((x + u) * inv_temp) * (hi - lo) + lo).clamp(0.0, 1.0))
            .collect();
        self.tape.push_checked(
            Tensor::raw(a.shape().to_vec(), data),
            Op::StretchGate(self.id, inv_temp, lo, hi),
            "stretch_gate",
        )
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let v = softmax_rows(&self.value());
        self.tape.push_checked(v, Op::SoftmaxRows(self.id), "softmax")
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        let v = log_softmax_rows(&self.value());
        self.tape.push_checked(v, Op::LogSoftmaxRows(self.id), "log_softmax")
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push_checked(v, Op::Sum(self.id), "sum")
    }

    pub fn mean(self) -> Var<'t> {
        let val = self.value();
        let v = Tensor::scalar(val.sum() / val.numel() as f64);
        self.tape.push_checked(v, Op::Mean(self.id), "mean")
    }

    /// Pairwise squared Euclidean distances between rows: `[m,d] x [n,d] -> [m,n]`.
    pub fn sq_dist(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.cols() != b.cols() {
            return self.tape.shape_error("sq_dist", a.shape().to_vec(), b.shape().to_vec());
        }
        let (m, n) = (a.rows(), b.rows());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        self.tape
            .push_checked(Tensor::raw(vec![m, n], out), Op::SqDist(self.id, other.id), "sq_dist")
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(self) -> Var<'t> {
        let a = self.value();
        let c = a.cols();
        let mut out = Vec::with_capacity(a.numel());
        for row in a.data().chunks(c) {
            let norm = (row.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
            out.extend(row.iter().map(|x| x / norm));
        }
        self.tape.push_checked(
            Tensor::raw(a.shape().to_vec(), out),
            Op::NormalizeRows(self.id),
            "normalize_rows",
        )
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(self) -> Var<'t> {
        let a = self.value();
        let c = a.cols();
        let mut out = Vec::with_capacity(a.numel());
        for row in a.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let inv = inv_std(row);
            out.extend(row.iter().map(|x| (x - mean) * inv));
        }
        self.tape.push_checked(
            Tensor::raw(a.shape().to_vec(), out),
            Op::LayerNormRows(self.id),
            "layer_norm",
        )
    }

    /// The flat element at `idx` as a one-element node.
    pub fn select(self, idx: usize) -> Var<'t> {
        let a = self.value();
        if idx >= a.numel() {
            return self.tape.shape_error("select", a.shape().to_vec(), vec![idx]);
        }
        self.tape
            .push(Tensor::scalar(a.data()[idx]), Op::Select(self.id, idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        assert_eq!(tape.scalar(0.0).sigmoid().item(), 0.5);
    }

    #[test]
    fn clamp_subgradient() {
        for (x, want) in [(0.5, 1.0), (1.5, 0.0), (-0.2, 0.0)] {
            let tape = Tape::new();
            let v = tape.scalar(x);
            let g = tape.grad(v.clamp(0.0, 1.0).sum(), &[v]).unwrap();
            assert_eq!(g[0].data()[0], want, "x = {x}");
        }
    }

    #[test]
    fn matmul_with_identity() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = tape.constant(Tensor::identity(2));
        assert_eq!(*a.matmul(i).value(), t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let g = tape.grad(x.mul(x).sum(), &[x]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unreached_gets_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let w = tape.leaf(Tensor::vector(vec![5.0, 6.0, 7.0]));
        let g = tape.grad(x.sum(), &[w]).unwrap();
        assert_eq!(g[0], Tensor::zeros(&[3]));
    }

    #[test]
    fn loss_must_be_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(DiffError::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_poisons_tape() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let c = a.add(b).sum();
        assert!(matches!(tape.status(), Err(DiffError::ShapeMismatch { op: "add", .. })));
        assert!(tape.backward(c).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![0.0]));
        let _ = a.recip();
        assert!(matches!(tape.status(), Err(DiffError::NonFinite { op: "recip" })));
    }

    #[test]
    fn softmax_ce_gradient_is_prob_minus_onehot() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
            let label = rng.random_range(0..5);
            let tape = Tape::new();
            let x = tape.leaf(Tensor::matrix(1, 5, logits.clone()).unwrap());
            let onehot: Vec<f64> = (0..5).map(|k| if k == label { 1.0 } else { 0.0 }).collect();
            let oh = tape.constant(Tensor::matrix(1, 5, onehot.clone()).unwrap());
            let loss = x.log_softmax_rows().mul(oh).sum().scale(-1.0);
            let g = tape.grad(loss, &[x]).unwrap();
            let p = softmax_rows(&Tensor::matrix(1, 5, logits).unwrap());
            for k in 0..5 {
                assert_eq!(g[0].data()[k], p.data()[k] - onehot[k]);
            }
        }
    }

    #[test]
    fn deterministic_replay() {
        let run = || {
            let tape = Tape::new();
            let a = tape.leaf(t(&[vec![0.3, -1.2, 2.0], vec![0.7, 0.1, -0.4]]));
            let b = tape.leaf(t(&[vec![0.5, 0.2], vec![-0.3, 0.9], vec![1.1, -0.6]]));
            let y = a.matmul(b).layer_norm_rows().tanh().sum();
            let g = tape.grad(y, &[a, b]).unwrap();
            (y.item().to_bits(), g)
        };
        let (y1, g1) = run();
        let (y2, g2) = run();
        assert_eq!(y1, y2);
        assert_eq!(g1, g2);
    }
}

//! Reverse-mode gradient tape over dense matrices.
//!
//! Every forward primitive appends one node to the [`Tape`]; [`Tape::backward`]
//! walks the nodes in exact reverse order and accumulates adjoints. Leaves
//! created with [`Tape::leaf`] receive gradients, whether they hold model
//! parameters or inputs such as perturbations. Leaves created with
//! [`Tape::constant`] do not, and nothing downstream of only constants is
//! differentiated.
//!
//! Shape errors are contract violations and panic with both shapes in the
//! message.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::sparse::SparseMatrix;
use super::tensor::{assert_same_shape, Tensor};

/// Probabilities fed to logarithms are clamped to `[CLAMP, 1 - CLAMP]`.
pub const LOG_SIGMOID_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    SumRows(usize),
    MeanRows(usize),
    Sum(usize),
    Mean(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SoftmaxRows(usize),
    SoftmaxCrossEntropy { logits: usize, labels: Rc<[usize]> },
    LogSigmoid(usize),
    SparseMatMul { adj: Rc<SparseMatrix>, x: usize },
    SegmentSum { segments: Rc<[usize]>, x: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Option<(usize, usize)>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Leaves that require gradients
    /// but were not reached get an all-zero tensor; constants give `None`.
    pub fn get(&self, v: Var<'_>) -> Option<Tensor> {
        match (&self.grads[v.id], self.shapes[v.id]) {
            (Some(g), _) => Some(g.clone()),
            (None, Some((r, c))) => Some(Tensor::zeros(r, c)),
            (None, None) => None,
        }
    }

    /// Like [`Gradients::get`] but panics for constants.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| panic!("no gradient recorded for constant node {}", v.id))
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
        self.nodes.borrow().is_empty()
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, operands: &[usize]) -> Var<'_> {
        let rg = self.requires(operands);
        self.push(value, op, rg)
    }

    /// Sign pattern of every ReLU input and clamp state of every log-sigmoid,
    /// in recording order. Two evaluations with equal patterns lie on the same
    /// smooth piece of the recorded function.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for node in nodes.iter() {
            match node.op {
                Op::Relu(x) => out.extend(nodes[x].value.data().iter().map(|&v| v > 0.0)),
                Op::LogSigmoid(x) => out.extend(nodes[x].value.data().iter().map(|&v| {
                    let s = sigmoid(v);
                    (LOG_SIGMOID_CLAMP..=1.0 - LOG_SIGMOID_CLAMP).contains(&s)
                })),
                _ => {}
            }
        }
        out
    }

    /// Back-propagates from the scalar `loss`.
    ///
    /// Panics if `loss` is not 1×1.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape();
        assert_eq!(shape, (1, 1), "backward on non-scalar loss of shape {shape:?}");
        let n = nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::scalar(1.0));
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes
            .iter()
            .map(|nd| (matches!(nd.op, Op::Leaf) && nd.requires_grad).then(|| nd.value.shape()))
            .collect();
        // only leaves keep their gradients
        for (g, nd) in grads.iter_mut().zip(nodes.iter()) {
            if !matches!(nd.op, Op::Leaf) {
                *g = None;
            }
        }
        Gradients { grads, shapes }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, contribution: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, g.matmul_t(val(*b)));
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, val(*a).t_matmul(g));
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, hadamard(g, val(*b)));
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, hadamard(g, val(*a)));
            }
        }
        Op::AddRow(a, bias) => {
            accumulate(grads, nodes, *a, g.clone());
            if nodes[*bias].requires_grad {
                accumulate(grads, nodes, *bias, column_sums(g));
            }
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.scale(*c)),
        Op::Relu(a) => {
            let x = val(*a);
            let mut out = g.clone();
            for (o, &xv) in out.data_mut().iter_mut().zip(x.data()) {
                if xv <= 0.0 {
                    *o = 0.0;
                }
            }
            accumulate(grads, nodes, *a, out);
        }
        Op::SumRows(a) => {
            let rows = val(*a).rows();
            accumulate(grads, nodes, *a, repeat_row(g, rows));
        }
        Op::MeanRows(a) => {
            let rows = val(*a).rows();
            accumulate(grads, nodes, *a, repeat_row(g, rows).scale(1.0 / rows as f64));
        }
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, nodes, *a, Tensor::filled(r, c, g.item()));
        }
        Op::Mean(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, nodes, *a, Tensor::filled(r, c, g.item() / (r * c) as f64));
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let (r, c) = val(p).shape();
                if nodes[p].requires_grad {
                    let mut piece = Tensor::zeros(r, c);
                    for i in 0..r {
                        piece.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                    }
                    accumulate(grads, nodes, p, piece);
                }
                offset += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let (r, c) = val(p).shape();
                if nodes[p].requires_grad {
                    let piece =
                        Tensor::from_vec(r, c, g.data()[offset * c..(offset + r) * c].to_vec());
                    accumulate(grads, nodes, p, piece);
                }
                offset += r;
            }
        }
        Op::SoftmaxRows(a) => {
            // dx = s ⊙ (g - <g, s>) row-wise
            let s = &node.value;
            let mut out = Tensor::zeros(s.rows(), s.cols());
            for i in 0..s.rows() {
                let dot: f64 = s.row(i).iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                for j in 0..s.cols() {
                    out.set(i, j, s.get(i, j) * (g.get(i, j) - dot));
                }
            }
            accumulate(grads, nodes, *a, out);
        }
        Op::SoftmaxCrossEntropy { logits, labels } => {
            let mut probs = softmax_rows(val(*logits));
            let n = probs.rows() as f64;
            for (i, &y) in labels.iter().enumerate() {
                let v = probs.get(i, y);
                probs.set(i, y, v - 1.0);
            }
            accumulate(grads, nodes, *logits, probs.scale(g.item() / n));
        }
        Op::LogSigmoid(a) => {
            let x = val(*a);
            let mut out = g.clone();
            for (o, &xv) in out.data_mut().iter_mut().zip(x.data()) {
                let s = sigmoid(xv);
                if (LOG_SIGMOID_CLAMP..=1.0 - LOG_SIGMOID_CLAMP).contains(&s) {
                    *o *= sigmoid(-xv);
                } else {
                    *o = 0.0;
                }
            }
            accumulate(grads, nodes, *a, out);
        }
        Op::SparseMatMul { adj, x } => accumulate(grads, nodes, *x, adj.t_matmul_dense(g)),
        Op::SegmentSum { segments, x } => {
            let cols = g.cols();
            let mut out = Tensor::zeros(segments.len(), cols);
            for (row, &seg) in segments.iter().enumerate() {
                out.row_mut(row).copy_from_slice(g.row(seg));
            }
            accumulate(grads, nodes, *x, out);
        }
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn column_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for i in 0..t.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(t.row(i)) {
            *o += v;
        }
    }
    out
}

fn repeat_row(row: &Tensor, rows: usize) -> Tensor {
    let mut out = Tensor::zeros(rows, row.cols());
    for i in 0..rows {
        out.row_mut(i).copy_from_slice(row.row(0));
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` with σ clamped to `[LOG_SIGMOID_CLAMP, 1 - LOG_SIGMOID_CLAMP]`.
pub(crate) fn clamped_log_sigmoid(x: f64) -> f64 {
    let s = sigmoid(x);
    if s < LOG_SIGMOID_CLAMP {
        LOG_SIGMOID_CLAMP.ln()
    } else if s > 1.0 - LOG_SIGMOID_CLAMP {
        (-LOG_SIGMOID_CLAMP).ln_1p()
    } else if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

// arithmetic is spelled as methods so every op records on the tape explicitly
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the forward value.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    /// Value of a 1×1 node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = self.value().matmul(&other.value());
        self.tape.record(v, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = {
            let (a, b) = (self.value(), other.value());
            assert_same_shape("add", &a, &b);
            let mut v = a.clone();
            v.add_assign(&b);
            v
        };
        self.tape.record(v, Op::Add(self.id, other.id), &[self.id, other.id])
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = {
            let (a, b) = (self.value(), other.value());
            assert_same_shape("sub", &a, &b);
            let mut v = a.clone();
            v.axpy(-1.0, &b);
            v
        };
        self.tape.record(v, Op::Sub(self.id, other.id), &[self.id, other.id])
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = {
            let (a, b) = (self.value(), other.value());
            assert_same_shape("mul", &a, &b);
            hadamard(&a, &b)
        };
        self.tape.record(v, Op::Mul(self.id, other.id), &[self.id, other.id])
    }

    /// Adds a 1×m bias row to every row of an n×m matrix.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        self.same_tape(&bias);
        let v = {
            let (a, b) = (self.value(), bias.value());
            assert!(
                b.rows() == 1 && b.cols() == a.cols(),
                "add_row: shape mismatch {:?} vs bias {:?}",
                a.shape(),
                b.shape()
            );
            let mut v = a.clone();
            for i in 0..v.rows() {
                for (o, x) in v.row_mut(i).iter_mut().zip(b.row(0)) {
                    *o += x;
                }
            }
            v
        };
        self.tape.record(v, Op::AddRow(self.id, bias.id), &[self.id, bias.id])
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().scale(c);
        self.tape.record(v, Op::Scale(self.id, c), &[self.id])
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// `max(x, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.tape.record(v, Op::Relu(self.id), &[self.id])
    }

    /// Sum over rows: n×m → 1×m.
    pub fn sum_rows(self) -> Var<'t> {
        let v = column_sums(&self.value());
        self.tape.record(v, Op::SumRows(self.id), &[self.id])
    }

    /// Mean over rows: n×m → 1×m. Panics on zero rows.
    pub fn mean_rows(self) -> Var<'t> {
        let v = {
            let x = self.value();
            assert!(x.rows() > 0, "mean_rows over an empty matrix {:?}", x.shape());
            column_sums(&x).scale(1.0 / x.rows() as f64)
        };
        self.tape.record(v, Op::MeanRows(self.id), &[self.id])
    }

    /// Sum of all entries (1×1).
    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().data().iter().sum());
        self.tape.record(v, Op::Sum(self.id), &[self.id])
    }

    /// Mean of all entries (1×1). Panics on an empty tensor.
    pub fn mean(self) -> Var<'t> {
        let v = {
            let x = self.value();
            assert!(!x.is_empty(), "mean over an empty tensor {:?}", x.shape());
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        };
        self.tape.record(v, Op::Mean(self.id), &[self.id])
    }

    /// Row-wise softmax.
    pub fn softmax(self) -> Var<'t> {
        let v = softmax_rows(&self.value());
        self.tape.record(v, Op::SoftmaxRows(self.id), &[self.id])
    }

    /// Mean cross-entropy of row-wise softmax(logits) against class indices.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Var<'t> {
        let v = {
            let x = self.value();
            assert_eq!(
                x.rows(),
                labels.len(),
                "softmax_cross_entropy: {} logit rows vs {} labels",
                x.rows(),
                labels.len()
            );
            assert!(x.rows() > 0, "softmax_cross_entropy on an empty batch");
            let mut total = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                assert!(y < x.cols(), "label {y} out of range for {} classes", x.cols());
                let row = x.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
            Tensor::scalar(total / labels.len() as f64)
        };
        let op = Op::SoftmaxCrossEntropy {
            logits: self.id,
            labels: labels.into(),
        };
        self.tape.record(v, op, &[self.id])
    }

    /// Elementwise `ln σ(x)`, with σ clamped away from 0 and 1 by
    /// [`LOG_SIGMOID_CLAMP`]. `ln(1 - σ(x))` is `x.neg().log_sigmoid()`.
    pub fn log_sigmoid(self) -> Var<'t> {
        let v = self.value().map(clamped_log_sigmoid);
        self.tape.record(v, Op::LogSigmoid(self.id), &[self.id])
    }

    /// Sparse-times-dense product `adj · self`.
    pub fn sparse_left_matmul(self, adj: &Rc<SparseMatrix>) -> Var<'t> {
        let v = adj.matmul_dense(&self.value());
        let op = Op::SparseMatMul {
            adj: Rc::clone(adj),
            x: self.id,
        };
        self.tape.record(v, op, &[self.id])
    }

    /// Sums rows that share a segment id: row `i` of the input lands in output
    /// row `segments[i]`.
    pub fn segment_sum(self, segments: &Rc<[usize]>, num_segments: usize) -> Var<'t> {
        let v = {
            let x = self.value();
            assert_eq!(
                x.rows(),
                segments.len(),
                "segment_sum: {} rows vs {} segment ids",
                x.rows(),
                segments.len()
            );
            let mut out = Tensor::zeros(num_segments, x.cols());
            for (row, &seg) in segments.iter().enumerate() {
                assert!(seg < num_segments, "segment id {seg} >= {num_segments}");
                for (o, v) in out.row_mut(seg).iter_mut().zip(x.row(row)) {
                    *o += v;
                }
            }
            out
        };
        let op = Op::SegmentSum {
            segments: Rc::clone(segments),
            x: self.id,
        };
        self.tape.record(v, op, &[self.id])
    }
}

/// Column-wise concatenation of equal-height parts.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_cols of zero parts");
    let tape = parts[0].tape;
    let v = {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].rows();
        for v in &vals {
            assert_eq!(
                v.rows(),
                rows,
                "concat_cols: row mismatch {:?} vs {:?}",
                vals[0].shape(),
                v.shape()
            );
        }
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for v in &vals {
                out.row_mut(i)[offset..offset + v.cols()].copy_from_slice(v.row(i));
                offset += v.cols();
            }
        }
        out
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.record(v, Op::ConcatCols(ids.clone()), &ids)
}

/// Row-wise stacking of equal-width parts.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_rows of zero parts");
    let tape = parts[0].tape;
    let v = {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let cols = vals[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for v in &vals {
            assert_eq!(
                v.cols(),
                cols,
                "concat_rows: column mismatch {:?} vs {:?}",
                vals[0].shape(),
                v.shape()
            );
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        Tensor::from_vec(rows, cols, data)
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.record(v, Op::ConcatRows(ids.clone()), &ids)
}

//! Dense `f64` tensors with a define-by-run reverse-mode tape.
//!
//! A [`Tensor`] owns data and an optional gradient buffer. Computation happens
//! on a [`Tape`]: tensors enter it as leaves ([`Tape::param`],
//! [`Tape::constant`]) and every op returns a [`Var`] handle to a recorded
//! node. [`Tape::backward`] replays the record in reverse and returns the
//! gradients of every leaf that requires them.
//!
//! Layout is row-major with no strides or views. Matrices are 2-D; a 1-D
//! tensor of length `n` is treated as a `1×n` row wherever a matrix is
//! expected.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected || shape.contains(&0) {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    /// 1-D tensor.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        Arc::make_mut(&mut t.data).fill(value);
        t
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; copies the buffer first if a tape still shares it.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[delta.len()]));
        }
        let n = self.data.len();
        let g = self.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, d) in g.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }
}

fn matrix_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [n] => Some((1, n)),
        [m, n] => Some((m, n)),
        _ => None,
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Concat(usize, usize),
    ConcatRows(Vec<usize>),
    Gather { table: usize, ids: Vec<usize> },
    Sum(usize),
    SoftmaxCrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Record of operations for one forward pass. Single-threaded; build one
/// tape per pass and drop it afterwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records `t` as a leaf; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.shape.clone(), Arc::clone(&t.data), t.requires_grad)
    }

    /// Records `t` as a differentiable leaf regardless of its flag.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.shape.clone(), Arc::clone(&t.data), true)
    }

    /// Records `t` as a non-differentiable leaf.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.shape.clone(), Arc::clone(&t.data), false)
    }

    fn push_leaf(&self, shape: Vec<usize>, value: Arc<Vec<f64>>, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            needs_grad,
            op: Op::Leaf,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var<'_>> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op_inputs(&op).iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node {
            shape,
            value: Arc::new(value),
            needs_grad,
            op,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn check_owner(&self, v: &Var<'_>) {
        assert!(
            std::ptr::eq(self, v.tape),
            "variable recorded on a different tape"
        );
    }

    /// Reverse pass from a scalar `loss`. Each recorded op is visited once, in
    /// reverse order; gradients of shared inputs accumulate additively.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_owner(&loss);
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::MatMulT(a, b)
        | Op::Add(a, b)
        | Op::Mul(a, b)
        | Op::AddBias(a, b)
        | Op::Concat(a, b) => vec![*a, *b],
        Op::Scale(a, _) | Op::Tanh(a) | Op::Sigmoid(a) | Op::Sum(a) => vec![*a],
        Op::ConcatRows(parts) => parts.clone(),
        Op::Gather { table, .. } => vec![*table],
        Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = matrix_dims(&nodes[*a].shape).unwrap();
            let (_, n) = matrix_dims(&nodes[*b].shape).unwrap();
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            // dA = G·Bᵀ
            accumulate(grads, nodes, *a, |da| matmul_t_into(g, bv, m, n, k, da));
            // dB = Aᵀ·G
            accumulate(grads, nodes, *b, |db| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        axpy(aip, grow, &mut db[p * n..(p + 1) * n]);
                    }
                }
            });
        }
        Op::MatMulT(a, b) => {
            let (m, k) = matrix_dims(&nodes[*a].shape).unwrap();
            let (n, _) = matrix_dims(&nodes[*b].shape).unwrap();
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
            accumulate(grads, nodes, *a, |da| matmul_into(g, bv, m, n, k, da));
            accumulate(grads, nodes, *b, |db| {
                for i in 0..m {
                    let arow = &av[i * k..(i + 1) * k];
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        axpy(gij, arow, &mut db[j * k..(j + 1) * k]);
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |da| axpy(1.0, g, da));
            accumulate(grads, nodes, *b, |db| axpy(1.0, g, db));
        }
        Op::Mul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            accumulate(grads, nodes, *a, |da| {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv.iter()) {
                    *d += gi * bi;
                }
            });
            accumulate(grads, nodes, *b, |db| {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(av.iter()) {
                    *d += gi * ai;
                }
            });
        }
        Op::AddBias(a, b) => {
            let n = nodes[*b].value.len();
            accumulate(grads, nodes, *a, |da| axpy(1.0, g, da));
            accumulate(grads, nodes, *b, |db| {
                for row in g.chunks_exact(n) {
                    axpy(1.0, row, db);
                }
            });
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, |da| axpy(*s, g, da)),
        Op::Tanh(a) => {
            let y = &node.value;
            accumulate(grads, nodes, *a, |da| {
                for ((d, gi), yi) in da.iter_mut().zip(g).zip(y.iter()) {
                    *d += gi * (1.0 - yi * yi);
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            accumulate(grads, nodes, *a, |da| {
                for ((d, gi), yi) in da.iter_mut().zip(g).zip(y.iter()) {
                    *d += gi * yi * (1.0 - yi);
                }
            });
        }
        Op::Concat(a, b) => {
            let p = *nodes[*a].shape.last().unwrap();
            let q = *nodes[*b].shape.last().unwrap();
            accumulate(grads, nodes, *a, |da| {
                for (drow, grow) in da.chunks_exact_mut(p).zip(g.chunks_exact(p + q)) {
                    axpy(1.0, &grow[..p], drow);
                }
            });
            accumulate(grads, nodes, *b, |db| {
                for (drow, grow) in db.chunks_exact_mut(q).zip(g.chunks_exact(p + q)) {
                    axpy(1.0, &grow[p..], drow);
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &part in parts {
                let len = nodes[part].value.len();
                accumulate(grads, nodes, part, |dp| axpy(1.0, &g[offset..offset + len], dp));
                offset += len;
            }
        }
        Op::Gather { table, ids } => {
            let cols = matrix_dims(&nodes[*table].shape).unwrap().1;
            accumulate(grads, nodes, *table, |dt| {
                for (r, &id) in ids.iter().enumerate() {
                    axpy(1.0, &g[r * cols..(r + 1) * cols], &mut dt[id * cols..(id + 1) * cols]);
                }
            });
        }
        Op::Sum(a) => {
            let s = g[0];
            accumulate(grads, nodes, *a, |da| da.iter_mut().for_each(|d| *d += s));
        }
        Op::SoftmaxCrossEntropy { logits, targets, probs } => {
            let classes = probs.len() / targets.len();
            let scale = g[0] / targets.len() as f64;
            accumulate(grads, nodes, *logits, |dl| {
                for (r, &t) in targets.iter().enumerate() {
                    let row = &probs[r * classes..(r + 1) * classes];
                    let drow = &mut dl[r * classes..(r + 1) * classes];
                    for (c, (d, p)) in drow.iter_mut().zip(row).enumerate() {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        *d += scale * (p - onehot);
                    }
                }
            });
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// out[m×n] += a[m×k] · b[k×n]
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            axpy(aip, &b[p * n..(p + 1) * n], orow);
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
fn matmul_t_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    /// Copies the current value out as a constant tensor.
    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        Tensor {
            shape: node.shape.clone(),
            data: Arc::clone(&node.value),
            requires_grad: false,
            grad: None,
        }
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    fn binary_check(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables recorded on different tapes"
        );
    }

    fn unary(&self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        };
        self.tape.push(name, shape, value, op)
    }

    /// Matrix product `self[m×k] · other[k×n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_check(other);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (m, k) = matrix_dims(&a.shape).ok_or_else(|| Error::shape("matmul", &a.shape, &b.shape))?;
            let (k2, n) = matrix_dims(&b.shape).ok_or_else(|| Error::shape("matmul", &a.shape, &b.shape))?;
            if k != k2 || a.shape.len() != 2 || b.shape.len() != 2 {
                return Err(Error::shape("matmul", &a.shape, &b.shape));
            }
            let mut out = vec![0.0; m * n];
            matmul_into(&a.value, &b.value, m, k, n, &mut out);
            (vec![m, n], out)
        };
        self.tape.push("matmul", shape, value, Op::MatMul(self.id, other.id))
    }

    /// Product with a transposed right operand: `self[m×k] · other[n×k]ᵀ`.
    /// This is the `x·Wᵀ` of a linear layer whose weight is stored `out×in`.
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_check(other);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (m, k) = matrix_dims(&a.shape).ok_or_else(|| Error::shape("matmul_t", &a.shape, &b.shape))?;
            let (n, k2) = match *b.shape {
                [n, k2] => (n, k2),
                _ => return Err(Error::shape("matmul_t", &a.shape, &b.shape)),
            };
            if k != k2 {
                return Err(Error::shape("matmul_t", &a.shape, &b.shape));
            }
            let mut out = vec![0.0; m * n];
            matmul_t_into(&a.value, &b.value, m, k, n, &mut out);
            let shape = if a.shape.len() == 1 { vec![n] } else { vec![m, n] };
            (shape, out)
        };
        self.tape.push("matmul_t", shape, value, Op::MatMulT(self.id, other.id))
    }

    fn elementwise(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.binary_check(other);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(Error::shape(name, &a.shape, &b.shape));
            }
            let v = a.value.iter().zip(b.value.iter()).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), v)
        };
        self.tape.push(name, shape, value, op)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// Adds a length-`n` bias to every row of an `m×n` (or length-`n`) tensor.
    pub fn add_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.binary_check(bias);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[bias.id]);
            let (_, n) = matrix_dims(&a.shape).ok_or_else(|| Error::shape("add_bias", &a.shape, &b.shape))?;
            if b.shape.len() != 1 || b.shape[0] != n {
                return Err(Error::shape("add_bias", &a.shape, &b.shape));
            }
            let mut v = a.value.to_vec();
            for row in v.chunks_exact_mut(n) {
                axpy(1.0, &b.value, row);
            }
            (a.shape.clone(), v)
        };
        self.tape.push("add_bias", shape, value, Op::AddBias(self.id, bias.id))
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        self.unary("scale", |x| s * x, Op::Scale(self.id, s))
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid(self.id))
    }

    /// Concatenation along the last axis; all leading dimensions must agree.
    pub fn concat(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_check(other);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (sa, sb) = (&a.shape, &b.shape);
            if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
                return Err(Error::shape("concat", sa, sb));
            }
            let p = *sa.last().unwrap();
            let q = *sb.last().unwrap();
            let mut v = Vec::with_capacity(a.value.len() + b.value.len());
            for (ra, rb) in a.value.chunks_exact(p).zip(b.value.chunks_exact(q)) {
                v.extend_from_slice(ra);
                v.extend_from_slice(rb);
            }
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = p + q;
            (shape, v)
        };
        self.tape.push("concat", shape, value, Op::Concat(self.id, other.id))
    }

    /// Sums every element into a scalar.
    pub fn sum(&self) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.iter().sum::<f64>()
        };
        self.tape.push("sum", vec![], vec![value], Op::Sum(self.id))
    }

    /// Mean softmax cross-entropy of `self[batch×C]` (or `[C]`) against class
    /// indices, one per row.
    pub fn softmax_cross_entropy(&self, targets: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            let (rows, classes) =
                matrix_dims(&node.shape).ok_or_else(|| Error::shape("softmax_cross_entropy", &node.shape, &[targets.len()]))?;
            if rows != targets.len() {
                return Err(Error::shape("softmax_cross_entropy", &node.shape, &[targets.len()]));
            }
            let mut probs = Vec::with_capacity(rows * classes);
            let mut loss = 0.0;
            for (row, &t) in node.value.chunks_exact(classes).zip(targets) {
                if t >= classes {
                    return Err(Error::IndexOutOfRange {
                        what: "target",
                        index: t,
                        bound: classes,
                    });
                }
                let (p, log_z) = softmax_row(row);
                loss += log_z - row[t];
                probs.extend(p);
            }
            (loss / rows as f64, probs)
        };
        self.tape.push(
            "softmax_cross_entropy",
            vec![],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Gathers rows `ids` of a `V×E` table into an `ids.len()×E` matrix.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            let (rows, cols) = match *node.shape {
                [r, c] => (r, c),
                _ => return Err(Error::shape("gather_rows", &node.shape, &[ids.len()])),
            };
            if ids.is_empty() {
                return Err(Error::Empty("gather_rows ids"));
            }
            let mut v = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= rows {
                    return Err(Error::IndexOutOfRange {
                        what: "row",
                        index: id,
                        bound: rows,
                    });
                }
                v.extend_from_slice(&node.value[id * cols..(id + 1) * cols]);
            }
            (vec![ids.len(), cols], v)
        };
        self.tape.push(
            "gather_rows",
            shape,
            value,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
        )
    }
}

/// Stacks 2-D variables with equal column counts on top of each other.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
    let tape = first.tape;
    let (shape, value) = {
        let nodes = tape.nodes.borrow();
        let cols = match *nodes[first.id].shape {
            [_, c] => c,
            _ => return Err(Error::shape("concat_rows", &nodes[first.id].shape, &[])),
        };
        let mut rows = 0;
        let mut v = Vec::new();
        for p in parts {
            first.binary_check(p);
            let node = &nodes[p.id];
            match *node.shape {
                [r, c] if c == cols => rows += r,
                _ => return Err(Error::shape("concat_rows", &nodes[first.id].shape, &node.shape)),
            }
            v.extend_from_slice(&node.value);
        }
        (vec![rows, cols], v)
    };
    tape.push(
        "concat_rows",
        shape,
        value,
        Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
    )
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax of one row, plus its log-partition.
pub fn softmax_row(row: &[f64]) -> (Vec<f64>, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    (exps.iter().map(|e| e / z).collect(), max + z.ln())
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` if it was not differentiable or unreachable.
    pub fn get(&self, v: &Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but returns zeros for unreachable leaves.
    pub fn get_or_zeros(&self, v: &Var<'_>) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; v.tape.nodes.borrow()[v.id].value.len()],
        }
    }

    /// Adds the gradient of leaf `v` into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: &Var<'_>, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.len()]),
        }
    }
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let errs = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(errs[0])
}

/// Per-input maximum relative error for a scalar function of several tensors.
///
/// For every coordinate the error is `|a − n| / max(|a|, |n|, 1e-8)` with
/// `n = (f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)`.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    Ok(grad_check_detailed(f, xs, eps)?
        .into_iter()
        .map(|r| r.max_rel_error)
        .collect())
}

/// Units in the last place of `f` assumed lost in each evaluation when
/// bounding the rounding error of a central difference.
const ROUNDOFF_ULPS: f64 = 4.0;

/// Outcome of a finite-difference check of one input tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckStats {
    /// `max |a − n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_error: f64,
    /// The same ratio after first subtracting the rounding floor of the
    /// difference quotient, `ROUNDOFF_ULPS · ulp(|f|) / (2·eps)`, from
    /// `|a − n|`. Coordinates whose gradient is too small for the difference
    /// quotient to resolve do not count against this figure.
    pub max_resolved_error: f64,
    /// Largest rounding floor used above.
    pub roundoff_floor: f64,
}

/// Like [`grad_check_many`], also reporting the roundoff-adjusted error.
pub fn grad_check_detailed<F>(f: F, xs: &[Tensor], eps: f64) -> Result<Vec<GradCheckStats>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x)).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x)).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut inputs = xs.to_vec();
    let mut out = Vec::with_capacity(xs.len());
    for (which, grad) in analytic.iter().enumerate() {
        let mut stats = GradCheckStats {
            max_rel_error: 0.0,
            max_resolved_error: 0.0,
            roundoff_floor: 0.0,
        };
        for i in 0..grad.len() {
            let orig = inputs[which].data()[i];
            inputs[which].data_mut()[i] = orig + eps;
            let plus = eval(&inputs)?;
            inputs[which].data_mut()[i] = orig - eps;
            let minus = eval(&inputs)?;
            inputs[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = grad[i].abs().max(numeric.abs()).max(1e-8);
            let diff = (grad[i] - numeric).abs();
            let floor = ROUNDOFF_ULPS * f64::EPSILON * plus.abs().max(minus.abs()) / (2.0 * eps);
            stats.max_rel_error = stats.max_rel_error.max(diff / denom);
            stats.max_resolved_error = stats.max_resolved_error.max((diff - floor).max(0.0) / denom);
            stats.roundoff_floor = stats.roundoff_floor.max(floor);
        }
        out.push(stats);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn tensor_rejects_bad_length_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::vector(vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let id = tape.constant(&t(&[2, 2], &[1., 0., 0., 1.]));
        let x = tape.constant(&t(&[2, 1], &[3., 4.]));
        assert_eq!(id.matmul(&x).unwrap().value().data(), &[3., 4.]);

        let a = tape.constant(&t(&[1, 2], &[1., 2.]));
        let out = a.matmul(&x).unwrap();
        assert_eq!(out.shape(), vec![1, 1]);
        assert_eq!(out.item(), 11.0);

        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[4, 2]));
        match a.matmul(&b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_t_matches_matmul_of_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[5, 4], &mut rng);
        let mut bt = vec![0.0; 20];
        for i in 0..5 {
            for j in 0..4 {
                bt[j * 5 + i] = b.data()[i * 4 + j];
            }
        }
        let tape = Tape::new();
        let x = tape.constant(&a).matmul_t(&tape.constant(&b)).unwrap().value();
        let y = tape
            .constant(&a)
            .matmul(&tape.constant(&t(&[4, 5], &bt)))
            .unwrap()
            .value();
        for (p, q) in x.data().iter().zip(y.data()) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-14);
        }
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let v = |d: &[f64]| tape.constant(&t(&[d.len()], d));
        assert_eq!(v(&[1., 2.]).add(&v(&[0., 0.])).unwrap().value().data(), &[1., 2.]);
        assert_eq!(v(&[1., 2.]).add(&v(&[3., 4.])).unwrap().value().data(), &[4., 6.]);
        assert!(matches!(v(&[1.]).add(&v(&[1., 2.])), Err(Error::Shape { .. })));
        assert_eq!(v(&[1., 2.]).mul(&v(&[1., 1.])).unwrap().value().data(), &[1., 2.]);
        assert_eq!(v(&[0., 5.]).mul(&v(&[7., 3.])).unwrap().value().data(), &[0., 15.]);
        assert_eq!(v(&[2., 3.]).mul(&v(&[0., 0.])).unwrap().value().data(), &[0., 0.]);
    }

    #[test]
    fn activation_examples() {
        let tape = Tape::new();
        let v = |d: &[f64]| tape.constant(&t(&[d.len()], d));
        assert_eq!(v(&[0.0]).tanh().unwrap().item(), 0.0);
        assert_abs_diff_eq!(v(&[1.0]).tanh().unwrap().item(), 0.7615941559557649, epsilon = 1e-15);
        for x in [0.3, 1.7, 4.2] {
            let p = v(&[x]).tanh().unwrap().item();
            let n = v(&[-x]).tanh().unwrap().item();
            assert_eq!(p, -n);
        }
        assert_eq!(v(&[0.0]).sigmoid().unwrap().item(), 0.5);
        let big = v(&[800.0]).sigmoid().unwrap().item();
        assert!(big <= 1.0 && big > 1.0 - 1e-12);
        assert_eq!(v(&[-800.0]).sigmoid().unwrap().item(), 0.0);
        assert_abs_diff_eq!(v(&[2.0]).sigmoid().unwrap().item(), 0.8807970779778823, epsilon = 1e-15);
    }

    #[test]
    fn concat_examples() {
        let tape = Tape::new();
        let a = tape.constant(&t(&[2], &[1., 2.]));
        let b = tape.constant(&t(&[1], &[3.]));
        assert_eq!(a.concat(&b).unwrap().value().data(), &[1., 2., 3.]);

        let m = tape.constant(&Tensor::zeros(&[1024]));
        let s = tape.constant(&Tensor::zeros(&[1024]));
        assert_eq!(m.concat(&s).unwrap().shape(), vec![2048]);

        let x = tape.constant(&Tensor::zeros(&[2, 3]));
        let y = tape.constant(&Tensor::zeros(&[3, 3]));
        assert!(matches!(x.concat(&y), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_cross_entropy_examples() {
        let tape = Tape::new();
        let l = tape.constant(&t(&[1, 2], &[0., 0.]));
        assert_abs_diff_eq!(
            l.softmax_cross_entropy(&[0]).unwrap().item(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        // ln(1 + e^-10)
        let l = tape.constant(&t(&[1, 2], &[10., 0.]));
        let expected = (-10f64).exp().ln_1p();
        assert_abs_diff_eq!(l.softmax_cross_entropy(&[0]).unwrap().item(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 4.54e-5, epsilon = 1e-7);
        assert!(matches!(
            l.softmax_cross_entropy(&[5]),
            Err(Error::IndexOutOfRange { index: 5, bound: 2, .. })
        ));
        // large logits stay finite
        let l = tape.constant(&t(&[1, 3], &[1000., -1000., 0.]));
        assert!(l.softmax_cross_entropy(&[1]).unwrap().item().is_finite());
    }

    #[test]
    fn softmax_cross_entropy_gradient_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = random(&[6, 7], &mut rng);
        let tape = Tape::new();
        let x = tape.param(&logits);
        let loss = x.scale(5.0).unwrap().softmax_cross_entropy(&[0, 1, 2, 3, 4, 6]).unwrap();
        let g = tape.backward(loss).unwrap();
        for row in g.get(&x).unwrap().chunks(7) {
            assert!(row.iter().sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let w = tape.param(&t(&[2], &[1., 2.]));
        let loss = w.mul(&w).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(&w).unwrap(), &[2., 4.]);

        let tape = Tape::new();
        let w = tape.param(&t(&[2], &[1., 2.]));
        let c = tape.constant(&t(&[2], &[3., 4.]));
        let loss = c.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get_or_zeros(&w), vec![0., 0.]);

        let nonscalar = c.tanh().unwrap();
        assert!(matches!(tape.backward(nonscalar), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_accumulates_into_tensor() {
        let mut w = t(&[2], &[1., 2.]).with_requires_grad(true);
        for _ in 0..2 {
            let tape = Tape::new();
            let v = tape.leaf(&w);
            let loss = v.mul(&v).unwrap().sum().unwrap();
            tape.backward(loss).unwrap().accumulate_into(&v, &mut w).unwrap();
        }
        assert_eq!(w.grad().unwrap(), &[4., 8.]);
        w.zero_grad();
        assert_eq!(w.grad().unwrap(), &[0., 0.]);
    }

    #[test]
    fn shared_input_gradient_is_sum_of_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[4], &mut rng);
        let ga = {
            let tape = Tape::new();
            let v = tape.param(&x);
            let loss = v.tanh().unwrap().sum().unwrap();
            tape.backward(loss).unwrap().get(&v).unwrap()[0]
        };
        let gb = {
            let tape = Tape::new();
            let v = tape.param(&x);
            let loss = v.mul(&v).unwrap().sum().unwrap();
            tape.backward(loss).unwrap().get(&v).unwrap()[0]
        };
        let both = {
            let tape = Tape::new();
            let v = tape.param(&x);
            let a = v.tanh().unwrap().sum().unwrap();
            let b = v.mul(&v).unwrap().sum().unwrap();
            let loss = a.add(&b).unwrap();
            tape.backward(loss).unwrap().get(&v).unwrap()[0]
        };
        assert_abs_diff_eq!(both, ga + gb, epsilon = 1e-14);
    }

    #[test]
    fn grad_check_flags_a_detached_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[6], &mut rng);
        // x ⊙ stop_gradient(x): the tape sees half of the true derivative.
        let stats = grad_check_detailed(
            |tape, v| {
                let frozen = tape.constant(&v[0].value());
                v[0].mul(&frozen)?.sum()
            },
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert!(stats[0].max_rel_error > 0.4);
        assert!(stats[0].max_resolved_error > 0.4);
    }

    #[test]
    fn grad_check_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[10], &mut rng);
        let err = grad_check(|_, v| v.tanh()?.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "tanh sum err {err}");

        let first = t(&[1, 3], &[1., 0., 0.]);
        let err = grad_check(
            move |tape, v| {
                let sel = tape.constant(&first);
                sel.matmul_t(&v)?.sum()
            },
            &t(&[1, 3], &[0.3, -0.2, 0.9]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "linear err {err}");
    }

    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let c = random(&[5, 4], &mut rng);
        let bias = random(&[5], &mut rng);
        let table = random(&[6, 4], &mut rng);
        let errs = grad_check_many(
            |_, v| {
                let (a, b, c, bias, table) = (v[0], v[1], v[2], v[3], v[4]);
                let p = a.matmul(&b)?.tanh()?; // 3×2
                let q = a.matmul_t(&c)?.add_bias(&bias)?.sigmoid()?; // 3×5
                let r = p.concat(&q)?; // 3×7
                let g = table.gather_rows(&[1, 4, 1])?; // 3×4
                let s = a.mul(&g)?.add(&a)?.matmul_t(&c)?; // 3×5
                let top = concat_rows(&[r, r])?; // 6×7
                let loss = top.scale(0.7)?.softmax_cross_entropy(&[0, 1, 2, 3, 4, 6])?;
                loss.add(&s.tanh()?.sum()?)
            },
            &[a, b, c, bias, table],
            1e-5,
        )
        .unwrap();
        for e in errs {
            assert!(e < 1e-4, "relative error {e}");
        }
    }

    #[test]
    fn tape_visits_each_op_once_and_keeps_leaf_grads() {
        let tape = Tape::new();
        let x = tape.param(&t(&[1], &[0.5]));
        let y = x.mul(&x).unwrap();
        let z = y.mul(&y).unwrap(); // x^4
        let g = tape.backward(z.sum().unwrap()).unwrap();
        assert_abs_diff_eq!(g.get(&x).unwrap()[0], 4.0 * 0.125, epsilon = 1e-15);
        assert!(g.get(&y).is_none());
    }

    proptest! {
        #[test]
        fn add_mul_commutative_associative(
            a in proptest::collection::vec(-1.0f64..1.0, 5),
            b in proptest::collection::vec(-1.0f64..1.0, 5),
            c in proptest::collection::vec(-1.0f64..1.0, 5),
        ) {
            let tape = Tape::new();
            let (x, y, z) = (tape.constant(&t(&[5], &a)), tape.constant(&t(&[5], &b)), tape.constant(&t(&[5], &c)));
            let ab = x.add(&y).unwrap().value();
            let ba = y.add(&x).unwrap().value();
            prop_assert_eq!(ab.data(), ba.data());
            let l = x.add(&y).unwrap().add(&z).unwrap().value();
            let r = x.add(&y.add(&z).unwrap()).unwrap().value();
            for (p, q) in l.data().iter().zip(r.data()) { prop_assert!((p - q).abs() <= 1e-12); }
            let ab = x.mul(&y).unwrap().value();
            let ba = y.mul(&x).unwrap().value();
            prop_assert_eq!(ab.data(), ba.data());
            let l = x.mul(&y).unwrap().mul(&z).unwrap().value();
            let r = x.mul(&y.mul(&z).unwrap()).unwrap().value();
            for (p, q) in l.data().iter().zip(r.data()) { prop_assert!((p - q).abs() <= 1e-12); }
        }

        #[test]
        fn concat_then_split_is_exact(
            rows in 1usize..4,
            p in 1usize..5,
            q in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&[rows, p], &mut rng);
            let b = random(&[rows, q], &mut rng);
            let tape = Tape::new();
            let joined = tape.constant(&a).concat(&tape.constant(&b)).unwrap().value();
            let mut left = Vec::new();
            let mut right = Vec::new();
            for row in joined.data().chunks(p + q) {
                left.extend_from_slice(&row[..p]);
                right.extend_from_slice(&row[p..]);
            }
            prop_assert_eq!(&left[..], a.data());
            prop_assert_eq!(&right[..], b.data());
        }
    }
}

//! A small tape-based reverse-mode differentiation engine over dense
//! row-major matrices.
//!
//! Every operation appends a node holding its value and the ids of its
//! inputs. [`Var::backward`] seeds the adjoint of a scalar output and walks
//! the tape in reverse, accumulating adjoints into every input. Scalars are
//! `1 x 1` matrices.
//!
//! ```
//! use blenda::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
//! let m = x.mean();
//! m.backward().unwrap();
//! assert_eq!(m.scalar(), 2.0);
//! assert_eq!(tape.grad(x).data(), &[1.0 / 3.0; 3]);
//! ```

mod checkpoint;
mod optim;

use std::cell::RefCell;

use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointKind};
pub use optim::{adamw_step, AdamState, AdamWConfig};

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("tensor data length {len} does not match shape {rows}x{cols}")]
    BadLength {
        len: usize,
        rows: usize,
        cols: usize,
    },
    #[error("log of non-positive value {value} at index {index}")]
    NonPositiveLog { index: usize, value: f64 },
    #[error("backward requires a scalar output, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("non-finite gradient in parameter {param} at index {index}: {value}")]
    NonFiniteGradient {
        param: usize,
        index: usize,
        value: f64,
    },
    #[error("optimizer received {params} parameters but {grads} gradients")]
    ArityMismatch { params: usize, grads: usize },
}

/// A dense `rows x cols` matrix of finite doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AutodiffError> {
        if data.len() != rows * cols {
            return Err(AutodiffError::BadLength {
                len: data.len(),
                rows,
                cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Multiplier applied to adjoints flowing back through a gradient reversal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrlConfig {
    pub scale: f64,
}

impl Default for GrlConfig {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    MeanCols(usize),
    Transpose(usize),
    LogSoftmax(usize),
    Grl(usize, f64),
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

/// Records operations for one forward/backward pass. Confined to a thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node so the tape can be reused for a new pass.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input. Parameters and constants are both leaves; the
    /// caller decides which gradients to read.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let grad = vec![0.0; value.len()];
        nodes.push(Node { value, grad, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn value(&self, var: Var<'_>) -> Tensor {
        self.nodes.borrow()[var.id].value.clone()
    }

    pub fn grad(&self, var: Var<'_>) -> Tensor {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        Tensor {
            rows: node.value.rows,
            cols: node.value.cols,
            data: node.grad.clone(),
        }
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn backward_from(&self, root: usize) -> Result<(), AutodiffError> {
        let mut nodes = self.nodes.borrow_mut();
        let shape = nodes[root].value.shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NotScalar(shape));
        }
        for node in nodes.iter_mut() {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        nodes[root].grad[0] = 1.0;
        for id in (0..=root).rev() {
            let op = nodes[id].op;
            if matches!(op, Op::Leaf) {
                continue;
            }
            let (before, rest) = nodes.split_at_mut(id);
            let out = &rest[0];
            if out.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            propagate(op, out, before);
        }
        Ok(())
    }
}

fn propagate(op: Op, out: &Node, inputs: &mut [Node]) {
    let g = &out.grad;
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = inputs[a].value.shape();
            let n = inputs[b].value.cols;
            // dA = dC * B^T
            let bv = inputs[b].value.data.clone();
            let av = inputs[a].value.data.clone();
            {
                let ga = &mut inputs[a].grad;
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * bv[p * n + j];
                        }
                        ga[i * k + p] += acc;
                    }
                }
            }
            // dB = A^T * dC
            let gb = &mut inputs[b].grad;
            for i in 0..m {
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        gb[p * n + j] += x * g[i * n + j];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            accumulate(&mut inputs[a].grad, g, 1.0);
            accumulate(&mut inputs[b].grad, g, 1.0);
        }
        Op::AddRow(a, b) => {
            accumulate(&mut inputs[a].grad, g, 1.0);
            let n = out.value.cols;
            let gb = &mut inputs[b].grad;
            for row in g.chunks(n) {
                for (acc, &v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        Op::Sub(a, b) => {
            accumulate(&mut inputs[a].grad, g, 1.0);
            accumulate(&mut inputs[b].grad, g, -1.0);
        }
        Op::Mul(a, b) => {
            let av = inputs[a].value.data.clone();
            let bv = inputs[b].value.data.clone();
            for (i, &gi) in g.iter().enumerate() {
                inputs[a].grad[i] += gi * bv[i];
                inputs[b].grad[i] += gi * av[i];
            }
        }
        Op::Scale(a, c) => accumulate(&mut inputs[a].grad, g, c),
        Op::Relu(a) => {
            let node = &mut inputs[a];
            for (i, &gi) in g.iter().enumerate() {
                if node.value.data[i] > 0.0 {
                    node.grad[i] += gi;
                }
            }
        }
        Op::Sigmoid(a) => {
            let ga = &mut inputs[a].grad;
            for (i, (&gi, &s)) in g.iter().zip(&out.value.data).enumerate() {
                ga[i] += gi * s * (1.0 - s);
            }
        }
        Op::Log(a) => {
            let node = &mut inputs[a];
            for (i, &gi) in g.iter().enumerate() {
                node.grad[i] += gi / node.value.data[i];
            }
        }
        Op::Clamp(a, lo, hi) => {
            let node = &mut inputs[a];
            for (i, &gi) in g.iter().enumerate() {
                let x = node.value.data[i];
                if x >= lo && x <= hi {
                    node.grad[i] += gi;
                }
            }
        }
        Op::Sum(a) => {
            let g0 = g[0];
            inputs[a].grad.iter_mut().for_each(|x| *x += g0);
        }
        Op::Mean(a) => {
            let node = &mut inputs[a];
            let share = g[0] / node.grad.len() as f64;
            node.grad.iter_mut().for_each(|x| *x += share);
        }
        Op::MeanRows(a) => {
            let node = &mut inputs[a];
            let (m, n) = node.value.shape();
            for row in node.grad.chunks_mut(n) {
                for (x, gj) in row.iter_mut().zip(g) {
                    *x += gj / m as f64;
                }
            }
        }
        Op::MeanCols(a) => {
            let node = &mut inputs[a];
            let n = node.value.cols();
            for (row, gi) in node.grad.chunks_mut(n).zip(g) {
                row.iter_mut().for_each(|x| *x += gi / n as f64);
            }
        }
        Op::Transpose(a) => {
            let node = &mut inputs[a];
            let (m, n) = node.value.shape();
            for i in 0..m {
                for j in 0..n {
                    node.grad[i * n + j] += g[j * m + i];
                }
            }
        }
        Op::LogSoftmax(a) => {
            let n = out.value.cols;
            let ga = &mut inputs[a].grad;
            for (r, (grow, yrow)) in g.chunks(n).zip(out.value.data.chunks(n)).enumerate() {
                let total: f64 = grow.iter().sum();
                for j in 0..n {
                    ga[r * n + j] += grow[j] - yrow[j].exp() * total;
                }
            }
        }
        Op::Grl(a, scale) => accumulate(&mut inputs[a].grad, g, -scale),
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    /// The single entry of a `1 x 1` value.
    pub fn scalar(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data[0]
    }

    pub fn grad(&self) -> Tensor {
        self.tape.grad(*self)
    }

    /// Back-propagates from this scalar, overwriting all adjoints on the tape.
    pub fn backward(&self) -> Result<(), AutodiffError> {
        self.tape.backward_from(self.id)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            Tensor {
                rows: x.rows,
                cols: x.cols,
                data: x.data.iter().map(|&v| f(v)).collect(),
            }
        };
        self.tape.push(value, op)
    }

    fn same_shape(&self, other: &Var<'t>, name: &'static str) -> Result<(), AutodiffError> {
        let (l, r) = (self.shape(), other.shape());
        if l != r {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                left: l,
                right: r,
            });
        }
        Ok(())
    }

    fn zip(&self, other: &Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            Tensor {
                rows: a.rows,
                cols: a.cols,
                data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        };
        self.tape.push(value, op)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.cols != b.rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    left: a.shape(),
                    right: b.shape(),
                });
            }
            let (m, k, n) = (a.rows, a.cols, b.cols);
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                let out = &mut data[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = a.data[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &b.data[p * n..(p + 1) * n];
                    for (o, &y) in out.iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
            Tensor {
                rows: m,
                cols: n,
                data,
            }
        };
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id)))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.same_shape(other, "add")?;
        Ok(self.zip(other, Op::Add(self.id, other.id), |x, y| x + y))
    }

    /// Adds a `1 x cols` row to every row of `self`.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (m, n) = self.shape();
        if row.shape() != (1, n) {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                left: (m, n),
                right: row.shape(),
            });
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[row.id].value);
            let data = a
                .data
                .chunks(n)
                .flat_map(|r| r.iter().zip(&b.data).map(|(&x, &y)| x + y))
                .collect();
            Tensor {
                rows: m,
                cols: n,
                data,
            }
        };
        Ok(self.tape.push(value, Op::AddRow(self.id, row.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.same_shape(other, "sub")?;
        Ok(self.zip(other, Op::Sub(self.id, other.id), |x, y| x - y))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.same_shape(other, "mul")?;
        Ok(self.zip(other, Op::Mul(self.id, other.id), |x, y| x * y))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, factor), |x| x * factor)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&self) -> Result<Var<'t>, AutodiffError> {
        {
            let nodes = self.tape.nodes.borrow();
            if let Some((index, &value)) = nodes[self.id]
                .value
                .data
                .iter()
                .enumerate()
                .find(|(_, v)| v.is_nan() || **v <= 0.0)
            {
                return Err(AutodiffError::NonPositiveLog { index, value });
            }
        }
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    /// Clamps into `[lo, hi]`; adjoints pass only where the input was inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&self) -> Var<'t> {
        let total = self.tape.nodes.borrow()[self.id].value.data.iter().sum();
        self.tape.push(Tensor::scalar(total), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let mean = {
            let nodes = self.tape.nodes.borrow();
            let d = &nodes[self.id].value.data;
            d.iter().sum::<f64>() / d.len() as f64
        };
        self.tape.push(Tensor::scalar(mean), Op::Mean(self.id))
    }

    /// Column means: `m x n` to `1 x n`.
    pub fn mean_rows(&self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut data = vec![0.0; x.cols];
            for row in x.data.chunks(x.cols) {
                for (acc, &v) in data.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            data.iter_mut().for_each(|v| *v /= x.rows as f64);
            Tensor {
                rows: 1,
                cols: x.cols,
                data,
            }
        };
        self.tape.push(value, Op::MeanRows(self.id))
    }

    /// Row means: `m x n` to `m x 1`.
    pub fn mean_cols(&self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let data = x
                .data
                .chunks(x.cols)
                .map(|row| row.iter().sum::<f64>() / x.cols as f64)
                .collect();
            Tensor {
                rows: x.rows,
                cols: 1,
                data,
            }
        };
        self.tape.push(value, Op::MeanCols(self.id))
    }

    pub fn transpose(&self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (m, n) = x.shape();
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    data[j * m + i] = x.data[i * n + j];
                }
            }
            Tensor {
                rows: n,
                cols: m,
                data,
            }
        };
        self.tape.push(value, Op::Transpose(self.id))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut data = Vec::with_capacity(x.len());
            for row in x.data.chunks(x.cols) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                data.extend(row.iter().map(|&v| v - lse));
            }
            Tensor {
                rows: x.rows,
                cols: x.cols,
                data,
            }
        };
        self.tape.push(value, Op::LogSoftmax(self.id))
    }

    /// Identity forward; multiplies the adjoint by `-cfg.scale` backward.
    pub fn grl(&self, cfg: GrlConfig) -> Var<'t> {
        self.unary(Op::Grl(self.id, cfg.scale), |x| x)
    }
}

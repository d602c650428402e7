//! Dense row-major matrices and a reverse-mode differentiation tape.
//!
//! The tape records every operation as a node holding its value. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates gradients into every node that depends on a parameter.
//! Nodes that do not depend on any parameter are treated as constants and
//! keep a zero gradient, which lets large fixed operands (the normalized
//! adjacency, selector matrices) skip their gradient products entirely.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: expected {expected} input(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("backward requires a scalar (1x1) loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("node {0} is not a leaf")]
    NotLeaf(usize),
    #[error("gather-rows: index {index} out of range for {rows} rows")]
    GatherIndex { index: usize, rows: usize },
    #[error("{op}: constant must be finite and non-zero, got {value}")]
    BadConstant { op: &'static str, value: f64 },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list()
            .entries(self.data.chunks(self.cols.max(1)))
            .finish()
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from-rows",
                    lhs: (1, cols),
                    rhs: (1, row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 matrix (or the first entry of any matrix).
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Selects the listed rows, in order (repeats allowed).
    pub fn select_rows(&self, index: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(index.len() * self.cols);
        for &i in index {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: index.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        matmul_into(self, rhs, &mut out);
        Ok(out)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Matrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `out += a * b`; zero entries of `a` are skipped so sparse left operands are cheap.
fn matmul_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let n = b.cols;
    for i in 0..a.rows {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += aᵀ * g`
fn matmul_tn_into(a: &Matrix, g: &Matrix, out: &mut Matrix) {
    let n = g.cols;
    for i in 0..a.rows {
        let g_row = &g.data[i * n..(i + 1) * n];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let out_row = &mut out.data[k * n..(k + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aik * gv;
            }
        }
    }
}

/// `out += g * bᵀ`
fn matmul_nt_into(g: &Matrix, b: &Matrix, out: &mut Matrix) {
    for i in 0..g.rows {
        let g_row = g.row(i);
        for k in 0..b.rows {
            let dot: f64 = g_row.iter().zip(b.row(k)).map(|(x, y)| x * y).sum();
            out.data[i * out.cols + k] += dot;
        }
    }
}

/// Compressed sparse row matrix, used as a fixed left operand (graph propagation).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn from_dense(m: &Matrix) -> Self {
        let mut row_ptr = Vec::with_capacity(m.rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in 0..m.rows {
            for (c, &v) in m.row(r).iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            rows: m.rows,
            cols: m.cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Builds from (row, col, value) triplets; duplicate positions are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; rows + 1];
        let mut col_idx: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                m.data[r * self.cols + self.col_idx[p]] += self.values[p];
            }
        }
        m
    }

    fn mul_into(&self, x: &Matrix, out: &mut Matrix) {
        let n = x.cols;
        for r in 0..self.rows {
            let out_row = &mut out.data[r * n..(r + 1) * n];
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                let v = self.values[p];
                let x_row = &x.data[self.col_idx[p] * n..(self.col_idx[p] + 1) * n];
                for (o, &xv) in out_row.iter_mut().zip(x_row) {
                    *o += v * xv;
                }
            }
        }
    }

    fn transpose_mul_into(&self, g: &Matrix, out: &mut Matrix) {
        let n = g.cols;
        for r in 0..self.rows {
            let g_row = &g.data[r * n..(r + 1) * n];
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                let v = self.values[p];
                let c = self.col_idx[p];
                let out_row = &mut out.data[c * n..(c + 1) * n];
                for (o, &gv) in out_row.iter_mut().zip(g_row) {
                    *o += v * gv;
                }
            }
        }
    }
}

/// Logistic sigmoid, evaluated in the branch form that never overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smallest argument accepted by `ln`; keeps log-probabilities finite.
pub const LN_FLOOR: f64 = f64::MIN_POSITIVE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation recorded on a tape node.
#[derive(Debug, Clone)]
pub enum Op {
    /// Parameter or constant input.
    Leaf,
    MatMul,
    /// Elementwise sum; the right operand may be a 1×cols row broadcast over rows.
    Add,
    /// Elementwise difference; the right operand may be a broadcast row.
    Subtract,
    /// Elementwise (Hadamard) product of equal shapes.
    Mul,
    /// Elementwise quotient of equal shapes.
    Div,
    ScaleByConstant(f64),
    DivideByConstant(f64),
    RowSoftmax,
    Sigmoid,
    Relu,
    MaxWithZero,
    /// Natural log with the argument floored at [`LN_FLOOR`].
    Ln,
    MeanAll,
    SumAll,
    GatherRows(Arc<[usize]>),
    /// Row-major reinterpretation with the same element count.
    Reshape(usize, usize),
    /// Left multiplication by a fixed sparse matrix.
    Propagate(Arc<SparseMatrix>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Subtract => "subtract",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::ScaleByConstant(_) => "scale-by-constant",
            Op::DivideByConstant(_) => "divide-by-constant",
            Op::RowSoftmax => "row-softmax",
            Op::Sigmoid => "elementwise-sigmoid",
            Op::Relu => "relu",
            Op::MaxWithZero => "max-with-zero",
            Op::Ln => "ln",
            Op::MeanAll => "mean-all",
            Op::SumAll => "sum-all",
            Op::GatherRows(_) => "gather-rows",
            Op::Reshape(..) => "reshape",
            Op::Propagate(_) => "propagate",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Leaf => 0,
            Op::MatMul | Op::Add | Op::Subtract | Op::Mul | Op::Div => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    is_param: bool,
}

/// Gradients of a scalar loss with respect to the tape's parameters.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    entries: Vec<(NodeId, Matrix)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.entries.iter().find(|(k, _)| *k == id).map(|(_, m)| m)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Matrix)> {
        self.entries.iter().map(|(k, m)| (*k, m))
    }
}

/// Append-only computation record. Inputs always precede the nodes using them.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_broadcast(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    let same = a.shape() == b.shape();
    let row = b.rows == 1 && b.cols == a.cols;
    if same || row {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        })
    }
}

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        })
    }
}

fn broadcast_zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let mut out = a.clone();
    if b.rows == a.rows {
        for (o, &bv) in out.data.iter_mut().zip(&b.data) {
            *o = f(*o, bv);
        }
    } else {
        for r in 0..a.rows {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(&b.data) {
                *o = f(*o, bv);
            }
        }
    }
    out
}

/// Sums `g` down to `shape`, undoing a row broadcast when needed.
fn unbroadcast(g: &Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Matrix::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, &v) in out.data.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn row_softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn evaluate(op: &Op, inputs: &[&Matrix]) -> Result<Matrix> {
    let name = op.name();
    if inputs.len() != op.arity() {
        return Err(TensorError::Arity {
            op: name,
            expected: op.arity(),
            got: inputs.len(),
        });
    }
    let value = match op {
        Op::Leaf => unreachable!("leaves are appended directly"),
        Op::MatMul => inputs[0].matmul(inputs[1])?,
        Op::Add => {
            check_broadcast(name, inputs[0], inputs[1])?;
            broadcast_zip(inputs[0], inputs[1], |a, b| a + b)
        }
        Op::Subtract => {
            check_broadcast(name, inputs[0], inputs[1])?;
            broadcast_zip(inputs[0], inputs[1], |a, b| a - b)
        }
        Op::Mul => {
            check_same(name, inputs[0], inputs[1])?;
            broadcast_zip(inputs[0], inputs[1], |a, b| a * b)
        }
        Op::Div => {
            check_same(name, inputs[0], inputs[1])?;
            broadcast_zip(inputs[0], inputs[1], |a, b| a / b)
        }
        Op::ScaleByConstant(c) => {
            if !c.is_finite() {
                return Err(TensorError::BadConstant { op: name, value: *c });
            }
            inputs[0].map(|v| v * c)
        }
        Op::DivideByConstant(c) => {
            if !c.is_finite() || *c == 0.0 {
                return Err(TensorError::BadConstant { op: name, value: *c });
            }
            inputs[0].map(|v| v / c)
        }
        Op::RowSoftmax => row_softmax(inputs[0]),
        Op::Sigmoid => inputs[0].map(sigmoid),
        Op::Relu | Op::MaxWithZero => inputs[0].map(|v| v.max(0.0)),
        Op::Ln => inputs[0].map(|v| v.max(LN_FLOOR).ln()),
        Op::MeanAll => {
            let x = inputs[0];
            let n = x.data.len().max(1) as f64;
            Matrix::scalar(x.data.iter().sum::<f64>() / n)
        }
        Op::SumAll => Matrix::scalar(inputs[0].data.iter().sum()),
        Op::GatherRows(index) => {
            let x = inputs[0];
            if let Some(&bad) = index.iter().find(|&&i| i >= x.rows) {
                return Err(TensorError::GatherIndex {
                    index: bad,
                    rows: x.rows,
                });
            }
            x.select_rows(index)
        }
        Op::Reshape(rows, cols) => {
            let x = inputs[0];
            if rows * cols != x.data.len() {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    lhs: x.shape(),
                    rhs: (*rows, *cols),
                });
            }
            Matrix::new(*rows, *cols, x.data.clone())?
        }
        Op::Propagate(s) => {
            let x = inputs[0];
            if s.cols != x.rows {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    lhs: s.shape(),
                    rhs: x.shape(),
                });
            }
            let mut out = Matrix::zeros(s.rows, x.cols);
            s.mul_into(x, &mut out);
            out
        }
    };
    Ok(value)
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

    fn push_leaf(&mut self, value: Matrix, is_param: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            grad: None,
            requires_grad: is_param,
            is_param,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Appends a trainable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Appends a fixed leaf that never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push_leaf(value, false)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(TensorError::UnknownNode(id.0))
    }

    /// Appends the result of `op` applied to `inputs`.
    pub fn forward(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if matches!(op, Op::Leaf) {
            return Err(TensorError::Arity {
                op: "leaf",
                expected: 0,
                got: inputs.len(),
            });
        }
        let values = inputs
            .iter()
            .map(|&id| self.node(id).map(|n| &n.value))
            .collect::<Result<Vec<_>>>()?;
        let value = evaluate(&op, &values)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            grad: None,
            requires_grad,
            is_param: false,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the last backward pass (zeros when unreached).
    pub fn grad(&self, id: NodeId) -> Matrix {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows, node.value.cols))
    }

    pub fn params(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].is_param)
            .map(NodeId)
            .collect()
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.nodes[id.0].is_param
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Replaces a leaf's value. Dependent nodes keep stale values until [`Tape::replay`].
    pub fn set_leaf(&mut self, id: NodeId, value: Matrix) -> Result<()> {
        let node = self.nodes.get_mut(id.0).ok_or(TensorError::UnknownNode(id.0))?;
        if !matches!(node.op, Op::Leaf) {
            return Err(TensorError::NotLeaf(id.0));
        }
        if node.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set-leaf",
                lhs: node.value.shape(),
                rhs: value.shape(),
            });
        }
        node.value = value;
        Ok(())
    }

    /// Recomputes every non-leaf value from the current leaves.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = {
                let node = &self.nodes[i];
                let inputs: Vec<&Matrix> =
                    node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                evaluate(&node.op, &inputs)?
            };
            self.nodes[i].value = value;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn accumulate(&mut self, id: NodeId, g: Matrix) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    /// Reverse accumulation from a scalar node; returns the parameter gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        let shape = self.node(loss)?.value.shape();
        if shape != (1, 1) {
            return Err(TensorError::NonScalarLoss {
                rows: shape.0,
                cols: shape.1,
            });
        }
        self.zero_grad();
        self.nodes[loss.0].grad = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            self.propagate_node(i, &g);
        }
        let entries = self
            .params()
            .into_iter()
            .map(|id| (id, self.grad(id)))
            .collect();
        Ok(Gradients { entries })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate_node(&mut self, i: usize, g: &Matrix) {
        let node = &self.nodes[i];
        let inputs = node.inputs.clone();
        let out = &node.value;
        let mut pending: Vec<(NodeId, Matrix)> = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (&self.nodes[inputs[0].0].value, &self.nodes[inputs[1].0].value);
                if self.needs(inputs[0]) {
                    let mut ga = Matrix::zeros(a.rows, a.cols);
                    matmul_nt_into(g, b, &mut ga);
                    pending.push((inputs[0], ga));
                }
                if self.needs(inputs[1]) {
                    let mut gb = Matrix::zeros(b.rows, b.cols);
                    matmul_tn_into(a, g, &mut gb);
                    pending.push((inputs[1], gb));
                }
            }
            Op::Add | Op::Subtract => {
                let b_shape = self.nodes[inputs[1].0].value.shape();
                pending.push((inputs[0], g.clone()));
                let mut gb = unbroadcast(g, b_shape);
                if matches!(node.op, Op::Subtract) {
                    gb = gb.map(|v| -v);
                }
                pending.push((inputs[1], gb));
            }
            Op::Mul => {
                let (a, b) = (&self.nodes[inputs[0].0].value, &self.nodes[inputs[1].0].value);
                pending.push((inputs[0], broadcast_zip(g, b, |gv, bv| gv * bv)));
                pending.push((inputs[1], broadcast_zip(g, a, |gv, av| gv * av)));
            }
            Op::Div => {
                let (a, b) = (&self.nodes[inputs[0].0].value, &self.nodes[inputs[1].0].value);
                pending.push((inputs[0], broadcast_zip(g, b, |gv, bv| gv / bv)));
                let mut gb = g.clone();
                for ((o, &av), &bv) in gb.data.iter_mut().zip(&a.data).zip(&b.data) {
                    *o = -*o * av / (bv * bv);
                }
                pending.push((inputs[1], gb));
            }
            Op::ScaleByConstant(c) => pending.push((inputs[0], g.map(|v| v * c))),
            Op::DivideByConstant(c) => pending.push((inputs[0], g.map(|v| v / c))),
            Op::RowSoftmax => {
                let mut gx = g.clone();
                for r in 0..out.rows {
                    let y = out.row(r);
                    let dot: f64 = g.row(r).iter().zip(y).map(|(a, b)| a * b).sum();
                    for (gxv, (&gv, &yv)) in gx.row_mut(r).iter_mut().zip(g.row(r).iter().zip(y)) {
                        *gxv = yv * (gv - dot);
                    }
                }
                pending.push((inputs[0], gx));
            }
            Op::Sigmoid => pending.push((inputs[0], broadcast_zip(g, out, |gv, y| gv * y * (1.0 - y)))),
            Op::Relu | Op::MaxWithZero => {
                let x = &self.nodes[inputs[0].0].value;
                pending.push((inputs[0], broadcast_zip(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })));
            }
            Op::Ln => {
                let x = &self.nodes[inputs[0].0].value;
                pending.push((inputs[0], broadcast_zip(g, x, |gv, xv| gv / xv.max(LN_FLOOR))));
            }
            Op::MeanAll => {
                let x = &self.nodes[inputs[0].0].value;
                let n = x.data.len().max(1) as f64;
                pending.push((inputs[0], Matrix::filled(x.rows, x.cols, g.item() / n)));
            }
            Op::SumAll => {
                let x = &self.nodes[inputs[0].0].value;
                pending.push((inputs[0], Matrix::filled(x.rows, x.cols, g.item())));
            }
            Op::GatherRows(index) => {
                let x = &self.nodes[inputs[0].0].value;
                let mut gx = Matrix::zeros(x.rows, x.cols);
                for (r, &src) in index.iter().enumerate() {
                    for (o, &v) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                pending.push((inputs[0], gx));
            }
            Op::Reshape(..) => {
                let x = &self.nodes[inputs[0].0].value;
                pending.push((
                    inputs[0],
                    Matrix {
                        rows: x.rows,
                        cols: x.cols,
                        data: g.data.clone(),
                    },
                ));
            }
            Op::Propagate(s) => {
                let x = &self.nodes[inputs[0].0].value;
                let mut gx = Matrix::zeros(x.rows, x.cols);
                s.transpose_mul_into(g, &mut gx);
                pending.push((inputs[0], gx));
            }
        }
        for (id, grad) in pending {
            self.accumulate(id, grad);
        }
    }

    // Typed conveniences over `forward`.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(Op::Subtract, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(Op::Div, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.forward(Op::ScaleByConstant(c), &[a])
    }

    pub fn div_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.forward(Op::DivideByConstant(c), &[a])
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(Op::RowSoftmax, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(Op::Sigmoid, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(Op::Relu, &[a])
    }

    pub fn max_with_zero(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(Op::MaxWithZero, &[a])
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(Op::Ln, &[a])
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(Op::MeanAll, &[a])
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(Op::SumAll, &[a])
    }

    pub fn gather_rows(&mut self, a: NodeId, index: &[usize]) -> Result<NodeId> {
        self.forward(Op::GatherRows(index.into()), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.forward(Op::Reshape(rows, cols), &[a])
    }

    pub fn propagate(&mut self, s: &Arc<SparseMatrix>, a: NodeId) -> Result<NodeId> {
        self.forward(Op::Propagate(Arc::clone(s)), &[a])
    }

    /// Adds a constant to every entry.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let cols = self.value(a).cols();
        let k = self.constant(Matrix::filled(1, cols, c));
        self.add(a, k)
    }
}

/// Largest relative deviation between the analytic parameter gradients and
/// central finite differences of the loss, `|a − fd| / max(1, |fd|)`.
///
/// Leaves the tape with its original leaf values and a fresh backward pass.
pub fn grad_check(tape: &mut Tape, loss: NodeId, h: f64) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(TensorError::InvalidStep(h));
    }
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (id, analytic) in grads.iter() {
        let original = tape.value(id).clone();
        for e in 0..original.data.len() {
            let mut plus = original.clone();
            plus.data[e] += h;
            tape.set_leaf(id, plus)?;
            tape.replay()?;
            let fp = tape.value(loss).item();
            let mut minus = original.clone();
            minus.data[e] -= h;
            tape.set_leaf(id, minus)?;
            tape.replay()?;
            let fm = tape.value(loss).item();
            let fd = (fp - fm) / (2.0 * h);
            let err = (analytic.data[e] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
        tape.set_leaf(id, original)?;
    }
    tape.replay()?;
    tape.backward(loss)?;
    Ok(worst)
}

//! Reverse-mode tape over a closed set of primitives.
//!
//! Every primitive appends one node holding its output value. `backward`
//! sweeps the nodes in reverse order, and `replay` re-runs the recorded
//! forward pass from (optionally replaced) leaf values.

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;
const CE_FLOOR: f64 = 1e-12;
const TARGET_SUM_TOL: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, S),
    Shift(Var, S),
    RowSoftmax(Var, S),
    RowLogSoftmax(Var, S),
    RowLogSumExp(Var, S),
    L2Normalize(Var),
    LayerNorm(Var, Var, Var),
    Gelu(Var),
    Embedding(Var, Vec<usize>),
    MeanRows(Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    RowDot(Var, Var),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    Log(Var, S),
    Exp(Var),
    Sqrt(Var),
    ClampMin(Var, S),
    CrossEntropy(Var, Var),
    Reshape(Var, Vec<usize>),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::AddCol(..) => "add_col",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::RowSoftmax(..) => "row_softmax",
            Op::RowLogSoftmax(..) => "row_log_softmax",
            Op::RowLogSumExp(..) => "row_logsumexp",
            Op::L2Normalize(..) => "l2_normalize",
            Op::LayerNorm(..) => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Embedding(..) => "embedding_lookup",
            Op::MeanRows(..) => "mean_pool",
            Op::SelectRows(..) => "select_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::RowDot(..) => "row_dot",
            Op::RowSum(..) => "row_sum",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Sqrt(..) => "sqrt",
            Op::ClampMin(..) => "clamp_min",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::Reshape(..) => "reshape",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Ordered record of primitive applications together with their values.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn matrix_dims<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        [n] => Ok((1, *n)),
        other => Err(shape_err(op, other, &[])),
    }
}

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(shape_err(op, a.shape(), b.shape()))
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation; returns (value, derivative)
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of(0.044_715);
    let half = S::of(0.5);
    let one = S::one();
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let value = half * x * (one + th);
    let dinner = c * (one + S::of(3.0) * k * x * x);
    let deriv = half * (one + th) + half * x * (one - th * th) * dinner;
    (value, deriv)
}

fn row_softmax_values<S: Scalar>(x: &Tensor<S>, temperature: S) -> Result<Tensor<S>> {
    let (m, n) = x.rows_cols();
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let o = &mut out[i * n..(i + 1) * n];
        let mut total = S::zero();
        for (oj, &xj) in o.iter_mut().zip(row) {
            *oj = ((xj - max) / temperature).exp();
            total = total + *oj;
        }
        for oj in o.iter_mut() {
            *oj = *oj / total;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn row_lse_values<S: Scalar>(x: &Tensor<S>, temperature: S) -> Vec<S> {
    let (m, n) = x.rows_cols();
    (0..m)
        .map(|i| {
            let row = &x.data()[i * n..(i + 1) * n];
            let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b)) / temperature;
            let s: S = row.iter().map(|&v| (v / temperature - max).exp()).sum();
            max + s.ln()
        })
        .collect()
}

fn eval<'a, S: Scalar>(op: &Op<S>, get: &dyn Fn(Var) -> &'a Tensor<S>) -> Result<Tensor<S>> {
    let name = op.name();
    Ok(match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => {
            let (a, b) = (get(*a), get(*b));
            let (m, k) = matrix_dims(name, a)?;
            let (k2, n) = matrix_dims(name, b)?;
            if a.shape().len() != 2 || b.shape().len() != 2 || k != k2 {
                return Err(shape_err(name, a.shape(), b.shape()));
            }
            let mut out = vec![S::zero(); m * n];
            gemm_nn(a.data(), b.data(), &mut out, m, k, n);
            Tensor::from_parts(vec![m, n], out)
        }
        Op::MatMulNt(a, b) => {
            let (a, b) = (get(*a), get(*b));
            let (m, k) = matrix_dims(name, a)?;
            let (n, k2) = matrix_dims(name, b)?;
            if k != k2 {
                return Err(shape_err(name, a.shape(), b.shape()));
            }
            let mut out = vec![S::zero(); m * n];
            gemm_nt(a.data(), b.data(), &mut out, m, k, n);
            Tensor::from_parts(vec![m, n], out)
        }
        Op::Transpose(a) => {
            let a = get(*a);
            let (m, n) = matrix_dims(name, a)?;
            let mut out = vec![S::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a.data()[i * n + j];
                }
            }
            Tensor::from_parts(vec![n, m], out)
        }
        Op::Add(a, b) => {
            let (a, b) = (get(*a), get(*b));
            same_shape(name, a, b)?;
            zip_map(a, b, |x, y| x + y)
        }
        Op::Sub(a, b) => {
            let (a, b) = (get(*a), get(*b));
            same_shape(name, a, b)?;
            zip_map(a, b, |x, y| x - y)
        }
        Op::Mul(a, b) => {
            let (a, b) = (get(*a), get(*b));
            same_shape(name, a, b)?;
            zip_map(a, b, |x, y| x * y)
        }
        Op::AddRow(a, r) => {
            let (a, r) = (get(*a), get(*r));
            let (m, n) = matrix_dims(name, a)?;
            if r.shape() != [n] {
                return Err(shape_err(name, a.shape(), r.shape()));
            }
            let mut out = a.data().to_vec();
            for i in 0..m {
                for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(r.data()) {
                    *o = *o + b;
                }
            }
            Tensor::from_parts(a.shape().to_vec(), out)
        }
        Op::AddCol(a, c) => {
            let (a, c) = (get(*a), get(*c));
            let (m, n) = matrix_dims(name, a)?;
            if c.shape() != [m] {
                return Err(shape_err(name, a.shape(), c.shape()));
            }
            let mut out = a.data().to_vec();
            for i in 0..m {
                let ci = c.data()[i];
                for o in &mut out[i * n..(i + 1) * n] {
                    *o = *o + ci;
                }
            }
            Tensor::from_parts(a.shape().to_vec(), out)
        }
        Op::Scale(a, s) => get(*a).map(|x| x * *s),
        Op::Shift(a, s) => get(*a).map(|x| x + *s),
        Op::RowSoftmax(a, t) => {
            let a = get(*a);
            if !a.is_finite() {
                return Err(Error::NonFinite(name));
            }
            row_softmax_values(a, *t)?
        }
        Op::RowLogSoftmax(a, t) => {
            let a = get(*a);
            if !a.is_finite() {
                return Err(Error::NonFinite(name));
            }
            let (_, n) = a.rows_cols();
            let lse = row_lse_values(a, *t);
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(idx, &x)| x / *t - lse[idx / n])
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Op::RowLogSumExp(a, t) => {
            let a = get(*a);
            if !a.is_finite() {
                return Err(Error::NonFinite(name));
            }
            Tensor::vector(row_lse_values(a, *t))
        }
        Op::L2Normalize(a) => {
            let a = get(*a);
            let (m, n) = a.rows_cols();
            let mut out = a.data().to_vec();
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                let norm = row.iter().map(|&x| x * x).sum::<S>().sqrt();
                if !(norm > S::of(NORM_EPS)) {
                    return Err(Error::Degenerate {
                        op: name,
                        detail: format!("row {i} has norm {norm:e}"),
                    });
                }
                for x in row.iter_mut() {
                    *x = *x / norm;
                }
            }
            Tensor::from_parts(a.shape().to_vec(), out)
        }
        Op::LayerNorm(x, g, b) => {
            let (x, g, b) = (get(*x), get(*g), get(*b));
            let (m, n) = matrix_dims(name, x)?;
            if g.shape() != [n] || b.shape() != [n] {
                return Err(shape_err(name, x.shape(), g.shape()));
            }
            let mut out = vec![S::zero(); m * n];
            let nn = S::of(n as f64);
            for i in 0..m {
                let row = &x.data()[i * n..(i + 1) * n];
                let mean = row.iter().copied().sum::<S>() / nn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nn;
                let inv = S::one() / (var + S::of(LAYER_NORM_EPS)).sqrt();
                for j in 0..n {
                    out[i * n + j] = (row[j] - mean) * inv * g.data()[j] + b.data()[j];
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        Op::Gelu(a) => get(*a).map(|x| gelu_parts(x).0),
        Op::Embedding(table, ids) => {
            let table = get(*table);
            let (rows, d) = matrix_dims(name, table)?;
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= rows {
                    return Err(Error::InvalidArgument(format!(
                        "token id {id} out of range for table with {rows} rows"
                    )));
                }
                out.extend_from_slice(table.row(id));
            }
            Tensor::from_parts(vec![ids.len(), d], out)
        }
        Op::MeanRows(a) => {
            let a = get(*a);
            let (m, n) = matrix_dims(name, a)?;
            let mut out = vec![S::zero(); n];
            for i in 0..m {
                for (o, &v) in out.iter_mut().zip(a.row(i)) {
                    *o = *o + v;
                }
            }
            let mm = S::of(m as f64);
            Tensor::vector(out.into_iter().map(|v| v / mm).collect())
        }
        Op::SelectRows(a, idx) => {
            let a = get(*a);
            let (m, n) = matrix_dims(name, a)?;
            let mut out = Vec::with_capacity(idx.len() * n);
            for &i in idx {
                if i >= m {
                    return Err(Error::InvalidArgument(format!("row {i} out of range {m}")));
                }
                out.extend_from_slice(a.row(i));
            }
            Tensor::from_parts(vec![idx.len(), n], out)
        }
        Op::ConcatRows(parts) => {
            let first = get(parts[0]);
            let (_, n) = matrix_dims(name, first)?;
            let mut rows = 0;
            let mut out = Vec::new();
            for &p in parts {
                let t = get(p);
                let (r, c) = matrix_dims(name, t)?;
                if c != n {
                    return Err(shape_err(name, first.shape(), t.shape()));
                }
                rows += r;
                out.extend_from_slice(t.data());
            }
            Tensor::from_parts(vec![rows, n], out)
        }
        Op::RowDot(a, b) => {
            let (a, b) = (get(*a), get(*b));
            same_shape(name, a, b)?;
            let (m, n) = a.rows_cols();
            let out = (0..m)
                .map(|i| {
                    a.data()[i * n..(i + 1) * n]
                        .iter()
                        .zip(&b.data()[i * n..(i + 1) * n])
                        .map(|(&x, &y)| x * y)
                        .sum()
                })
                .collect();
            Tensor::vector(out)
        }
        Op::RowSum(a) => {
            let a = get(*a);
            let (m, _) = a.rows_cols();
            Tensor::vector((0..m).map(|i| a.row(i).iter().copied().sum()).collect())
        }
        Op::Sum(a) => Tensor::scalar(get(*a).data().iter().copied().sum()),
        Op::Mean(a) => {
            let a = get(*a);
            Tensor::scalar(a.data().iter().copied().sum::<S>() / S::of(a.len() as f64))
        }
        Op::Log(a, floor) => get(*a).map(|x| x.max(*floor).ln()),
        Op::Exp(a) => get(*a).map(|x| x.exp()),
        Op::Sqrt(a) => {
            let a = get(*a);
            if a.data().iter().any(|&x| x < S::zero()) {
                return Err(Error::Degenerate {
                    op: name,
                    detail: "negative input".into(),
                });
            }
            a.map(|x| x.sqrt())
        }
        Op::ClampMin(a, c) => get(*a).map(|x| x.max(*c)),
        Op::CrossEntropy(p, y) => {
            let (p, y) = (get(*p), get(*y));
            same_shape(name, p, y)?;
            let (m, n) = p.rows_cols();
            for i in 0..m {
                let s: S = y.data()[i * n..(i + 1) * n].iter().copied().sum();
                if (s - S::one()).abs() > S::of(TARGET_SUM_TOL) {
                    return Err(Error::InvalidArgument(format!(
                        "cross_entropy target row {i} sums to {s}"
                    )));
                }
            }
            let floor = S::of(CE_FLOOR);
            let total: S = p
                .data()
                .iter()
                .zip(y.data())
                .map(|(&pi, &yi)| yi * pi.max(floor).ln())
                .sum();
            Tensor::scalar(-total / S::of(m as f64))
        }
        Op::Reshape(a, shape) => get(*a).clone().reshape(shape.clone())?,
    })
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded primitives, in application order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn inputs(op: &Op<S>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::AddCol(a, b)
            | Op::RowDot(a, b)
            | Op::CrossEntropy(a, b) => vec![*a, *b],
            Op::LayerNorm(a, b, c) => vec![*a, *b, *c],
            Op::ConcatRows(parts) => parts.clone(),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Shift(a, _)
            | Op::RowSoftmax(a, _)
            | Op::RowLogSoftmax(a, _)
            | Op::RowLogSumExp(a, _)
            | Op::L2Normalize(a)
            | Op::Gelu(a)
            | Op::Embedding(a, _)
            | Op::MeanRows(a)
            | Op::SelectRows(a, _)
            | Op::RowSum(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Log(a, _)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::ClampMin(a, _)
            | Op::Reshape(a, _) => vec![*a],
        }
    }

    fn push(&mut self, op: Op<S>) -> Result<Var> {
        let nodes = &self.nodes;
        let value = eval(&op, &|v: Var| &nodes[v.0].value)?;
        let requires_grad = Self::inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    /// Adds `col[i]` to every entry of row `i`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.push(Op::AddCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn shift(&mut self, a: Var, s: S) -> Result<Var> {
        self.push(Op::Shift(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -S::one())
    }

    /// Softmax of `x / temperature` along each row.
    pub fn row_softmax(&mut self, a: Var, temperature: S) -> Result<Var> {
        check_temperature(temperature)?;
        self.push(Op::RowSoftmax(a, temperature))
    }

    pub fn row_log_softmax(&mut self, a: Var, temperature: S) -> Result<Var> {
        check_temperature(temperature)?;
        self.push(Op::RowLogSoftmax(a, temperature))
    }

    /// `log Σ_j exp(x_ij / temperature)` for each row `i`.
    pub fn row_logsumexp(&mut self, a: Var, temperature: S) -> Result<Var> {
        check_temperature(temperature)?;
        self.push(Op::RowLogSumExp(a, temperature))
    }

    /// Normalizes each row (or the vector) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.push(Op::L2Normalize(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.push(Op::LayerNorm(x, gain, bias))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu(a))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty id list".into()));
        }
        self.push(Op::Embedding(table, ids.to_vec()))
    }

    /// Mean over rows: `[s×d] → [d]`.
    pub fn mean_pool(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanRows(a))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("empty row selection".into()));
        }
        self.push(Op::SelectRows(a, rows.to_vec()))
    }

    /// Stacks vectors (as rows) or matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("nothing to concatenate".into()));
        }
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    /// Row-wise inner products of two same-shape matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::RowDot(a, b))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log(&mut self, a: Var, floor: S) -> Result<Var> {
        self.push(Op::Log(a, floor))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sqrt(a))
    }

    pub fn clamp_min(&mut self, a: Var, floor: S) -> Result<Var> {
        self.push(Op::ClampMin(a, floor))
    }

    /// `-(1/rows) Σ target · ln(max(predicted, 1e-12))`. Target rows must
    /// sum to one.
    pub fn cross_entropy(&mut self, predicted: Var, target: Var) -> Result<Var> {
        self.push(Op::CrossEntropy(predicted, target))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    /// Reverse sweep from a single-element output. Afterwards every node
    /// that requires a gradient holds one (zeros if it did not influence
    /// the output).
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[output.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(self.nodes[output.0].value.shape(), S::one()));
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn propagate(&self, idx: usize, dy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let acc = |v: Var, g: Tensor<S>, grads: &mut [Option<Tensor<S>>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).rows_cols();
                let (_, n) = val(*b).rows_cols();
                if wants(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm_nt(dy.data(), val(*b).data(), &mut da, m, n, k);
                    acc(*a, Tensor::from_parts(vec![m, k], da), grads);
                }
                if wants(*b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm_tn(val(*a).data(), dy.data(), &mut db, m, k, n);
                    acc(*b, Tensor::from_parts(vec![k, n], db), grads);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = val(*a).rows_cols();
                let (n, _) = val(*b).rows_cols();
                if wants(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm_nn(dy.data(), val(*b).data(), &mut da, m, n, k);
                    acc(*a, Tensor::from_parts(val(*a).shape().to_vec(), da), grads);
                }
                if wants(*b) {
                    let mut db = vec![S::zero(); n * k];
                    gemm_tn(dy.data(), val(*a).data(), &mut db, m, n, k);
                    acc(*b, Tensor::from_parts(val(*b).shape().to_vec(), db), grads);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = val(*a).rows_cols();
                let mut da = vec![S::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = dy.data()[j * m + i];
                    }
                }
                acc(*a, Tensor::from_parts(val(*a).shape().to_vec(), da), grads);
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone(), grads);
                acc(*b, dy.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone(), grads);
                acc(*b, dy.map(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, zip_map(dy, val(*b), |g, x| g * x), grads);
                }
                if wants(*b) {
                    acc(*b, zip_map(dy, val(*a), |g, x| g * x), grads);
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, dy.clone(), grads);
                if wants(*r) {
                    let (m, n) = dy.rows_cols();
                    let mut dr = vec![S::zero(); n];
                    for i in 0..m {
                        for (o, &g) in dr.iter_mut().zip(dy.row(i)) {
                            *o = *o + g;
                        }
                    }
                    acc(*r, Tensor::vector(dr), grads);
                }
            }
            Op::AddCol(a, c) => {
                acc(*a, dy.clone(), grads);
                if wants(*c) {
                    let (m, _) = dy.rows_cols();
                    let dc = (0..m).map(|i| dy.row(i).iter().copied().sum()).collect();
                    acc(*c, Tensor::vector(dc), grads);
                }
            }
            Op::Scale(a, s) => acc(*a, dy.map(|g| g * *s), grads),
            Op::Shift(a, _) => acc(*a, dy.clone(), grads),
            Op::RowSoftmax(a, t) => {
                let (m, n) = y.rows_cols();
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = dy.row(i);
                    let dot: S = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot) / *t;
                    }
                }
                acc(*a, Tensor::from_parts(y.shape().to_vec(), dx), grads);
            }
            Op::RowLogSoftmax(a, t) => {
                let (m, n) = y.rows_cols();
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = dy.row(i);
                    let total: S = gr.iter().copied().sum();
                    for j in 0..n {
                        dx[i * n + j] = (gr[j] - yr[j].exp() * total) / *t;
                    }
                }
                acc(*a, Tensor::from_parts(y.shape().to_vec(), dx), grads);
            }
            Op::RowLogSumExp(a, t) => {
                let x = val(*a);
                let p = row_softmax_values(x, *t)?;
                let (m, n) = x.rows_cols();
                let mut dx = p.into_data();
                for i in 0..m {
                    let g = dy.data()[i] / *t;
                    for v in &mut dx[i * n..(i + 1) * n] {
                        *v = *v * g;
                    }
                }
                acc(*a, Tensor::from_parts(x.shape().to_vec(), dx), grads);
            }
            Op::L2Normalize(a) => {
                let x = val(*a);
                let (m, n) = x.rows_cols();
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    let norm = x.row(i).iter().map(|&v| v * v).sum::<S>().sqrt();
                    let yr = y.row(i);
                    let gr = dy.row(i);
                    let dot: S = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                    for j in 0..n {
                        dx[i * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                acc(*a, Tensor::from_parts(x.shape().to_vec(), dx), grads);
            }
            Op::LayerNorm(xv, gv, bv) => {
                let x = val(*xv);
                let g = val(*gv);
                let (m, n) = x.rows_cols();
                let nn = S::of(n as f64);
                let mut dx = vec![S::zero(); m * n];
                let mut dg = vec![S::zero(); n];
                let mut db = vec![S::zero(); n];
                for i in 0..m {
                    let row = x.row(i);
                    let mean = row.iter().copied().sum::<S>() / nn;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nn;
                    let inv = S::one() / (var + S::of(LAYER_NORM_EPS)).sqrt();
                    let gr = dy.row(i);
                    let xhat: Vec<S> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let dxhat: Vec<S> = gr.iter().zip(g.data()).map(|(&a, &b)| a * b).collect();
                    let mean_dxhat = dxhat.iter().copied().sum::<S>() / nn;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<S>() / nn;
                    for j in 0..n {
                        dx[i * n + j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dg[j] = dg[j] + gr[j] * xhat[j];
                        db[j] = db[j] + gr[j];
                    }
                }
                acc(*xv, Tensor::from_parts(x.shape().to_vec(), dx), grads);
                acc(*gv, Tensor::vector(dg), grads);
                acc(*bv, Tensor::vector(db), grads);
            }
            Op::Gelu(a) => {
                let x = val(*a);
                acc(*a, zip_map(dy, x, |g, v| g * gelu_parts(v).1), grads);
            }
            Op::Embedding(table, ids) => {
                if wants(*table) {
                    let t = val(*table);
                    let (_, d) = t.rows_cols();
                    let mut dt = vec![S::zero(); t.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &g) in dt[id * d..(id + 1) * d].iter_mut().zip(dy.row(r)) {
                            *o = *o + g;
                        }
                    }
                    acc(*table, Tensor::from_parts(t.shape().to_vec(), dt), grads);
                }
            }
            Op::MeanRows(a) => {
                let x = val(*a);
                let (m, n) = x.rows_cols();
                let mm = S::of(m as f64);
                let mut dx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    dx.extend(dy.data().iter().map(|&g| g / mm));
                }
                acc(*a, Tensor::from_parts(x.shape().to_vec(), dx), grads);
            }
            Op::SelectRows(a, rows) => {
                let x = val(*a);
                let (_, n) = x.rows_cols();
                let mut dx = vec![S::zero(); x.len()];
                for (r, &src) in rows.iter().enumerate() {
                    for (o, &g) in dx[src * n..(src + 1) * n].iter_mut().zip(dy.row(r)) {
                        *o = *o + g;
                    }
                }
                acc(*a, Tensor::from_parts(x.shape().to_vec(), dx), grads);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    let g = dy.data()[offset..offset + len].to_vec();
                    offset += len;
                    acc(p, Tensor::from_parts(val(p).shape().to_vec(), g), grads);
                }
            }
            Op::RowDot(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let (m, n) = xa.rows_cols();
                let scale_rows = |src: &Tensor<S>| {
                    let mut out = src.data().to_vec();
                    for i in 0..m {
                        let g = dy.data()[i];
                        for v in &mut out[i * n..(i + 1) * n] {
                            *v = *v * g;
                        }
                    }
                    Tensor::from_parts(src.shape().to_vec(), out)
                };
                if wants(*a) {
                    acc(*a, scale_rows(xb), grads);
                }
                if wants(*b) {
                    acc(*b, scale_rows(xa), grads);
                }
            }
            Op::RowSum(a) => {
                let x = val(*a);
                let (m, n) = x.rows_cols();
                let mut dx = Vec::with_capacity(m * n);
                for i in 0..m {
                    dx.extend(std::iter::repeat(dy.data()[i]).take(n));
                }
                acc(*a, Tensor::from_parts(x.shape().to_vec(), dx), grads);
            }
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), dy.item()), grads),
            Op::Mean(a) => {
                let x = val(*a);
                let g = dy.item() / S::of(x.len() as f64);
                acc(*a, Tensor::full(x.shape(), g), grads);
            }
            Op::Log(a, floor) => {
                let x = val(*a);
                acc(
                    *a,
                    zip_map(dy, x, |g, v| if v > *floor { g / v } else { S::zero() }),
                    grads,
                );
            }
            Op::Exp(a) => acc(*a, zip_map(dy, y, |g, v| g * v), grads),
            Op::Sqrt(a) => acc(*a, zip_map(dy, y, |g, v| g / (S::of(2.0) * v)), grads),
            Op::ClampMin(a, c) => {
                let x = val(*a);
                acc(*a, zip_map(dy, x, |g, v| if v > *c { g } else { S::zero() }), grads);
            }
            Op::CrossEntropy(p, t) => {
                let (xp, xt) = (val(*p), val(*t));
                let (m, _) = xp.rows_cols();
                let scale = dy.item() / S::of(m as f64);
                let floor = S::of(CE_FLOOR);
                if wants(*p) {
                    acc(
                        *p,
                        zip_map(xp, xt, |pi, ti| {
                            if pi > floor {
                                -scale * ti / pi
                            } else {
                                S::zero()
                            }
                        }),
                        grads,
                    );
                }
                if wants(*t) {
                    acc(*t, xp.map(|pi| -scale * pi.max(floor).ln()), grads);
                }
            }
            Op::Reshape(a, _) => {
                let g = dy.clone().reshape(val(*a).shape().to_vec())?;
                acc(*a, g, grads);
            }
        }
        Ok(())
    }

    /// Re-run the recorded forward pass. Leaves take their recorded values
    /// unless replaced in `overrides`. Returns every node value.
    pub fn replay(&self, overrides: &[(Var, Tensor<S>)]) -> Result<Vec<Tensor<S>>> {
        let mut values: Vec<Tensor<S>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = match node.op {
                Op::Leaf => match overrides.iter().find(|(v, _)| v.0 == idx) {
                    Some((_, t)) => {
                        same_shape("replay", &node.value, t)?;
                        t.clone()
                    }
                    None => node.value.clone(),
                },
                _ => eval(&node.op, &|v: Var| &values[v.0])?,
            };
            values.push(value);
        }
        Ok(values)
    }
}

fn check_temperature<S: Scalar>(t: S) -> Result<()> {
    if t > S::zero() && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")))
    }
}

//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse and applies
//! each operation's vector-Jacobian product. Handles are plain indices
//! ([`Var`]), so a tape is owned by one thread; independent forward passes
//! use independent tapes.
//!
//! Kernels may split work across the rayon pool, but every output element is
//! computed by one fixed serial loop, so results do not depend on the number
//! of threads.

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::error::{shape_err, GqnError, Result};

use super::reduce::{canonical_sum, SumOrder};
use super::{ParamStore, Scalar, Tensor};

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose(Var),
    AddBias { a: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    SoftmaxRows(Var),
    RowDot(Var, Var),
    RowScale { a: Var, s: Var },
    Gather { a: Var, idx: Vec<usize> },
    GatherRows { a: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    SumGroups { a: Var, group: usize },
    GroupMax { a: Var, argmax: Vec<usize> },
    ScatterMean { a: Var, target: Vec<usize>, counts: Vec<usize> },
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Parameter name to leaf handle, for one tape.
#[derive(Debug, Clone, Default)]
pub struct Binding {
    vars: IndexMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| GqnError::InvalidInput(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`, or `None` when `var` does
    /// not reach the loss.
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn check_same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn require_rank2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(shape_err!("{what}: expected a matrix, got shape {:?}", t.shape()));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn matmul_kernel<T: Scalar>(
    a: &[T],
    b: &[T],
    (n, k, m): (usize, usize, usize),
    order: SumOrder,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    let body = |(i, row): (usize, &mut [T])| {
        let mut terms = Vec::with_capacity(k);
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = match order {
                SumOrder::Indexed => {
                    let mut acc = T::zero();
                    for t in 0..k {
                        acc += a[i * k + t] * b[t * m + j];
                    }
                    acc
                }
                SumOrder::Canonical => {
                    terms.clear();
                    terms.extend((0..k).map(|t| a[i * k + t] * b[t * m + j]));
                    canonical_sum(&mut terms)
                }
            };
        }
    };
    if n * k * m >= PAR_THRESHOLD {
        out.par_chunks_mut(m).enumerate().for_each(body);
    } else {
        out.chunks_mut(m).enumerate().for_each(body);
    }
    out
}

/// `g · bᵀ` for `g: [n, m]`, `b: [k, m]`.
fn matmul_bt_kernel<T: Scalar>(g: &[T], b: &[T], (n, k, m): (usize, usize, usize)) -> Vec<T> {
    let mut out = vec![T::zero(); n * k];
    let body = |(i, row): (usize, &mut [T])| {
        for (t, slot) in row.iter_mut().enumerate() {
            let mut acc = T::zero();
            for j in 0..m {
                acc += g[i * m + j] * b[t * m + j];
            }
            *slot = acc;
        }
    };
    if n * k * m >= PAR_THRESHOLD {
        out.par_chunks_mut(k).enumerate().for_each(body);
    } else {
        out.chunks_mut(k).enumerate().for_each(body);
    }
    out
}

/// `aᵀ · g` for `a: [n, k]`, `g: [n, m]`.
fn matmul_at_kernel<T: Scalar>(a: &[T], g: &[T], (n, k, m): (usize, usize, usize)) -> Vec<T> {
    let mut out = vec![T::zero(); k * m];
    let body = |(t, row): (usize, &mut [T])| {
        for (j, slot) in row.iter_mut().enumerate() {
            let mut acc = T::zero();
            for i in 0..n {
                acc += a[i * k + t] * g[i * m + j];
            }
            *slot = acc;
        }
    };
    if n * k * m >= PAR_THRESHOLD {
        out.par_chunks_mut(m).enumerate().for_each(body);
    } else {
        out.chunks_mut(m).enumerate().for_each(body);
    }
    out
}

/// Row-wise softmax over the last axis with max subtraction; denominators are
/// canonical sums.
pub(crate) fn softmax_rows_kernel<T: Scalar>(values: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(values.len());
    let mut terms = Vec::with_capacity(cols);
    for row in values.chunks(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        terms.clear();
        terms.extend(row.iter().map(|&v| (v - max).exp()));
        let exps = terms.clone();
        let denom = canonical_sum(&mut terms);
        out.extend(exps.into_iter().map(|e| e / denom));
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn vals(&self, var: Var) -> &[T] {
        self.nodes[var.0].value.values()
    }

    /// Records a leaf (input, constant or parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let mut value = value;
        value.clear_grad();
        self.push(value, Op::Leaf)
    }

    /// Records every parameter of `store` as a leaf.
    pub fn bind(&mut self, store: &ParamStore<T>) -> Binding {
        let vars = store
            .iter()
            .map(|(name, t)| (name.to_string(), self.leaf(t.clone())))
            .collect();
        Binding { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ordered(a, b, SumOrder::Indexed)
    }

    /// Matrix product whose inner axis indexes an unordered set.
    pub fn matmul_set(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ordered(a, b, SumOrder::Canonical)
    }

    fn matmul_ordered(&mut self, a: Var, b: Var, order: SumOrder) -> Result<Var> {
        let (n, k) = require_rank2(self.value(a), "matmul lhs")?;
        let (k2, m) = require_rank2(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(shape_err!("matmul: inner dimensions {k} and {k2} differ"));
        }
        let out = matmul_kernel(self.vals(a), self.vals(b), (n, k, m), order);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = require_rank2(self.value(a), "transpose")?;
        let v = self.vals(a);
        let mut out = Vec::with_capacity(n * m);
        for j in 0..m {
            for i in 0..n {
                out.push(v[i * m + j]);
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Transpose(a)))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(bias).numel() != cols {
            return Err(shape_err!(
                "bias of {} values for {cols} columns",
                self.value(bias).numel()
            ));
        }
        let b = self.vals(bias);
        let out: Vec<T> = self
            .vals(a)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias { a, bias }))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        check_same_shape(self.value(a), self.value(b), what)?;
        let out = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.value(a).shape().to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        Ok(self.push(t, Op::Scale(a, c)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        Ok(self.push(t, Op::Relu(a)))
    }

    /// Softmax along the last axis of every row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.all_finite() {
            return Err(GqnError::InvalidInput("softmax of non-finite scores".into()));
        }
        let out = softmax_rows_kernel(t.values(), t.cols());
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxRows(a)))
    }

    /// Dot product of matching rows: `[n, m] × [n, m] → [n]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self.value(a), self.value(b), "row_dot")?;
        let cols = self.value(a).cols();
        let out: Vec<T> = self
            .vals(a)
            .chunks(cols)
            .zip(self.vals(b).chunks(cols))
            .map(|(x, y)| {
                let mut acc = T::zero();
                for (&p, &q) in x.iter().zip(y) {
                    acc += p * q;
                }
                acc
            })
            .collect();
        Ok(self.push(Tensor::vector(out)?, Op::RowDot(a, b)))
    }

    /// Multiplies row `i` of `a` by `s[i]`.
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let rows = self.value(a).rows();
        if self.value(s).numel() != rows {
            return Err(shape_err!(
                "row_scale: {} factors for {rows} rows",
                self.value(s).numel()
            ));
        }
        let cols = self.value(a).cols();
        let f = self.vals(s);
        let out: Vec<T> = self
            .vals(a)
            .chunks(cols)
            .zip(f)
            .flat_map(|(row, &c)| row.iter().map(move |&x| x * c))
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::RowScale { a, s }))
    }

    /// Flat gather: `out[t] = a.values[idx[t]]`, shape `[idx.len()]`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let v = self.vals(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.len()) {
            return Err(shape_err!("gather index {bad} out of {} values", v.len()));
        }
        let out = idx.iter().map(|&i| v[i]).collect();
        Ok(self.push(Tensor::vector(out)?, Op::Gather { a, idx }))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err!("gather_rows index {bad} out of {rows} rows"));
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            out.extend_from_slice(t.row(i));
        }
        let n = idx.len();
        Ok(self.push(Tensor::matrix(n, cols, out)?, Op::GatherRows { a, idx }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat_cols of nothing"))?;
        let rows = self.value(*first).rows();
        if let Some(p) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(shape_err!(
                "concat_cols: {} rows vs {rows}",
                self.value(*p).rows()
            ));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        Ok(self.push(Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat_rows of nothing"))?;
        let cols = self.value(*first).cols();
        if let Some(p) = parts.iter().find(|p| self.value(**p).cols() != cols) {
            return Err(shape_err!(
                "concat_rows: {} columns vs {cols}",
                self.value(*p).cols()
            ));
        }
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.vals(*p));
        }
        let rows = out.len() / cols;
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols() || len == 0 {
            return Err(shape_err!(
                "slice_cols {start}..{} of {} columns",
                start + len,
                t.cols()
            ));
        }
        let rows = t.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        Ok(self.push(Tensor::matrix(rows, len, out)?, Op::SliceCols { a, start }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.rows() || len == 0 {
            return Err(shape_err!(
                "slice_rows {start}..{} of {} rows",
                start + len,
                t.rows()
            ));
        }
        let cols = t.cols();
        let out = t.values()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(Tensor::matrix(len, cols, out)?, Op::SliceRows { a, start }))
    }

    /// Sums consecutive blocks of `group` rows: `[n·g, m] → [n, m]`. Rows in a
    /// block are treated as an unordered set.
    pub fn sum_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if group == 0 || rows % group != 0 {
            return Err(shape_err!("sum_groups: {rows} rows not divisible into groups of {group}"));
        }
        let n = rows / group;
        let mut out = Vec::with_capacity(n * cols);
        let mut terms = Vec::with_capacity(group);
        for g in 0..n {
            for c in 0..cols {
                terms.clear();
                terms.extend((0..group).map(|r| t.values()[(g * group + r) * cols + c]));
                out.push(canonical_sum(&mut terms));
            }
        }
        Ok(self.push(Tensor::matrix(n, cols, out)?, Op::SumGroups { a, group }))
    }

    /// Elementwise maximum over consecutive blocks of `group` rows. On ties the
    /// gradient goes to the earliest row.
    pub fn group_max(&mut self, a: Var, group: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if group == 0 || rows % group != 0 {
            return Err(shape_err!("group_max: {rows} rows not divisible into groups of {group}"));
        }
        let n = rows / group;
        let mut out = Vec::with_capacity(n * cols);
        let mut argmax = Vec::with_capacity(n * cols);
        for g in 0..n {
            for c in 0..cols {
                let mut best = g * group;
                for r in g * group + 1..(g + 1) * group {
                    if t.values()[r * cols + c] > t.values()[best * cols + c] {
                        best = r;
                    }
                }
                argmax.push(best * cols + c);
                out.push(t.values()[best * cols + c]);
            }
        }
        Ok(self.push(Tensor::matrix(n, cols, out)?, Op::GroupMax { a, argmax }))
    }

    /// Writes row `i` of `a` into output row `target[i]`; each output row is
    /// the mean of its contributors, or zero when it has none.
    pub fn scatter_mean(&mut self, a: Var, target: Vec<usize>, out_rows: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if target.len() != rows {
            return Err(shape_err!("scatter_mean: {} targets for {rows} rows", target.len()));
        }
        if let Some(&bad) = target.iter().find(|&&r| r >= out_rows) {
            return Err(shape_err!("scatter_mean target {bad} out of {out_rows} rows"));
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); out_rows];
        for (i, &r) in target.iter().enumerate() {
            members[r].push(i);
        }
        let mut out = vec![T::zero(); out_rows * cols];
        let mut terms = Vec::new();
        for (r, m) in members.iter().enumerate() {
            if m.is_empty() {
                continue;
            }
            let count = T::lit(m.len() as f64);
            for c in 0..cols {
                terms.clear();
                terms.extend(m.iter().map(|&i| t.values()[i * cols + c]));
                out[r * cols + c] = canonical_sum(&mut terms) / count;
            }
        }
        let counts = members.iter().map(Vec::len).collect();
        Ok(self.push(
            Tensor::matrix(out_rows, cols, out)?,
            Op::ScatterMean { a, target, counts },
        ))
    }

    /// Sum of all values, index-ascending, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &v in self.vals(a) {
            acc += v;
        }
        Ok(self.push(Tensor::scalar(acc), Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = T::lit(self.value(a).numel() as f64);
        let s = self.sum(a)?;
        self.scale(s, T::one() / n)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(GqnError::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        }
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (n, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let m = self.value(*b).shape()[1];
                acc(grads, *a, matmul_bt_kernel(g, self.vals(*b), (n, k, m)));
                acc(grads, *b, matmul_at_kernel(self.vals(*a), g, (n, k, m)));
            }
            Op::Transpose(a) => {
                let (n, m) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let mut d = vec![T::zero(); n * m];
                for i in 0..n {
                    for j in 0..m {
                        d[i * m + j] = g[j * n + i];
                    }
                }
                acc(grads, *a, d);
            }
            Op::AddBias { a, bias } => {
                let cols = out.cols();
                let mut db = vec![T::zero(); cols];
                for row in g.chunks(cols) {
                    db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                }
                acc(grads, *a, g.to_vec());
                acc(grads, *bias, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.vals(*a), self.vals(*b));
                acc(grads, *a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                acc(grads, *b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
            }
            Op::Scale(a, c) => acc(grads, *a, g.iter().map(|&x| x * *c).collect()),
            Op::Relu(a) => {
                let va = self.vals(*a);
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(va)
                        .map(|(&x, &v)| if v > T::zero() { x } else { T::zero() })
                        .collect(),
                );
            }
            Op::SoftmaxRows(a) => {
                let cols = out.cols();
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(out.values().chunks(cols)) {
                    let mut dot = T::zero();
                    for (&x, &y) in gr.iter().zip(yr) {
                        dot += x * y;
                    }
                    d.extend(gr.iter().zip(yr).map(|(&x, &y)| y * (x - dot)));
                }
                acc(grads, *a, d);
            }
            Op::RowDot(a, b) => {
                let cols = self.value(*a).cols();
                let (va, vb) = (self.vals(*a), self.vals(*b));
                let da = vb.chunks(cols).zip(g).flat_map(|(r, &x)| r.iter().map(move |&y| x * y)).collect();
                let db = va.chunks(cols).zip(g).flat_map(|(r, &x)| r.iter().map(move |&y| x * y)).collect();
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::RowScale { a, s } => {
                let cols = self.value(*a).cols();
                let (va, vs) = (self.vals(*a), self.vals(*s));
                let da = g
                    .chunks(cols)
                    .zip(vs)
                    .flat_map(|(r, &c)| r.iter().map(move |&x| x * c))
                    .collect();
                let ds = g
                    .chunks(cols)
                    .zip(va.chunks(cols))
                    .map(|(gr, ar)| {
                        let mut t = T::zero();
                        for (&x, &y) in gr.iter().zip(ar) {
                            t += x * y;
                        }
                        t
                    })
                    .collect();
                acc(grads, *a, da);
                acc(grads, *s, ds);
            }
            Op::Gather { a, idx } => {
                let mut d = vec![T::zero(); self.value(*a).numel()];
                for (&i, &x) in idx.iter().zip(g) {
                    d[i] += x;
                }
                acc(grads, *a, d);
            }
            Op::GatherRows { a, idx } => {
                let cols = out.cols();
                let mut d = vec![T::zero(); self.value(*a).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        d[i * cols + c] += g[r * cols + c];
                    }
                }
                acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let d = g
                        .chunks(total)
                        .flat_map(|row| row[offset..offset + w].iter().copied())
                        .collect();
                    acc(grads, *p, d);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    acc(grads, *p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceCols { a, start } => {
                let (cols, w) = (self.value(*a).cols(), out.cols());
                let mut d = vec![T::zero(); self.value(*a).numel()];
                for (r, row) in g.chunks(w).enumerate() {
                    d[r * cols + start..r * cols + start + w].copy_from_slice(row);
                }
                acc(grads, *a, d);
            }
            Op::SliceRows { a, start } => {
                let cols = out.cols();
                let mut d = vec![T::zero(); self.value(*a).numel()];
                d[start * cols..start * cols + g.len()].copy_from_slice(g);
                acc(grads, *a, d);
            }
            Op::SumGroups { a, group } => {
                let cols = out.cols();
                let d = g
                    .chunks(cols)
                    .flat_map(|row| std::iter::repeat_n(row, *group).flatten().copied())
                    .collect();
                acc(grads, *a, d);
            }
            Op::GroupMax { a, argmax } => {
                let mut d = vec![T::zero(); self.value(*a).numel()];
                for (&i, &x) in argmax.iter().zip(g) {
                    d[i] += x;
                }
                acc(grads, *a, d);
            }
            Op::ScatterMean { a, target, counts } => {
                let cols = out.cols();
                let mut d = Vec::with_capacity(self.value(*a).numel());
                for &r in target {
                    let n = T::lit(counts[r] as f64);
                    d.extend(g[r * cols..(r + 1) * cols].iter().map(|&x| x / n));
                }
                acc(grads, *a, d);
            }
            Op::Sum(a) => acc(grads, *a, vec![g[0]; self.value(*a).numel()]),
            Op::Reshape(a) => acc(grads, *a, g.to_vec()),
        }
    }
}

//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its variables. Model
//! parameters enter the tape as [`Graph::param`] leaves that read their
//! values straight from a [`ParamStore`]; [`Graph::backward`] returns the
//! gradient of a scalar variable with respect to every trainable
//! parameter that reaches it.
//!
//! One graph is single-threaded; independent graphs may be built and
//! differentiated concurrently.

mod check;
pub mod kernels;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

pub use check::{finite_diff_check, FiniteDiff};

use crate::error::{Error, Result};
use crate::params::{Group, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    idx: usize,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Exp,
    Log,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
    Abs,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddBias(usize, usize),
    MulRow(usize, usize),
    Broadcast(usize),
    Scale(usize, T),
    AddConst(usize),
    Unary(Unary, usize),
    ClampMin(usize, T),
    Softmax(usize),
    LogSoftmax(usize),
    SumAll(usize),
    MeanAll(usize),
    SumRows(usize),
    MeanRows(usize),
    AvgPool2 { x: usize, h: usize, w: usize },
    Resize { x: usize, h: usize, w: usize, nh: usize, nw: usize },
    Gather { x: usize, rows: Vec<usize> },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    NarrowCols { x: usize, start: usize },
    Reshape(usize),
    LayerNorm { x: usize, rstd: Vec<T> },
    Median { x: usize, taps: Vec<(usize, T)> },
}

struct Node<T> {
    op: Op<T>,
    dims: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
}

/// Gradients keyed by parameter; only parameters reachable from the
/// differentiated variable have an entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap<T> {
    entries: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> GradientMap<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries.get(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    /// `self += scale * other`
    pub fn accumulate(&mut self, other: &GradientMap<T>, scale: T) {
        for (id, g) in &other.entries {
            match self.entries.get_mut(id) {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * b;
                    }
                }
                None => {
                    self.entries.insert(*id, g.map(|x| scale * x));
                }
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.is_finite())
    }
}

/// Recording tape for one forward computation.
pub struct Graph<'p, T> {
    id: u64,
    store: &'p ParamStore<T>,
    trainable: Vec<bool>,
    param_vars: Vec<Option<usize>>,
    nodes: Vec<Node<T>>,
}

fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

fn rows_cols(dims: &[usize]) -> Result<(usize, usize)> {
    match dims {
        [n] => Ok((1, *n)),
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::shape(format!("expected a matrix, got dims {dims:?}"))),
    }
}

impl<'p, T: Real> Graph<'p, T> {
    /// Graph in which every parameter of `store` is trainable.
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self::with_trainable(store, |_| true)
    }

    /// Graph whose trainable parameters are those in groups accepted by
    /// `trainable`; the rest behave as constants.
    pub fn with_trainable(store: &'p ParamStore<T>, trainable: impl Fn(Group) -> bool) -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            store,
            trainable: store.iter().map(|(_, p)| trainable(p.group)).collect(),
            param_vars: vec![None; store.len()],
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.graph != self.id {
            return Err(Error::MissingGraph);
        }
        Ok(&self.nodes[v.idx])
    }

    fn values_of(&self, idx: usize) -> &[T] {
        match &self.nodes[idx].op {
            Op::Param(pid) => self.store.tensor(*pid).data(),
            _ => &self.nodes[idx].value,
        }
    }

    pub fn value(&self, v: Var) -> Result<&[T]> {
        self.node(v)?;
        Ok(self.values_of(v.idx))
    }

    pub fn dims(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.node(v)?.dims)
    }

    pub fn tensor(&self, v: Var) -> Result<Tensor<T>> {
        let dims = self.dims(v)?.to_vec();
        Tensor::new(dims, self.value(v)?.to_vec())
    }

    /// Value of a one-element variable.
    pub fn scalar(&self, v: Var) -> Result<T> {
        let x = self.value(v)?;
        if x.len() != 1 {
            return Err(Error::contract(format!("expected a scalar, got {} values", x.len())));
        }
        Ok(x[0])
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.requires_grad)
    }

    fn push(&mut self, op: Op<T>, dims: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || numel(&dims) == value.len());
        self.nodes.push(Node {
            op,
            dims,
            value,
            requires_grad,
        });
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let dims = t.dims().to_vec();
        self.push(Op::Leaf, dims, t.into_data(), false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same variable.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(idx) = self.param_vars[id.0] {
            return Var {
                graph: self.id,
                idx,
            };
        }
        let dims = self.store.tensor(id).dims().to_vec();
        let rg = self.trainable[id.0];
        let v = self.push(Op::Param(id), dims, Vec::new(), rg);
        self.param_vars[id.0] = Some(v.idx);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.dims(a)?)?;
        let (k2, n) = rows_cols(self.dims(b)?)?;
        if k != k2 {
            return Err(Error::shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let out = kernels::matmul(self.values_of(a.idx), self.values_of(b.idx), m, k, n);
        let rg = self.rg(&[a.idx, b.idx]);
        Ok(self.push(Op::MatMul(a.idx, b.idx), vec![m, n], out, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.dims(a)?)?;
        let out = kernels::transpose(self.values_of(a.idx), m, n);
        let rg = self.rg(&[a.idx]);
        Ok(self.push(Op::Transpose(a.idx), vec![n, m], out, rg))
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let (da, db) = (self.dims(a)?, self.dims(b)?);
        if da != db {
            return Err(Error::shape(format!("{what}: dims {da:?} vs {db:?}")));
        }
        Ok(da.to_vec())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let dims = self.same_dims(a, b, what)?;
        let out = self
            .values_of(a.idx)
            .iter()
            .zip(self.values_of(b.idx))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a.idx, b.idx]);
        Ok(self.push(op, dims, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.idx, b.idx))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.idx, b.idx))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.idx, b.idx))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a.idx, b.idx))
    }

    fn row_op(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let dims = self.dims(a)?.to_vec();
        let (_, n) = rows_cols(&dims)?;
        if numel(self.dims(b)?) != n {
            return Err(Error::shape(format!(
                "row operand of {} values for matrix {dims:?}",
                numel(self.dims(b)?)
            )));
        }
        let bv = self.values_of(b.idx);
        let out = self
            .values_of(a.idx)
            .chunks(n)
            .flat_map(|row| {
                row.iter()
                    .zip(bv)
                    .map(move |(&x, &y)| if mul { x * y } else { x + y })
            })
            .collect();
        let rg = self.rg(&[a.idx, b.idx]);
        let op = if mul {
            Op::MulRow(a.idx, b.idx)
        } else {
            Op::AddBias(a.idx, b.idx)
        };
        Ok(self.push(op, dims, out, rg))
    }

    /// `a[m,n] + b[n]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_op(a, b, false)
    }

    /// `a[m,n] * g[n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, g: Var) -> Result<Var> {
        self.row_op(a, g, true)
    }

    /// Expands a one-element variable to `dims`.
    pub fn broadcast(&mut self, s: Var, dims: &[usize]) -> Result<Var> {
        let x = self.scalar(s)?;
        let rg = self.rg(&[s.idx]);
        Ok(self.push(Op::Broadcast(s.idx), dims.to_vec(), vec![x; numel(dims)], rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let dims = self.dims(a)?.to_vec();
        let out = self.values_of(a.idx).iter().map(|&x| c * x).collect();
        let rg = self.rg(&[a.idx]);
        Ok(self.push(Op::Scale(a.idx, c), dims, out, rg))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let dims = self.dims(a)?.to_vec();
        let out = self.values_of(a.idx).iter().map(|&x| x + c).collect();
        let rg = self.rg(&[a.idx]);
        Ok(self.push(Op::AddConst(a.idx), dims, out, rg))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let dims = self.dims(a)?.to_vec();
        let f = |x: T| -> T {
            match kind {
                Unary::Exp => x.exp(),
                Unary::Log => x.ln(),
                Unary::Tanh => x.tanh(),
                Unary::Relu => x.max(T::zero()),
                Unary::Sigmoid => sigmoid(x),
                Unary::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
                Unary::Abs => x.abs(),
            }
        };
        let out = self.values_of(a.idx).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a.idx]);
        Ok(self.push(Op::Unary(kind, a.idx), dims, out, rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    /// `log(1 + e^x)` in overflow-free form.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Abs)
    }

    /// `max(a, c)` elementwise; the gradient is blocked where `a <= c`.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let dims = self.dims(a)?.to_vec();
        let out = self.values_of(a.idx).iter().map(|&x| x.max(c)).collect();
        let rg = self.rg(&[a.idx]);
        Ok(self.push(Op::ClampMin(a.idx, c), dims, out, rg))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let dims = self.dims(a)?.to_vec();
        let (_, n) = rows_cols(&dims)?;
        let mut out = self.values_of(a.idx).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a.idx]);
        Ok(self.push(Op::Softmax(a.idx), dims, out, rg))
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let dims = self.dims(a)?.to_vec();
        let (_, n) = rows_cols(&dims)?;
        let mut out = self.values_of(a.idx).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let rg = self.rg(&[a.idx]);
        Ok(self.push(Op::LogSoftmax(a.idx), dims, out, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.node(a)?;
        let s = self.values_of(a.idx).iter().copied().sum::<T>();
        let rg = self.rg(&[a.idx]);
        Ok(self.push(Op::SumAll(a.idx), vec![1], vec![s], rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.node(a)?;
        let x = self.values_of(a.idx);
        let s = x.iter().copied().sum::<T>() / T::of(x.len() as f64);
        let rg = self.rg(&[a.idx]);
        Ok(self.push(Op::MeanAll(a.idx), vec![1], vec![s], rg))
    }

    fn reduce_rows(&mut self, a: Var, mean: bool) -> Result<Var> {
        let (m, n) = rows_cols(self.dims(a)?)?;
        let mut out = vec![T::zero(); n];
        for row in self.values_of(a.idx).chunks(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        if mean {
            let inv = T::one() / T::of(m as f64);
            out.iter_mut().for_each(|x| *x *= inv);
        }
        let rg = self.rg(&[a.idx]);
        let op = if mean { Op::MeanRows(a.idx) } else { Op::SumRows(a.idx) };
        Ok(self.push(op, vec![1, n], out, rg))
    }

    /// Sum over the row axis: `[m,n] -> [1,n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.reduce_rows(a, false)
    }

    /// Mean over the row axis: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.reduce_rows(a, true)
    }

    fn check_grid(&self, a: Var, h: usize, w: usize) -> Result<usize> {
        let (m, c) = rows_cols(self.dims(a)?)?;
        if m != h * w {
            return Err(Error::shape(format!("{m} rows do not form a {h}x{w} grid")));
        }
        Ok(c)
    }

    /// 2x2 average pooling of an `h*w x c` token grid.
    pub fn avg_pool2(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let c = self.check_grid(a, h, w)?;
        if h < 2 || w < 2 {
            return Err(Error::shape(format!("cannot pool a {h}x{w} grid")));
        }
        let out = kernels::avg_pool2(self.values_of(a.idx), h, w, c);
        let rg = self.rg(&[a.idx]);
        Ok(self.push(Op::AvgPool2 { x: a.idx, h, w }, vec![(h / 2) * (w / 2), c], out, rg))
    }

    /// Half-pixel bilinear resize of an `h*w x c` token grid to `nh*nw x c`.
    pub fn resize_bilinear(&mut self, a: Var, h: usize, w: usize, nh: usize, nw: usize) -> Result<Var> {
        let c = self.check_grid(a, h, w)?;
        if nh == 0 || nw == 0 {
            return Err(Error::shape("resize target must be non-empty"));
        }
        let out = kernels::resize_bilinear(self.values_of(a.idx), h, w, c, nh, nw);
        let rg = self.rg(&[a.idx]);
        Ok(self.push(
            Op::Resize {
                x: a.idx,
                h,
                w,
                nh,
                nw,
            },
            vec![nh * nw, c],
            out,
            rg,
        ))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = rows_cols(self.dims(a)?)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape(format!("row {bad} out of range for {m} rows")));
        }
        if rows.is_empty() {
            return Err(Error::shape("gather of zero rows"));
        }
        let x = self.values_of(a.idx);
        let out = rows.iter().flat_map(|&r| x[r * n..(r + 1) * n].iter().copied()).collect();
        let rg = self.rg(&[a.idx]);
        Ok(self.push(
            Op::Gather {
                x: a.idx,
                rows: rows.to_vec(),
            },
            vec![rows.len(), n],
            out,
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut n = None;
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = rows_cols(self.dims(p)?)?;
            if *n.get_or_insert(pn) != pn {
                return Err(Error::shape("concat_rows: column counts differ"));
            }
            m += pm;
        }
        let n = n.ok_or_else(|| Error::shape("concat of nothing"))?;
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.values_of(p.idx));
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        let rg = self.rg(&idx);
        Ok(self.push(Op::ConcatRows(idx), vec![m, n], out, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut m = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = rows_cols(self.dims(p)?)?;
            if *m.get_or_insert(pm) != pm {
                return Err(Error::shape("concat_cols: row counts differ"));
            }
            widths.push(pn);
        }
        let m = m.ok_or_else(|| Error::shape("concat of nothing"))?;
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.values_of(p.idx)[i * w..(i + 1) * w]);
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        let rg = self.rg(&idx);
        Ok(self.push(Op::ConcatCols(idx), vec![m, n], out, rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn narrow_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = rows_cols(self.dims(a)?)?;
        if len == 0 || start + len > n {
            return Err(Error::shape(format!("columns {start}..{} of {n}", start + len)));
        }
        let x = self.values_of(a.idx);
        let out = (0..m)
            .flat_map(|i| x[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let rg = self.rg(&[a.idx]);
        Ok(self.push(Op::NarrowCols { x: a.idx, start }, vec![m, len], out, rg))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let old = self.dims(a)?;
        if numel(old) != numel(dims) {
            return Err(Error::shape(format!("cannot reshape {old:?} into {dims:?}")));
        }
        let out = self.values_of(a.idx).to_vec();
        let rg = self.rg(&[a.idx]);
        Ok(self.push(Op::Reshape(a.idx), dims.to_vec(), out, rg))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let dims = self.dims(a)?.to_vec();
        let (m, n) = rows_cols(&dims)?;
        let eps = T::of(eps);
        let inv_n = T::one() / T::of(n as f64);
        let mut out = self.values_of(a.idx).to_vec();
        let mut rstd = Vec::with_capacity(m);
        for row in out.chunks_mut(n) {
            let mu = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() * inv_n;
            let r = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mu) * r;
            }
            rstd.push(r);
        }
        let rg = self.rg(&[a.idx]);
        Ok(self.push(Op::LayerNorm { x: a.idx, rstd }, dims, out, rg))
    }

    /// Median over all entries (mean of the middle pair for even counts).
    pub fn median(&mut self, a: Var) -> Result<Var> {
        self.node(a)?;
        let (m, taps) = kernels::median(self.values_of(a.idx));
        let rg = self.rg(&[a.idx]);
        Ok(self.push(Op::Median { x: a.idx, taps }, vec![1], vec![m], rg))
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// trainable parameter it depends on. The tape is left intact, so the
    /// call can be repeated.
    pub fn backward(&self, loss: Var) -> Result<GradientMap<T>> {
        let node = self.node(loss)?;
        if numel(&node.dims) != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                node.dims
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(vec![T::one()]);
        let mut out = GradientMap::new();

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], idx: usize, f: impl FnOnce(&mut [T])) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let len = numel(&self.nodes[idx].dims);
        let slot = grads[idx].get_or_insert_with(|| vec![T::zero(); len]);
        f(slot);
    }

    fn acc_vec(&self, grads: &mut [Option<Vec<T>>], idx: usize, v: Vec<T>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(slot) => slot.iter_mut().zip(v).for_each(|(s, x)| *s += x),
            None => grads[idx] = Some(v),
        }
    }

    fn propagate(&self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>], out: &mut GradientMap<T>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Param(pid) => {
                let t = Tensor::new(node.dims.clone(), g).expect("gradient matches param dims");
                out.entries.insert(*pid, t);
            }
            &Op::MatMul(a, b) => {
                let (m, k) = rows_cols(&self.nodes[a].dims).unwrap();
                let (_, n) = rows_cols(&self.nodes[b].dims).unwrap();
                if self.nodes[a].requires_grad {
                    let bt = kernels::transpose(self.values_of(b), k, n);
                    self.acc(grads, a, |d| kernels::matmul_acc(&g, &bt, d, m, n, k));
                }
                if self.nodes[b].requires_grad {
                    let at = kernels::transpose(self.values_of(a), m, k);
                    self.acc(grads, b, |d| kernels::matmul_acc(&at, &g, d, k, m, n));
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = rows_cols(&node.dims).unwrap();
                self.acc_vec(grads, a, kernels::transpose(&g, m, n));
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |d| d.iter_mut().zip(&g).for_each(|(d, &x)| *d += x));
                self.acc(grads, b, |d| d.iter_mut().zip(&g).for_each(|(d, &x)| *d += x));
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, |d| d.iter_mut().zip(&g).for_each(|(d, &x)| *d += x));
                self.acc(grads, b, |d| d.iter_mut().zip(&g).for_each(|(d, &x)| *d -= x));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.values_of(a), self.values_of(b));
                self.acc(grads, a, |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(&g).zip(vb) {
                        *d += x * y;
                    }
                });
                self.acc(grads, b, |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(&g).zip(va) {
                        *d += x * y;
                    }
                });
            }
            &Op::Div(a, b) => {
                let (va, vb) = (self.values_of(a), self.values_of(b));
                self.acc(grads, a, |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(&g).zip(vb) {
                        *d += x / y;
                    }
                });
                self.acc(grads, b, |d| {
                    for (((d, &x), &y), &z) in d.iter_mut().zip(&g).zip(vb).zip(va) {
                        *d -= x * z / (y * y);
                    }
                });
            }
            &Op::AddBias(a, b) => {
                let n = self.nodes[b].dims.iter().product();
                self.acc(grads, a, |d| d.iter_mut().zip(&g).for_each(|(d, &x)| *d += x));
                self.acc(grads, b, |d| {
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                    }
                });
            }
            &Op::MulRow(a, b) => {
                let n = self.nodes[b].dims.iter().product();
                let (va, vb) = (self.values_of(a), self.values_of(b));
                self.acc(grads, a, |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(n)) {
                        for ((d, &x), &y) in drow.iter_mut().zip(grow).zip(vb) {
                            *d += x * y;
                        }
                    }
                });
                self.acc(grads, b, |d| {
                    for (grow, arow) in g.chunks(n).zip(va.chunks(n)) {
                        for ((d, &x), &y) in d.iter_mut().zip(grow).zip(arow) {
                            *d += x * y;
                        }
                    }
                });
            }
            &Op::Broadcast(s) => {
                let total = g.iter().copied().sum::<T>();
                self.acc(grads, s, |d| d[0] += total);
            }
            &Op::Scale(a, c) => {
                self.acc(grads, a, |d| d.iter_mut().zip(&g).for_each(|(d, &x)| *d += c * x));
            }
            &Op::AddConst(a) => {
                self.acc(grads, a, |d| d.iter_mut().zip(&g).for_each(|(d, &x)| *d += x));
            }
            &Op::Unary(kind, a) => {
                let (x, y) = (self.values_of(a), &node.value);
                self.acc(grads, a, |d| {
                    for (((d, &gi), &xi), &yi) in d.iter_mut().zip(&g).zip(x).zip(y) {
                        let local = match kind {
                            Unary::Exp => yi,
                            Unary::Log => T::one() / xi,
                            Unary::Tanh => T::one() - yi * yi,
                            Unary::Relu => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Sigmoid => yi * (T::one() - yi),
                            Unary::Softplus => sigmoid(xi),
                            Unary::Abs => {
                                if xi > T::zero() {
                                    T::one()
                                } else if xi < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                        };
                        *d += gi * local;
                    }
                });
            }
            &Op::ClampMin(a, c) => {
                let x = self.values_of(a);
                self.acc(grads, a, |d| {
                    for ((d, &gi), &xi) in d.iter_mut().zip(&g).zip(x) {
                        if xi > c {
                            *d += gi;
                        }
                    }
                });
            }
            &Op::Softmax(a) => {
                let (_, n) = rows_cols(&node.dims).unwrap();
                self.acc(grads, a, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yi * (gi - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(a) => {
                let (_, n) = rows_cols(&node.dims).unwrap();
                self.acc(grads, a, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                        let total = grow.iter().copied().sum::<T>();
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gi - yi.exp() * total;
                        }
                    }
                });
            }
            &Op::SumAll(a) => {
                let g0 = g[0];
                self.acc(grads, a, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            &Op::MeanAll(a) => {
                let len = numel(&self.nodes[a].dims);
                let g0 = g[0] / T::of(len as f64);
                self.acc(grads, a, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            &Op::SumRows(a) | &Op::MeanRows(a) => {
                let (m, n) = rows_cols(&self.nodes[a].dims).unwrap();
                let f = if matches!(node.op, Op::MeanRows(_)) {
                    T::one() / T::of(m as f64)
                } else {
                    T::one()
                };
                self.acc(grads, a, |d| {
                    for drow in d.chunks_mut(n) {
                        drow.iter_mut().zip(&g).for_each(|(d, &x)| *d += f * x);
                    }
                });
            }
            &Op::AvgPool2 { x, h, w } => {
                let c = node.dims[1];
                self.acc_vec(grads, x, kernels::avg_pool2_adjoint(&g, h, w, c));
            }
            &Op::Resize { x, h, w, nh, nw } => {
                let c = node.dims[1];
                self.acc_vec(grads, x, kernels::resize_bilinear_adjoint(&g, h, w, c, nh, nw));
            }
            Op::Gather { x, rows } => {
                let n = node.dims[1];
                self.acc(grads, *x, |d| {
                    for (k, &r) in rows.iter().enumerate() {
                        let src = &g[k * n..(k + 1) * n];
                        d[r * n..(r + 1) * n].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = numel(&self.nodes[p].dims);
                    let chunk = &g[off..off + len];
                    self.acc(grads, p, |d| d.iter_mut().zip(chunk).for_each(|(d, &x)| *d += x));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = rows_cols(&node.dims).unwrap();
                let mut off = 0;
                for &p in parts {
                    let (_, w) = rows_cols(&self.nodes[p].dims).unwrap();
                    self.acc(grads, p, |d| {
                        for i in 0..m {
                            let src = &g[i * n + off..i * n + off + w];
                            d[i * w..(i + 1) * w].iter_mut().zip(src).for_each(|(d, &x)| *d += x);
                        }
                    });
                    off += w;
                }
            }
            &Op::NarrowCols { x, start } => {
                let (m, len) = rows_cols(&node.dims).unwrap();
                let (_, n) = rows_cols(&self.nodes[x].dims).unwrap();
                self.acc(grads, x, |d| {
                    for i in 0..m {
                        let src = &g[i * len..(i + 1) * len];
                        d[i * n + start..i * n + start + len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &v)| *d += v);
                    }
                });
            }
            &Op::Reshape(a) => self.acc_vec(grads, a, g),
            Op::LayerNorm { x, rstd } => {
                let (_, n) = rows_cols(&node.dims).unwrap();
                let inv_n = T::one() / T::of(n as f64);
                self.acc(grads, *x, |d| {
                    for (((drow, grow), yrow), &r) in d
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(node.value.chunks(n))
                        .zip(rstd)
                    {
                        let gm = grow.iter().copied().sum::<T>() * inv_n;
                        let gy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += r * (gi - gm - yi * gy);
                        }
                    }
                });
            }
            Op::Median { x, taps } => {
                let g0 = g[0];
                self.acc(grads, *x, |d| {
                    for &(j, w) in taps {
                        d[j] += w * g0;
                    }
                });
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

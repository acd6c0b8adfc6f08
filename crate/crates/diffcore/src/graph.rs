//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the op
//! is pushed, and [`Graph::backward`] walks the tape in reverse. Parameters are
//! bound from [`ParamStore`]s by id and their gradients are written back into the
//! store's gradient slots.

use std::collections::{HashMap, HashSet};

use crate::tensor::matmul_into;
use crate::{Error, ParamId, ParamStore, Real, Result, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param { store: u64, id: ParamId },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Symlog(Var),
    Symexp(Var),
    Square(Var),
    Sqrt(Var),
    Recip(Var),
    MaxScalar(Var, T),
    SumAll(Var),
    SumCols(Var),
    SumRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SelectRows(Var, Vec<usize>),
    LogSoftmaxGroups(Var, usize),
    SoftmaxGroups(Var, usize),
    StraightThrough(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    per_node: Vec<Option<Tensor<T>>>,
    params: HashMap<(u64, usize), usize>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a recorded value (zeros when unreached).
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.per_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradients of every parameter bound from `store` into its slots.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        let uid = store.uid();
        for (&(s, idx), &node) in &self.params {
            if s != uid {
                continue;
            }
            if let Some(g) = &self.per_node[node] {
                let slot = store.get_mut(ParamId(idx)).grad.data_mut();
                for (d, &v) in slot.iter_mut().zip(g.data()) {
                    *d = *d + v;
                }
            }
        }
    }
}

/// Recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<(u64, usize), Var>,
    frozen: HashSet<u64>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), frozen: HashSet::new() }
    }

    /// Parameters of `store` bound after this call are treated as constants.
    pub fn freeze(&mut self, store: &ParamStore<T>) {
        self.frozen.insert(store.uid());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (reachable via [`Gradients::wrt`]).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: T) -> Var {
        self.input(Tensor::scalar(value))
    }

    /// Binds a parameter; repeated binds of the same parameter share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let trainable = !self.frozen.contains(&store.uid());
        let v = self.push(
            store.value(id).clone(),
            Op::Param { store: store.uid(), id },
            trainable,
        );
        self.bound.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_into(self.value(a), self.value(b)).expect("matmul shapes");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, what).expect("elementwise shapes");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.shape(), data).expect("sized")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, "add", |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, "sub", |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, "mul", |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `[m, n] + [1, n]` (row broadcast, e.g. bias).
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        let n = x.cols();
        assert_eq!(r.len(), n, "add_row width");
        let mut out = x.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(r.data()) {
                *o = *o + b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// `[m, n] * [m, 1]` (column broadcast).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (self.value(a), self.value(col));
        let n = x.cols();
        assert_eq!(c.len(), x.rows(), "mul_col height");
        let mut out = x.clone();
        for (chunk, &s) in out.data_mut().chunks_mut(n).zip(c.data()) {
            chunk.iter_mut().for_each(|o| *o = *o * s);
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(out, Op::MulCol(a, col), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.ln(), Op::Ln(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// `sign(x) * ln(1 + |x|)`.
    pub fn symlog(&mut self, a: Var) -> Var {
        self.unary(a, symlog, Op::Symlog(a))
    }

    /// `sign(x) * (exp(|x|) - 1)`, the inverse of [`Graph::symlog`].
    pub fn symexp(&mut self, a: Var) -> Var {
        self.unary(a, symexp, Op::Symexp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.sqrt(), Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.recip(), Op::Recip(a))
    }

    /// Elementwise `max(x, c)`; gradient flows only where `x > c`.
    pub fn max_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |v| if v > c { v } else { c }, Op::MaxScalar(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Per-row sum: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols();
        let data: Vec<T> = x
            .data()
            .chunks(n)
            .map(|c| c.iter().fold(T::zero(), |s, &v| s + v))
            .collect();
        let out = Tensor::from_vec(&[x.rows(), 1], data).expect("sized");
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    /// Per-column sum: `[m, n] -> [1, n]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols();
        let mut data = vec![T::zero(); n];
        for chunk in x.data().chunks(n) {
            for (d, &v) in data.iter_mut().zip(chunk) {
                *d = *d + v;
            }
        }
        let out = Tensor::from_vec(&[1, n], data).expect("sized");
        let rg = self.rg(a);
        self.push(out, Op::SumRows(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let x = self.value(p);
                assert_eq!(x.rows(), rows, "concat_cols row counts");
                data.extend_from_slice(x.row_slice(r));
            }
        }
        let out = Tensor::from_vec(&[rows, total], data).expect("sized");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let x = self.value(a);
        let n = x.cols();
        assert!(start + width <= n, "slice_cols out of range");
        let mut data = Vec::with_capacity(x.rows() * width);
        for chunk in x.data().chunks(n) {
            data.extend_from_slice(&chunk[start..start + width]);
        }
        let out = Tensor::from_vec(&[x.rows(), width], data).expect("sized");
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors).expect("concat_rows shapes");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let out = self.value(a).slice_rows(start, count);
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let out = self.value(a).select_rows(rows);
        let rg = self.rg(a);
        self.push(out, Op::SelectRows(a, rows.to_vec()), rg)
    }

    /// Log-softmax over consecutive groups of `classes` columns.
    pub fn log_softmax_groups(&mut self, a: Var, classes: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.cols() % classes, 0, "columns not divisible into groups");
        let mut out = x.clone();
        for group in out.data_mut().chunks_mut(classes) {
            let m = group.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = group.iter().fold(T::zero(), |s, &v| s + (v - m).exp()).ln() + m;
            group.iter_mut().for_each(|v| *v = *v - lse);
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxGroups(a, classes), rg)
    }

    /// Softmax over consecutive groups of `classes` columns.
    pub fn softmax_groups(&mut self, a: Var, classes: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.cols() % classes, 0, "columns not divisible into groups");
        let mut out = x.clone();
        for group in out.data_mut().chunks_mut(classes) {
            softmax_in_place(group);
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxGroups(a, classes), rg)
    }

    /// Forward value is `sample`; backward routes the incoming gradient to
    /// `probs` unchanged (straight-through estimator).
    pub fn straight_through(&mut self, probs: Var, sample: Tensor<T>) -> Var {
        same_shape(self.value(probs), &sample, "straight_through").expect("sample shape");
        let rg = self.rg(probs);
        self.push(sample, Op::StraightThrough(probs), rg)
    }

    /// Copies the value with no gradient connection.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.input(v)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param { store, id } => Some(((*store, id.0), i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { per_node: grads, params })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    // dA = dC @ B^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        n as isize,
                        1,
                        bv.data(),
                        1,
                        n as isize,
                        T::zero(),
                        da.data_mut(),
                        k as isize,
                        1,
                    );
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    // dB = A^T @ dC
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        T::zero(),
                        db.data_mut(),
                        n as isize,
                        1,
                    );
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc_if(grads, *a, || g.clone());
                self.acc_if(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_if(grads, *a, || g.clone());
                self.acc_if(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_if(grads, *a, || zip(g, bv, |d, q| d * q));
                self.acc_if(grads, *b, || zip(g, av, |d, p| d * p));
            }
            Op::AddRow(a, row) => {
                self.acc_if(grads, *a, || g.clone());
                if self.rg(*row) {
                    let rv = self.value(*row);
                    let n = g.cols();
                    let mut dr = vec![T::zero(); n];
                    for chunk in g.data().chunks(n) {
                        for (d, &v) in dr.iter_mut().zip(chunk) {
                            *d = *d + v;
                        }
                    }
                    accumulate(grads, *row, Tensor::from_vec(rv.shape(), dr).expect("sized"));
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                let n = g.cols();
                if self.rg(*a) {
                    let mut da = g.clone();
                    for (chunk, &s) in da.data_mut().chunks_mut(n).zip(cv.data()) {
                        chunk.iter_mut().for_each(|d| *d = *d * s);
                    }
                    accumulate(grads, *a, da);
                }
                if self.rg(*col) {
                    let dc: Vec<T> = g
                        .data()
                        .chunks(n)
                        .zip(av.data().chunks(n))
                        .map(|(gc, ac)| {
                            gc.iter().zip(ac).fold(T::zero(), |s, (&d, &x)| s + d * x)
                        })
                        .collect();
                    accumulate(grads, *col, Tensor::from_vec(cv.shape(), dc).expect("sized"));
                }
            }
            Op::AddScalar(a) => self.acc_if(grads, *a, || g.clone()),
            Op::Scale(a, c) => {
                let c = *c;
                self.acc_if(grads, *a, || g.map(|d| d * c))
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                self.acc_if(grads, *a, || {
                    zip(g, x, |d, v| if v > T::zero() { d } else { T::zero() })
                })
            }
            Op::Sigmoid(a) => self.acc_if(grads, *a, || zip(g, y, |d, s| d * s * (T::one() - s))),
            Op::Tanh(a) => self.acc_if(grads, *a, || zip(g, y, |d, t| d * (T::one() - t * t))),
            Op::Exp(a) => self.acc_if(grads, *a, || zip(g, y, |d, e| d * e)),
            Op::Ln(a) => {
                let x = self.value(*a);
                self.acc_if(grads, *a, || zip(g, x, |d, v| d / v))
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                self.acc_if(grads, *a, || zip(g, x, |d, v| d * sigmoid(v)))
            }
            Op::Symlog(a) => {
                let x = self.value(*a);
                self.acc_if(grads, *a, || zip(g, x, |d, v| d / (T::one() + v.abs())))
            }
            Op::Symexp(a) => {
                let x = self.value(*a);
                self.acc_if(grads, *a, || zip(g, x, |d, v| d * v.abs().exp()))
            }
            Op::Square(a) => {
                let x = self.value(*a);
                self.acc_if(grads, *a, || zip(g, x, |d, v| d * T::lit(2.0) * v))
            }
            Op::Sqrt(a) => self.acc_if(grads, *a, || zip(g, y, |d, s| d / (T::lit(2.0) * s))),
            Op::Recip(a) => self.acc_if(grads, *a, || zip(g, y, |d, r| -d * r * r)),
            Op::MaxScalar(a, c) => {
                let (x, c) = (self.value(*a), *c);
                self.acc_if(grads, *a, || zip(g, x, |d, v| if v > c { d } else { T::zero() }))
            }
            Op::SumAll(a) => {
                let d = g.item();
                let shape = self.value(*a).shape().to_vec();
                self.acc_if(grads, *a, || Tensor::full(&shape, d))
            }
            Op::SumCols(a) => {
                let x = self.value(*a);
                let n = x.cols();
                self.acc_if(grads, *a, || {
                    let mut data = Vec::with_capacity(x.len());
                    for &d in g.data() {
                        data.extend(std::iter::repeat_n(d, n));
                    }
                    Tensor::from_vec(x.shape(), data).expect("sized")
                })
            }
            Op::SumRows(a) => {
                let x = self.value(*a);
                self.acc_if(grads, *a, || {
                    let mut data = Vec::with_capacity(x.len());
                    for _ in 0..x.rows() {
                        data.extend_from_slice(g.data());
                    }
                    Tensor::from_vec(x.shape(), data).expect("sized")
                })
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let x = self.value(p);
                    let w = x.cols();
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(x.len());
                        for chunk in g.data().chunks(total) {
                            data.extend_from_slice(&chunk[offset..offset + w]);
                        }
                        accumulate(grads, p, Tensor::from_vec(x.shape(), data).expect("sized"));
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let (n, w) = (x.cols(), g.cols());
                self.acc_if(grads, *a, || {
                    let mut d = Tensor::zeros(x.shape());
                    for (dst, src) in d.data_mut().chunks_mut(n).zip(g.data().chunks(w)) {
                        dst[*start..*start + w].copy_from_slice(src);
                    }
                    d
                })
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut row = 0;
                for &p in parts {
                    let x = self.value(p);
                    let r = x.rows();
                    if self.rg(p) {
                        let data = g.data()[row * n..(row + r) * n].to_vec();
                        accumulate(grads, p, Tensor::from_vec(x.shape(), data).expect("sized"));
                    }
                    row += r;
                }
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let n = x.cols();
                self.acc_if(grads, *a, || {
                    let mut d = Tensor::zeros(x.shape());
                    d.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                    d
                })
            }
            Op::SelectRows(a, rows) => {
                let x = self.value(*a);
                let n = x.cols();
                self.acc_if(grads, *a, || {
                    let mut d = Tensor::zeros(x.shape());
                    for (k, &r) in rows.iter().enumerate() {
                        let dst = &mut d.data_mut()[r * n..(r + 1) * n];
                        for (o, &v) in dst.iter_mut().zip(&g.data()[k * n..(k + 1) * n]) {
                            *o = *o + v;
                        }
                    }
                    d
                })
            }
            Op::LogSoftmaxGroups(a, classes) => {
                self.acc_if(grads, *a, || {
                    let mut d = g.clone();
                    for (dg, yg) in d.data_mut().chunks_mut(*classes).zip(y.data().chunks(*classes))
                    {
                        let s = dg.iter().fold(T::zero(), |s, &v| s + v);
                        for (dv, &lv) in dg.iter_mut().zip(yg) {
                            *dv = *dv - lv.exp() * s;
                        }
                    }
                    d
                })
            }
            Op::SoftmaxGroups(a, classes) => {
                self.acc_if(grads, *a, || {
                    let mut d = g.clone();
                    for (dg, yg) in d.data_mut().chunks_mut(*classes).zip(y.data().chunks(*classes))
                    {
                        let s = dg.iter().zip(yg).fold(T::zero(), |s, (&dv, &pv)| s + dv * pv);
                        for (dv, &pv) in dg.iter_mut().zip(yg) {
                            *dv = pv * (*dv - s);
                        }
                    }
                    d
                })
            }
            Op::StraightThrough(p) => self.acc_if(grads, *p, || g.clone()),
        }
    }

    fn acc_if(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.rg(v) {
            accumulate(grads, v, f());
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, d: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, &x) in existing.data_mut().iter_mut().zip(d.data()) {
                *e = *e + x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::from_vec(a.shape(), data).expect("sized")
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(v: T) -> T {
    // ln(1 + e^v) without overflow
    if v > T::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

pub fn symlog<T: Real>(v: T) -> T {
    v.signum() * v.abs().ln_1p()
}

pub fn symexp<T: Real>(v: T) -> T {
    v.signum() * v.abs().exp_m1()
}

pub(crate) fn softmax_in_place<T: Real>(group: &mut [T]) {
    let m = group.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut s = T::zero();
    for v in group.iter_mut() {
        *v = (*v - m).exp();
        s = s + *v;
    }
    group.iter_mut().for_each(|v| *v = *v / s);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.leaf(Tensor::scalar(5.0));
        let z = g.mul(x, y);
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 5.0);
        assert_eq!(grads.wrt(y).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn reused_node_accumulates() {
        // f = x * x built from mul on the same node
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(-1.5));
        let y = g.mul(x, x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), -3.0);
    }

    #[test]
    fn unreached_param_gets_zero_grad() {
        let mut store = ParamStore::<f64>::new();
        let used = store.add("used", Tensor::scalar(2.0));
        let unused = store.add("unused", Tensor::scalar(7.0));
        let mut g = Graph::new();
        let p = g.param(&store, used);
        let l = g.square(p);
        let grads = g.backward(l).unwrap();
        store.zero_grad();
        grads.accumulate_into(&mut store);
        assert_eq!(store.grad(used).item(), 4.0);
        assert_eq!(store.grad(unused).item(), 0.0);
    }

    #[test]
    fn frozen_store_gets_no_grad() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::scalar(2.0));
        let mut g = Graph::new();
        g.freeze(&store);
        let p = g.param(&store, w);
        let x = g.leaf(Tensor::scalar(3.0));
        let l = g.mul(p, x);
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(p).is_none());
        assert_eq!(grads.wrt(x).unwrap().item(), 2.0);
    }

    #[test]
    fn straight_through_routes_to_probs() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::from_f64(&[1, 2], &[0.3, 0.7]).unwrap());
        let s = g.straight_through(p, Tensor::from_f64(&[1, 2], &[0.0, 1.0]).unwrap());
        assert_eq!(g.value(s).data(), &[0.0, 1.0]);
        let w = g.input(Tensor::from_f64(&[1, 2], &[2.0, -1.0]).unwrap());
        let prod = g.mul(s, w);
        let l = g.sum(prod);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(p).unwrap().data(), &[2.0, -1.0]);
    }
}

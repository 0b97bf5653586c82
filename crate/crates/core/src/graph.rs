//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Parameters are bound lazily from a [`ParamStore`] and borrowed rather than
//! copied. [`Graph::backward`] walks the tape once in reverse creation order,
//! so gradient accumulation order is fixed by construction.

use std::borrow::Cow;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Full,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Affine(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm(Var, Vec<T>),
    L2Normalize(Var, Vec<T>),
    Concat(Vec<Var>, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    Sum(Var, Option<usize>, T),
    Attention(Box<AttentionCache<T>>),
    Dropout(Var, Vec<T>),
}

#[derive(Debug)]
struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    groups: usize,
    probs: Vec<T>,
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// One recorded forward pass.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    store: Option<&'a ParamStore<T>>,
    bound: Vec<Option<Var>>,
    rng: Option<ChaCha8Rng>,
    train: bool,
}

fn shape2(t: &Tensor<impl Scalar>, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok((t.rows(), t.cols()))
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// A graph with no parameter store and dropout disabled.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            bound: Vec::new(),
            rng: None,
            train: false,
        }
    }

    /// A graph that binds parameters from `store`. Dropout is active only
    /// when an RNG is supplied.
    pub fn with_store(store: &'a ParamStore<T>, rng: Option<ChaCha8Rng>) -> Self {
        Graph {
            nodes: Vec::new(),
            store: Some(store),
            bound: vec![None; store.len()],
            train: rng.is_some(),
            rng,
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Owned input leaf.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        shape2(&value, "input")?;
        self.push(value, Op::Leaf, requires_grad, "input")
    }

    /// Constant leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.input(value, false)
    }

    /// Copy of `x` cut off from the gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// Bind a named parameter from the store. Repeated calls return the same
    /// node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if let Some(v) = self.bound[idx] {
            return Ok(v);
        }
        let t = store.tensor_at(idx);
        shape2(t, "param")?;
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[idx] = Some(v);
        Ok(v)
    }

    /// Which side of zero every ReLU input lies on, in tape order. Two
    /// evaluations with different patterns straddle a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    /// Store names of the parameters this graph has bound, in store order.
    pub fn bound_params(&self) -> Vec<String> {
        let Some(store) = self.store else {
            return Vec::new();
        };
        self.bound
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_some())
            .map(|(i, _)| store.names()[i].clone())
            .collect()
    }

    /// Node bound to a parameter, if any.
    pub fn bound_var(&self, name: &str) -> Option<Var> {
        self.store
            .and_then(|s| s.index_of(name))
            .and_then(|i| self.bound[i])
    }

    /// Whether the bound store holds a parameter of this name.
    pub fn has_param(&self, name: &str) -> bool {
        self.store.is_some_and(|s| s.index_of(name).is_some())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = shape2(av, "matmul")?;
        let (k2, n) = shape2(bv, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            T::one(),
            av.as_mat(),
            bv.as_mat(),
            T::zero(),
            MatMut::new(out.data_mut(), m, n),
        );
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    fn bcast(&self, a: Var, b: Var, op: &'static str) -> Result<Bcast> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, n) = shape2(av, op)?;
        let (p, q) = shape2(bv, op)?;
        match (p, q) {
            _ if p == m && q == n => Ok(Bcast::Full),
            (1, 1) => Ok(Bcast::Scalar),
            (1, _) if q == n => Ok(Bcast::Row),
            (_, 1) if p == m => Ok(Bcast::Col),
            _ => Err(Error::shape(op, av.shape(), bv.shape())),
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(Var, Var, Bcast) -> Op<T>,
    ) -> Result<Var> {
        let mode = self.bcast(a, b, name)?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.cols();
        let bd = bv.data();
        let data: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match mode {
                    Bcast::Full => bd[i],
                    Bcast::Row => bd[i % n],
                    Bcast::Col => bd[i / n],
                    Bcast::Scalar => bd[0],
                };
                f(x, y)
            })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, op(a, b, mode), rg, name)
    }

    /// Elementwise sum. `b` may be full-shaped, a row `[1,n]`, a column
    /// `[m,1]`, or a scalar `[1,1]`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, c) = (T::of(scale), T::of(shift));
        let out = self.value(x).map(|v| s * v + c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Affine(x, s), rg, "affine")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg, "tanh")
    }

    /// Softmax along `axis` (0: within each column, 1: within each row).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax_axis(self.value(x), axis, false)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x, axis), rg, "softmax")
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax_axis(self.value(x), axis, true)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSoftmax(x, axis), rg, "log_softmax")
    }

    /// Per-row standardization to zero mean and unit variance. Gain and bias
    /// are applied separately.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = shape2(xv, "layer_norm")?;
        let eps = T::of(eps);
        let nf = T::of(n as f64);
        let mut out = Tensor::zeros(&[m, n]);
        let mut inv = Vec::with_capacity(m);
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let ri = T::one() / (var + eps).sqrt();
            for (o, &v) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * ri;
            }
            inv.push(ri);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LayerNorm(x, inv), rg, "layer_norm")
    }

    /// Scale every row to unit Euclidean norm. Rows of zero norm are an error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = shape2(xv, "l2_normalize")?;
        let mut out = Tensor::zeros(&[m, n]);
        let mut norms = Vec::with_capacity(m);
        for r in 0..m {
            let row = xv.row(r);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm <= T::zero() {
                return Err(Error::Invalid(format!(
                    "l2_normalize: row {r} has zero norm"
                )));
            }
            for (o, &v) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::L2Normalize(x, norms), rg, "l2_normalize")
    }

    /// Concatenate along `axis` (0: stack rows, 1: join columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]);
        let (m0, n0) = shape2(first, "concat")?;
        let out = match axis {
            0 => {
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let pv = self.value(p);
                    let (m, n) = shape2(pv, "concat")?;
                    if n != n0 {
                        return Err(Error::shape("concat", first.shape(), pv.shape()));
                    }
                    rows += m;
                    data.extend_from_slice(pv.data());
                }
                Tensor::matrix(rows, n0, data)?
            }
            1 => {
                let mut cols = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (m, n) = shape2(pv, "concat")?;
                    if m != m0 {
                        return Err(Error::shape("concat", first.shape(), pv.shape()));
                    }
                    cols += n;
                }
                let mut data = Vec::with_capacity(m0 * cols);
                for r in 0..m0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::matrix(m0, cols, data)?
            }
            _ => return Err(Error::Invalid(format!("concat: bad axis {axis}"))),
        };
        let rg = self.rg(parts);
        self.push(out, Op::Concat(parts.to_vec(), axis), rg, "concat")
    }

    /// Rows of `x` picked by `index` (with repetition allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = shape2(xv, "gather_rows")?;
        if index.is_empty() {
            return Err(Error::Invalid("gather_rows: empty index".into()));
        }
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= m {
                return Err(Error::shape("gather_rows", xv.shape(), &[i]));
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::matrix(index.len(), n, data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::GatherRows(x, index.to_vec()), rg, "gather_rows")
    }

    /// Contiguous row range `[start, end)`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let index: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &index)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = shape2(xv, "transpose")?;
        let mut out = Tensor::zeros(&[n, m]);
        let d = xv.data();
        let o = out.data_mut();
        for r in 0..m {
            for c in 0..n {
                o[c * m + r] = d[r * n + c];
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Transpose(x), rg, "transpose")
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshape(&[rows, cols])?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg, "reshape")
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = shape2(xv, "sum")?;
        let (count, out) = match axis {
            None => (m * n, Tensor::scalar(xv.data().iter().copied().sum())),
            Some(0) => {
                let mut o = vec![T::zero(); n];
                for r in 0..m {
                    for (acc, &v) in o.iter_mut().zip(xv.row(r)) {
                        *acc += v;
                    }
                }
                (m, Tensor::matrix(1, n, o)?)
            }
            Some(1) => {
                let o = (0..m).map(|r| xv.row(r).iter().copied().sum()).collect();
                (n, Tensor::matrix(m, 1, o)?)
            }
            Some(a) => return Err(Error::Invalid(format!("sum: bad axis {a}"))),
        };
        let factor = if mean {
            T::one() / T::of(count as f64)
        } else {
            T::one()
        };
        let out = if mean { out.map(|v| v * factor) } else { out };
        let rg = self.rg(&[x]);
        self.push(
            out,
            Op::Sum(x, axis, factor),
            rg,
            if mean { "mean" } else { "sum" },
        )
    }

    /// Sum over everything (`None`) or one axis.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Scaled dot-product attention with `heads` heads, evaluated
    /// independently on `groups` equal row blocks of the inputs.
    ///
    /// `q` is `[groups * nq, width]`, `k` and `v` are `[groups * nk, width]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (qm, width) = shape2(qv, "attention")?;
        let (km, kw) = shape2(kv, "attention")?;
        let (vm, vw) = shape2(vv, "attention")?;
        if kw != width || vw != width || km != vm {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || width % heads != 0 || groups == 0 || qm % groups != 0 || km % groups != 0 {
            return Err(Error::Invalid(format!(
                "attention: width {width}, heads {heads}, groups {groups}, rows {qm}/{km}"
            )));
        }
        let (nq, nk, dh) = (qm / groups, km / groups, width / heads);
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut out = Tensor::zeros(&[qm, width]);
        let mut probs = vec![T::zero(); groups * heads * nq * nk];
        for g in 0..groups {
            let qs = &qv.data()[g * nq * width..(g + 1) * nq * width];
            let ks = &kv.data()[g * nk * width..(g + 1) * nk * width];
            let vs = &vv.data()[g * nk * width..(g + 1) * nk * width];
            for h in 0..heads {
                let p = &mut probs[(g * heads + h) * nq * nk..(g * heads + h + 1) * nq * nk];
                let qh = MatRef::cols_of(qs, nq, width, h * dh, dh);
                let kh = MatRef::cols_of(ks, nk, width, h * dh, dh);
                let vh = MatRef::cols_of(vs, nk, width, h * dh, dh);
                gemm(scale, qh, kh.t(), T::zero(), MatMut::new(p, nq, nk));
                for row in p.chunks_mut(nk) {
                    softmax_in_place(row);
                }
                let os = &mut out.data_mut()[g * nq * width..(g + 1) * nq * width];
                gemm(
                    T::one(),
                    MatRef::new(p, nq, nk),
                    vh,
                    T::zero(),
                    MatMut::cols_of(os, nq, width, h * dh, dh),
                );
            }
        }
        let rg = self.rg(&[q, k, v]);
        let cache = AttentionCache {
            q,
            k,
            v,
            heads,
            groups,
            probs,
        };
        self.push(out, Op::Attention(Box::new(cache)), rg, "attention")
    }

    /// Inverted dropout. Identity outside training or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let rng = self.rng.as_mut().expect("training graph carries an rng");
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Dropout(x, mask), rg, "dropout")
    }

    /// Reverse pass from a `[1,1]` loss node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", lv.shape(), &[1, 1]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop(i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &*self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    gemm(
                        T::one(),
                        dy.as_mat(),
                        bv.as_mat().t(),
                        T::zero(),
                        MatMut::new(da.data_mut(), m, k),
                    );
                    self.acc(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(&[k, n]);
                    gemm(
                        T::one(),
                        av.as_mat().t(),
                        dy.as_mat(),
                        T::zero(),
                        MatMut::new(db.data_mut(), k, n),
                    );
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b, mode) => {
                self.acc(grads, *a, dy.clone());
                if self.requires_grad(*b) {
                    let db = reduce_to(dy, *mode, self.value(*b).shape());
                    self.acc(grads, *b, db);
                }
            }
            Op::Sub(a, b, mode) => {
                self.acc(grads, *a, dy.clone());
                if self.requires_grad(*b) {
                    let db = reduce_to(dy, *mode, self.value(*b).shape()).map(|v| -v);
                    self.acc(grads, *b, db);
                }
            }
            Op::Mul(a, b, mode) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.cols();
                let bd = bv.data();
                let pick = |idx: usize| match mode {
                    Bcast::Full => bd[idx],
                    Bcast::Row => bd[idx % n],
                    Bcast::Col => bd[idx / n],
                    Bcast::Scalar => bd[0],
                };
                if self.requires_grad(*a) {
                    let data = dy
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, &g)| g * pick(j))
                        .collect();
                    self.acc(grads, *a, Tensor::new(dy.shape().to_vec(), data)?);
                }
                if self.requires_grad(*b) {
                    let prod: Vec<T> = dy
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    let prod = Tensor::new(dy.shape().to_vec(), prod)?;
                    self.acc(grads, *b, reduce_to(&prod, *mode, bv.shape()));
                }
            }
            Op::Affine(x, s) => {
                let s = *s;
                self.acc(grads, *x, dy.map(|g| g * s));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = dy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.acc(grads, *x, Tensor::new(dy.shape().to_vec(), data)?);
            }
            Op::Sigmoid(x) => {
                let data = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                self.acc(grads, *x, Tensor::new(dy.shape().to_vec(), data)?);
            }
            Op::Tanh(x) => {
                let data = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &t)| g * (T::one() - t * t))
                    .collect();
                self.acc(grads, *x, Tensor::new(dy.shape().to_vec(), data)?);
            }
            Op::Softmax(x, axis) => {
                let dx = softmax_backward(y, dy, *axis, false);
                self.acc(grads, *x, dx);
            }
            Op::LogSoftmax(x, axis) => {
                let dx = softmax_backward(y, dy, *axis, true);
                self.acc(grads, *x, dx);
            }
            Op::LayerNorm(x, inv) => {
                let (m, n) = (y.rows(), y.cols());
                let nf = T::of(n as f64);
                let mut dx = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    let yr = y.row(r);
                    let gr = dy.row(r);
                    let mean_g = gr.iter().copied().sum::<T>() / nf;
                    let mean_gy = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum::<T>() / nf;
                    for c in 0..n {
                        dx.data_mut()[r * n + c] = inv[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::L2Normalize(x, norms) => {
                let (m, n) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    let yr = y.row(r);
                    let gr = dy.row(r);
                    let dot = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum::<T>();
                    for c in 0..n {
                        dx.data_mut()[r * n + c] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (m, n) = (pv.rows(), pv.cols());
                    if self.requires_grad(p) {
                        let piece = if *axis == 0 {
                            dy.data()[offset * n..(offset + m) * n].to_vec()
                        } else {
                            let total = dy.cols();
                            let mut d = Vec::with_capacity(m * n);
                            for r in 0..m {
                                d.extend_from_slice(
                                    &dy.data()[r * total + offset..r * total + offset + n],
                                );
                            }
                            d
                        };
                        self.acc(grads, p, Tensor::matrix(m, n, piece)?);
                    }
                    offset += if *axis == 0 { m } else { n };
                }
            }
            Op::GatherRows(x, index) => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for (j, &src) in index.iter().enumerate() {
                    let d = dx.data_mut();
                    for c in 0..n {
                        d[src * n + c] += dy.data()[j * n + c];
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Transpose(x) => {
                let (m, n) = (dy.rows(), dy.cols());
                let mut dx = Tensor::zeros(&[n, m]);
                for r in 0..m {
                    for c in 0..n {
                        dx.data_mut()[c * m + r] = dy.data()[r * n + c];
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let dx = dy.clone().reshape(self.value(*x).shape())?;
                self.acc(grads, *x, dx);
            }
            Op::Sum(x, axis, factor) => {
                let xv = self.value(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let f = *factor;
                let mut dx = Tensor::zeros(&[m, n]);
                let d = dx.data_mut();
                for r in 0..m {
                    for c in 0..n {
                        d[r * n + c] = f * match axis {
                            None => dy.data()[0],
                            Some(0) => dy.data()[c],
                            _ => dy.data()[r],
                        };
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Attention(cache) => self.attention_backward(cache, dy, grads),
            Op::Dropout(x, mask) => {
                let data = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.acc(grads, *x, Tensor::new(dy.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        c: &AttentionCache<T>,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (qm, width) = (qv.rows(), qv.cols());
        let km = kv.rows();
        let (nq, nk, dh) = (qm / c.groups, km / c.groups, width / c.heads);
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut dq = Tensor::zeros(&[qm, width]);
        let mut dk = Tensor::zeros(&[km, width]);
        let mut dv = Tensor::zeros(&[km, width]);
        let mut dp = vec![T::zero(); nq * nk];
        for g in 0..c.groups {
            let qr = g * nq * width..(g + 1) * nq * width;
            let kr = g * nk * width..(g + 1) * nk * width;
            for h in 0..c.heads {
                let p = &c.probs[(g * c.heads + h) * nq * nk..(g * c.heads + h + 1) * nq * nk];
                let dyh = MatRef::cols_of(&dy.data()[qr.clone()], nq, width, h * dh, dh);
                let vh = MatRef::cols_of(&vv.data()[kr.clone()], nk, width, h * dh, dh);
                gemm(
                    T::one(),
                    dyh,
                    vh.t(),
                    T::zero(),
                    MatMut::new(&mut dp, nq, nk),
                );
                gemm(
                    T::one(),
                    MatRef::new(p, nq, nk).t(),
                    dyh,
                    T::one(),
                    MatMut::cols_of(&mut dv.data_mut()[kr.clone()], nk, width, h * dh, dh),
                );
                for (prow, drow) in p.chunks(nk).zip(dp.chunks_mut(nk)) {
                    let dot = prow
                        .iter()
                        .zip(drow.iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<T>();
                    for (d, &pv) in drow.iter_mut().zip(prow) {
                        *d = pv * (*d - dot);
                    }
                }
                let kh = MatRef::cols_of(&kv.data()[kr.clone()], nk, width, h * dh, dh);
                let qh = MatRef::cols_of(&qv.data()[qr.clone()], nq, width, h * dh, dh);
                gemm(
                    scale,
                    MatRef::new(&dp, nq, nk),
                    kh,
                    T::one(),
                    MatMut::cols_of(&mut dq.data_mut()[qr.clone()], nq, width, h * dh, dh),
                );
                gemm(
                    scale,
                    MatRef::new(&dp, nq, nk).t(),
                    qh,
                    T::one(),
                    MatMut::cols_of(&mut dk.data_mut()[kr.clone()], nk, width, h * dh, dh),
                );
            }
        }
        self.acc(grads, c.q, dq);
        self.acc(grads, c.k, dk);
        self.acc(grads, c.v, dv);
    }
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one reverse pass, indexed by node.
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every parameter of the graph's store, in store order.
    /// Parameters the pass never touched receive zeros.
    pub fn for_params(&self, graph: &Graph<'_, T>) -> Vec<Tensor<T>> {
        let Some(store) = graph.store else {
            return Vec::new();
        };
        (0..store.len())
            .map(|i| {
                graph.bound[i]
                    .and_then(|v| self.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(store.tensor_at(i).shape()))
            })
            .collect()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}

fn softmax_axis<T: Scalar>(x: &Tensor<T>, axis: usize, log: bool) -> Result<Tensor<T>> {
    let (m, n) = shape2(x, "softmax")?;
    let f = if log {
        log_softmax_in_place::<T>
    } else {
        softmax_in_place::<T>
    };
    match axis {
        1 => {
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(n) {
                f(row);
            }
            Ok(out)
        }
        0 => {
            let mut out = x.clone();
            let mut col = vec![T::zero(); m];
            for c in 0..n {
                for r in 0..m {
                    col[r] = x.data()[r * n + c];
                }
                f(&mut col);
                for r in 0..m {
                    out.data_mut()[r * n + c] = col[r];
                }
            }
            Ok(out)
        }
        _ => Err(Error::Invalid(format!("softmax: bad axis {axis}"))),
    }
}

fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let (m, n) = (y.rows(), y.cols());
    let mut dx = Tensor::zeros(&[m, n]);
    let (outer, inner) = if axis == 1 { (m, n) } else { (n, m) };
    let at = |o: usize, i: usize| if axis == 1 { o * n + i } else { i * n + o };
    for o in 0..outer {
        if log {
            let total = (0..inner).map(|i| dy.data()[at(o, i)]).sum::<T>();
            for i in 0..inner {
                let j = at(o, i);
                dx.data_mut()[j] = dy.data()[j] - y.data()[j].exp() * total;
            }
        } else {
            let dot = (0..inner)
                .map(|i| dy.data()[at(o, i)] * y.data()[at(o, i)])
                .sum::<T>();
            for i in 0..inner {
                let j = at(o, i);
                dx.data_mut()[j] = y.data()[j] * (dy.data()[j] - dot);
            }
        }
    }
    dx
}

fn reduce_to<T: Scalar>(g: &Tensor<T>, mode: Bcast, shape: &[usize]) -> Tensor<T> {
    let (m, n) = (g.rows(), g.cols());
    match mode {
        Bcast::Full => g.clone(),
        Bcast::Scalar => Tensor::full(shape, g.data().iter().copied().sum()),
        Bcast::Row => {
            let mut out = Tensor::zeros(shape);
            for r in 0..m {
                for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            out
        }
        Bcast::Col => {
            let mut out = Tensor::zeros(shape);
            for r in 0..m {
                out.data_mut()[r] = g.data()[r * n..(r + 1) * n].iter().copied().sum();
            }
            out
        }
    }
}

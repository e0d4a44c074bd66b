//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters live in
//! a [`ParamStore`] that the tape borrows, so a forward pass never copies the
//! weights. [`Tape::backward`] returns gradients for every parameter and for
//! any input leaf.

use crate::matrix::{gemm_into, Matrix};
use crate::scalar::Scalar;

/// Handle to a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.as_slice().len()).sum()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    Scale(Var, T),
    MulConst(Var, Matrix<T>),
    Gelu(Var, Matrix<T>),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    MeanRows(Var),
    BroadcastRows(Var),
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    WeightedSumSq { a: Var, w: Matrix<T> },
}

enum Value<T> {
    Owned(Matrix<T>),
    Param(usize),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    /// Whether a gradient must flow into this node.
    grad: bool,
}

/// Records one forward computation.
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

/// Large negative logit used for masked attention keys.
pub const MASKED_LOGIT: f64 = -1e9;

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        let grad = self.op_needs_grad(&op);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_needs_grad(&self, op: &Op<T>) -> bool {
        let g = |v: &Var| self.nodes[v.0].grad;
        match op {
            Op::Leaf | Op::Param(_) => true,
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => g(a) || g(b),
            Op::AddRow { a, row } => g(a) || g(row),
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Gelu(a, _)
            | Op::Softmax(a)
            | Op::SliceCols { a, .. }
            | Op::SliceRows { a, .. }
            | Op::MeanRows(a)
            | Op::BroadcastRows(a)
            | Op::WeightedSumSq { a, .. } => g(a),
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.iter().any(g),
            Op::GatherRows { table, .. } => g(table),
            Op::LayerNorm { a, gamma, beta, .. } => g(a) || g(gamma) || g(beta),
        }
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(i) => &self.params.values[*i],
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Input leaf. Its gradient is available after [`Tape::backward`].
    /// Leaf whose gradient is available through [`Gradients::wrt`].
    pub fn input(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(m),
            op: Op::Leaf,
            grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id.0),
            op: Op::Param(id.0),
            grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul { a, b, trans_b: false })
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMul { a, b, trans_b: true })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).sub(self.value(b));
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).hadamard(self.value(b));
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        debug_assert_eq!(r.rows(), 1);
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (x, &b) in out.row_mut(i).iter_mut().zip(r.as_slice()) {
                *x += b;
            }
        }
        self.push(out, Op::AddRow { a, row })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, c: Matrix<T>) -> Var {
        let out = self.value(a).hadamard(&c);
        self.push(out, Op::MulConst(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(GELU_C);
        let k = T::lit(GELU_A);
        let half = T::lit(0.5);
        let th = self.value(a).map(|x| fast_tanh(c * (x + k * x * x * x)));
        let out = self.value(a).zip_map(&th, |x, t| half * x * (T::one() + t));
        self.push(out, Op::Gelu(a, th))
    }

    /// Row-wise softmax of `logits` where keys with `key_valid[j] == false`
    /// receive an additive [`MASKED_LOGIT`].
    pub fn masked_softmax(&mut self, logits: Var, key_valid: Option<&[bool]>) -> Var {
        let out = masked_softmax_rows(self.value(logits), key_valid);
        self.push(out, Op::Softmax(logits))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        let out = Matrix::from_fn(m.rows(), len, |i, j| m[(i, start + j)]);
        self.push(out, Op::SliceCols { a, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.as_slice());
            rows += m.rows();
        }
        let out = Matrix::from_vec(rows, cols, data).expect("consistent buffer");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.push(out, Op::SliceRows { a, start })
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let out = self.value(table).select_rows(ids);
        self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Column means, `n × c → 1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let inv = T::one() / T::lit(m.rows() as f64);
        let out = Matrix::from_fn(1, m.cols(), |_, j| {
            (0..m.rows()).map(|i| m[(i, j)]).sum::<T>() * inv
        });
        self.push(out, Op::MeanRows(a))
    }

    /// Repeats a `1 × c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let m = self.value(a);
        debug_assert_eq!(m.rows(), 1);
        let out = Matrix::from_fn(n, m.cols(), |_, j| m[(0, j)]);
        self.push(out, Op::BroadcastRows(a))
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (`1 × c`).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let x = self.value(a);
        let (n, c) = x.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        let inv_c = T::one() / T::lit(c as f64);
        let mut xhat = Matrix::zeros(n, c);
        let mut out = Matrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let r = x.row(i);
            let mean = r.iter().copied().sum::<T>() * inv_c;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let is = T::one() / (var + T::lit(LN_EPS)).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (r[j] - mean) * is;
                xhat[(i, j)] = h;
                out[(i, j)] = h * g[(0, j)] + b[(0, j)];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// `Σ w ⊙ a²` as a `1 × 1` node.
    pub fn weighted_sum_sq(&mut self, a: Var, w: Matrix<T>) -> Var {
        let s = self
            .value(a)
            .as_slice()
            .iter()
            .zip(w.as_slice())
            .map(|(&x, &wi)| wi * x * x)
            .sum();
        self.push(Matrix::filled(1, 1, s), Op::WeightedSumSq { a, w })
    }

    /// Affine layer `x · W + b` with `W: in × out`, `b: 1 × out`.
    pub fn linear(&mut self, x: Var, weight: ParamId, bias: Option<ParamId>) -> Var {
        let w = self.param(weight);
        let y = self.matmul(x, w);
        match bias {
            Some(b) => {
                let b = self.param(b);
                self.add_row(y, b)
            }
            None => y,
        }
    }

    /// Reverse pass from a scalar (`1 × 1`) node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut seed = Matrix::zeros(1, 1);
        seed[(0, 0)] = T::one();
        self.backward_with(loss, seed)
    }

    /// Reverse pass seeded with an arbitrary cotangent for `out`.
    pub fn backward_with(&self, out: Var, seed: Matrix<T>) -> Gradients<T> {
        let n = out.0 + 1;
        let mut grads: Vec<Option<Matrix<T>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(seed);
        let mut param_grads: Vec<Option<Matrix<T>>> =
            (0..self.params.len()).map(|_| None).collect();

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].grad {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Param(p) => accumulate(&mut param_grads[*p], g),
                Op::MatMul { a, b, trans_b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    // y = a·b  : da = g·bᵀ, db = aᵀ·g
                    // y = a·bᵀ : da = g·b,  db = gᵀ·a
                    if self.nodes[a.0].grad {
                        gemm_accumulate(&mut grads[a.0], av.shape(), |out, acc| {
                            gemm_into(&g, false, bv, !*trans_b, out, acc)
                        });
                    }
                    if self.nodes[b.0].grad {
                        gemm_accumulate(&mut grads[b.0], bv.shape(), |out, acc| {
                            if *trans_b {
                                gemm_into(&g, true, av, false, out, acc)
                            } else {
                                gemm_into(av, true, &g, false, out, acc)
                            }
                        });
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], g.scale(-T::one()));
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let da = g.hadamard(self.value(*b));
                    let db = g.hadamard(self.value(*a));
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::AddRow { a, row } => {
                    let db = Matrix::from_fn(1, g.cols(), |_, j| {
                        (0..g.rows()).map(|i| g[(i, j)]).sum()
                    });
                    accumulate(&mut grads[row.0], db);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Scale(a, s) => accumulate(&mut grads[a.0], g.scale(*s)),
                Op::MulConst(a, c) => accumulate(&mut grads[a.0], g.hadamard(c)),
                Op::Gelu(a, th) => {
                    let c = T::lit(GELU_C);
                    let k = T::lit(GELU_A);
                    let half = T::lit(0.5);
                    let three = T::lit(3.0);
                    let x = self.value(*a).as_slice();
                    let data = x
                        .iter()
                        .zip(th.as_slice())
                        .zip(g.as_slice())
                        .map(|((&x, &th), &gy)| {
                            let d = half * (T::one() + th)
                                + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x);
                            gy * d
                        })
                        .collect();
                    let dx = Matrix::from_vec(g.rows(), g.cols(), data).expect("gelu shape");
                    accumulate(&mut grads[a.0], dx);
                }
                Op::Softmax(a) => {
                    let y = self.value(Var(idx));
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.shape(*p);
                        let part = Matrix::from_fn(r, c, |i, j| g[(i, off + j)]);
                        accumulate(&mut grads[p.0], part);
                        off += c;
                    }
                }
                Op::SliceCols { a, start } => {
                    let (r, c) = self.shape(*a);
                    let mut full = Matrix::zeros(r, c);
                    for i in 0..r {
                        full.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads[a.0], full);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let r = self.shape(*p).0;
                        accumulate(&mut grads[p.0], g.slice_rows(off, r));
                        off += r;
                    }
                }
                Op::SliceRows { a, start } => {
                    let (r, c) = self.shape(*a);
                    let mut full = Matrix::zeros(r, c);
                    for i in 0..g.rows() {
                        full.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads[a.0], full);
                }
                Op::GatherRows { table, ids } => {
                    let (r, c) = self.shape(*table);
                    let mut full = Matrix::zeros(r, c);
                    for (k, &i) in ids.iter().enumerate() {
                        for (x, &gv) in full.row_mut(i).iter_mut().zip(g.row(k)) {
                            *x += gv;
                        }
                    }
                    accumulate(&mut grads[table.0], full);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let inv = T::one() / T::lit(r as f64);
                    accumulate(&mut grads[a.0], Matrix::from_fn(r, c, |_, j| g[(0, j)] * inv));
                }
                Op::BroadcastRows(a) => {
                    let db = Matrix::from_fn(1, g.cols(), |_, j| {
                        (0..g.rows()).map(|i| g[(i, j)]).sum()
                    });
                    accumulate(&mut grads[a.0], db);
                }
                Op::LayerNorm {
                    a,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gm = self.value(*gamma);
                    let (n, c) = xhat.shape();
                    let inv_c = T::one() / T::lit(c as f64);
                    let mut dgamma = Matrix::zeros(1, c);
                    let mut dbeta = Matrix::zeros(1, c);
                    let mut dx = Matrix::zeros(n, c);
                    for i in 0..n {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..c {
                            let dh = g[(i, j)] * gm[(0, j)];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[(i, j)];
                            dgamma[(0, j)] += g[(i, j)] * xhat[(i, j)];
                            dbeta[(0, j)] += g[(i, j)];
                        }
                        mean_dh *= inv_c;
                        mean_dh_h *= inv_c;
                        for j in 0..c {
                            let dh = g[(i, j)] * gm[(0, j)];
                            dx[(i, j)] = inv_std[i] * (dh - mean_dh - xhat[(i, j)] * mean_dh_h);
                        }
                    }
                    accumulate(&mut grads[gamma.0], dgamma);
                    accumulate(&mut grads[beta.0], dbeta);
                    accumulate(&mut grads[a.0], dx);
                }
                Op::WeightedSumSq { a, w } => {
                    let s = g[(0, 0)] * T::lit(2.0);
                    let dx = self.value(*a).zip_map(w, |x, wi| s * wi * x);
                    accumulate(&mut grads[a.0], dx);
                }
            }
        }
        Gradients {
            nodes: grads,
            params: param_grads,
        }
    }
}

/// `tanh` through a single `exp`, saturating for large inputs.
fn fast_tanh<T: Scalar>(y: T) -> T {
    let lim = T::lit(15.0);
    if y > lim {
        T::one()
    } else if y < -lim {
        -T::one()
    } else {
        let e = (y + y).exp();
        (e - T::one()) / (e + T::one())
    }
}

fn gemm_accumulate<T: Scalar>(
    slot: &mut Option<Matrix<T>>,
    shape: (usize, usize),
    f: impl FnOnce(&mut Matrix<T>, bool),
) {
    match slot {
        Some(acc) => f(acc, true),
        None => {
            let mut out = Matrix::zeros(shape.0, shape.1);
            f(&mut out, false);
            *slot = Some(out);
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Matrix<T>>, g: Matrix<T>) {
    match slot {
        Some(acc) => acc.axpy(T::one(), &g),
        None => *slot = Some(g),
    }
}

/// Row-wise softmax with an optional key-validity mask.
///
/// Invalid keys receive an additive [`MASKED_LOGIT`] so their weight
/// underflows to zero while fully-masked rows stay finite.
pub fn masked_softmax_rows<T: Scalar>(logits: &Matrix<T>, key_valid: Option<&[bool]>) -> Matrix<T> {
    let (n, c) = logits.shape();
    if let Some(v) = key_valid {
        assert_eq!(v.len(), c, "key mask length mismatch");
    }
    let neg = T::lit(MASKED_LOGIT);
    let mut out = Matrix::zeros(n, c);
    let mut buf = vec![T::zero(); c];
    for i in 0..n {
        let r = logits.row(i);
        for j in 0..c {
            buf[j] = match key_valid {
                Some(v) if !v[j] => r[j] + neg,
                _ => r[j],
            };
        }
        let max = buf.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for x in buf.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        for (o, &x) in out.row_mut(i).iter_mut().zip(&buf) {
            *o = x / z;
        }
    }
    out
}

/// Output of [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Matrix<T>>>,
    params: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to an input leaf, if it influenced the output.
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.params[id.0].as_ref()
    }

    /// Dense per-parameter gradients; untouched parameters get zeros.
    pub fn into_param_grads(self, store: &ParamStore<T>) -> Vec<Matrix<T>> {
        self.params
            .into_iter()
            .zip(&store.values)
            .map(|(g, v)| g.unwrap_or_else(|| Matrix::zeros(v.rows(), v.cols())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut s = seed;
        Matrix::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Central-difference check of d(sum(w ⊙ f(x)))/dx for a single input.
    fn check_unary(f: impl Fn(&mut Tape<'_, f64>, Var) -> Var, x: Matrix<f64>) {
        let store = ParamStore::<f64>::new();
        let (r, c) = x.shape();
        let run = |x: &Matrix<f64>| -> (f64, Option<Matrix<f64>>) {
            let mut tape = Tape::new(&store);
            let xv = tape.input(x.clone());
            let y = f(&mut tape, xv);
            let (yr, yc) = tape.shape(y);
            let w = lcg_matrix(yr, yc, 99);
            let yw = tape.mul_const(y, w.clone());
            let ones = Matrix::filled(yr, yc, 1.0);
            let loss_val: f64 = tape.value(yw).sum();
            let g = tape.backward_with(yw, ones);
            (loss_val, g.wrt(xv).cloned())
        };
        let (_, grad) = run(&x);
        let grad = grad.expect("input gradient");
        let h = 1e-6;
        for i in 0..r {
            for j in 0..c {
                let mut xp = x.clone();
                xp[(i, j)] += h;
                let mut xm = x.clone();
                xm[(i, j)] -= h;
                let fd = (run(&xp).0 - run(&xm).0) / (2.0 * h);
                assert!(
                    (fd - grad[(i, j)]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "({i},{j}) fd={fd} analytic={}",
                    grad[(i, j)]
                );
            }
        }
    }

    #[test]
    fn gelu_gradient() {
        check_unary(|t, x| t.gelu(x), lcg_matrix(3, 4, 1).scale(3.0));
    }

    #[test]
    fn masked_softmax_gradient() {
        let mask = [true, false, true, true];
        check_unary(|t, x| t.masked_softmax(x, Some(&mask)), lcg_matrix(3, 4, 2));
    }

    #[test]
    fn layer_norm_gradient() {
        let mut store = ParamStore::new();
        let g = store.add("g", lcg_matrix(1, 5, 3));
        let b = store.add("b", lcg_matrix(1, 5, 4));
        let store = store;
        let x0 = lcg_matrix(2, 5, 5);
        let run = |x: &Matrix<f64>| {
            let mut tape = Tape::new(&store);
            let xv = tape.input(x.clone());
            let gv = tape.param(g);
            let bv = tape.param(b);
            let y = tape.layer_norm(xv, gv, bv);
            let loss = tape.weighted_sum_sq(y, lcg_matrix(2, 5, 6));
            (tape.value(loss)[(0, 0)], tape.backward(loss).wrt(xv).cloned().unwrap())
        };
        let (_, grad) = run(&x0);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..5 {
                let mut xp = x0.clone();
                xp[(i, j)] += h;
                let mut xm = x0.clone();
                xm[(i, j)] -= h;
                let fd = (run(&xp).0 - run(&xm).0) / (2.0 * h);
                assert!((fd - grad[(i, j)]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn structural_ops_gradient() {
        check_unary(
            |t, x| {
                let a = t.slice_cols(x, 1, 2);
                let b = t.slice_rows(x, 0, 2);
                let bt = t.matmul_t(b, b);
                let m = t.mean_rows(a);
                let mb = t.broadcast_rows(m, 3);
                let cat = t.concat_cols(&[a, mb]);
                let g = t.gather_rows(cat, &[2, 0, 2]);
                let r = t.concat_rows(&[g, x]);
                let s = t.scale(r, 0.7);
                let first = t.slice_rows(s, 0, 2);
                let p = t.matmul(bt, first);
                t.mul(p, p)
            },
            lcg_matrix(3, 4, 7),
        );
    }

    #[test]
    fn masked_keys_get_no_weight() {
        let logits = lcg_matrix(4, 6, 8).scale(50.0);
        let valid = [false, true, false, false, true, false];
        let p = masked_softmax_rows(&logits, Some(&valid));
        for i in 0..4 {
            for j in 0..6 {
                if !valid[j] {
                    assert!(p[(i, j)] < 1e-8);
                }
            }
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

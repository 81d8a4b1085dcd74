//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and returns [`Gradients`] for
//! every parameter and input leaf that influenced the seed.

use std::collections::HashMap;

use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::Scalar;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which keys each query may attend. `allowed(i, j)` means query `i` sees key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(n: usize) -> Self {
        Self {
            n,
            allowed: vec![true; n * n],
        }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                allowed.push(f(i, j));
            }
        }
        Self { n, allowed }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.len();
        let mut allowed = Vec::with_capacity(n * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::dim("attention mask", (n, n), (1, r.len())));
            }
            allowed.extend_from_slice(r);
        }
        Ok(Self { n, allowed })
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.n + key]
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if !(0..self.n).any(|j| self.allowed(i, j)) {
                return Err(Error::DegenerateMask { row: i });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Deterministic: dropout is the identity.
    Eval,
    /// Dropout active; masks drawn from a counter-based stream.
    Train { seed: u64, step: u64 },
}

enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Affine { x: Var, scale: S },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Elu(Var),
    Abs(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<S>,
        rstd: Vec<S>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        group: usize,
        probs: Vec<S>,
    },
    Dropout { x: Var, keep: Vec<S> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherCols { x: Var, idx: Vec<usize> },
    Reshape(Var),
    SumGroups { x: Var, group: usize },
    RowBmm { q: Var, w: Var, n: usize, m: usize },
    RowSum(Var),
    SumAll(Var),
}

struct Node<S> {
    op: Op<S>,
    /// `None` for parameter leaves, which read through the store.
    value: Option<Matrix<S>>,
    requires_grad: bool,
}

pub struct Graph<'p, S> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    dropout_calls: u64,
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(params: &'p ParamStore<S>, mode: Mode) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode,
            dropout_calls: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    pub fn store(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<S> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.tensor(*id),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op<S>, value: Matrix<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, m: Matrix<S>) -> Var {
        self.push(Op::Leaf, m, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, m: Matrix<S>) -> Var {
        self.push(Op::Leaf, m, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = self.value(a).matmul_t(ta, self.value(b), tb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul { a, ta, b, tb }, out, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    /// `x + bias` with a `1 x c` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let bs = self.shape(bias);
        if bs != (1, c) {
            return Err(Error::dim("add_row", (r, c), bs));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).as_slice();
        for row in 0..r {
            for (o, &bv) in out.row_mut(row).iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Op::AddRow { x, bias }, out, rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: S, shift: S) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(Op::Affine { x, scale }, out, rg)
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        self.affine(x, s, S::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| S::one() / (S::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(Op::Sigmoid(x), out, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(Op::Tanh(x), out, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(S::zero()));
        let rg = self.rg(x);
        self.push(Op::Relu(x), out, rg)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > S::zero() { v } else { v.exp() - S::one() });
        let rg = self.rg(x);
        self.push(Op::Elu(x), out, rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        let rg = self.rg(x);
        self.push(Op::Abs(x), out, rg)
    }

    /// Row-wise layer normalization with `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p) != (1, c) {
                return Err(Error::dim("layer_norm", (r, c), self.shape(p)));
            }
        }
        let eps = S::from_f64_lossy(LN_EPS);
        let inv_c = S::one() / S::from_usize(c).unwrap();
        let xv = self.value(x);
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let mut xhat = Matrix::zeros(r, c);
        let mut out = Matrix::zeros(r, c);
        let mut rstd = Vec::with_capacity(r);
        for row in 0..r {
            let xr = xv.row(row);
            let mean = xr.iter().fold(S::zero(), |a, &v| a + v) * inv_c;
            let var = xr.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_c;
            let rs = S::one() / (var + eps).sqrt();
            rstd.push(rs);
            let hr = xhat.row_mut(row);
            for j in 0..c {
                hr[j] = (xr[j] - mean) * rs;
            }
            let or = out.row_mut(row);
            for j in 0..c {
                or[j] = xhat[(row, j)] * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            out,
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over independent groups of
    /// `group` consecutive rows. `q`, `k`, `v` are already projected.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        group: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (rows, d) = self.shape(q);
        for other in [k, v] {
            if self.shape(other) != (rows, d) {
                return Err(Error::dim("attention", (rows, d), self.shape(other)));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        if group == 0 || rows % group != 0 {
            return Err(Error::dim("attention groups", (rows, d), (group, d)));
        }
        if let Some(m) = mask {
            if m.size() != group {
                return Err(Error::dim("attention mask", (group, group), (m.size(), m.size())));
            }
            m.validate()?;
        }
        let dh = d / heads;
        let n = group;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let groups = rows / n;
        let mut probs = vec![S::zero(); groups * heads * n * n];
        let mut out = Matrix::zeros(rows, d);
        let mut scores = vec![S::zero(); n];
        for g in 0..groups {
            let base = g * n;
            for h in 0..heads {
                let off = h * dh;
                let pblock = (g * heads + h) * n * n;
                for i in 0..n {
                    let qi = &qv.row(base + i)[off..off + dh];
                    let mut max = S::neg_infinity();
                    for j in 0..n {
                        if mask.is_none_or(|m| m.allowed(i, j)) {
                            let kj = &kv.row(base + j)[off..off + dh];
                            let s = dot(qi, kj) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    let mut denom = S::zero();
                    for j in 0..n {
                        if mask.is_none_or(|m| m.allowed(i, j)) {
                            let e = (scores[j] - max).exp();
                            probs[pblock + i * n + j] = e;
                            denom += e;
                        }
                    }
                    let inv = S::one() / denom;
                    for j in 0..n {
                        probs[pblock + i * n + j] *= inv;
                    }
                    let orow = &mut out.row_mut(base + i)[off..off + dh];
                    for j in 0..n {
                        let p = probs[pblock + i * n + j];
                        if p != S::zero() {
                            let vj = &vv.row(base + j)[off..off + dh];
                            for (o, &x) in orow.iter_mut().zip(vj) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                group,
                probs,
            },
            out,
            rg,
        ))
    }

    /// Attention weights of the most recent attention node `att`, laid out as
    /// `[group][head][query][key]`.
    pub fn attention_weights(&self, att: Var) -> Option<&[S]> {
        match &self.nodes[att.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Inverted dropout. Identity in eval mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, layer_key: u64) -> Var {
        let Mode::Train { seed, step } = self.mode else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        let keep_scale = S::from_f64_lossy(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let keep: Vec<S> = (0..xv.len() as u64)
            .map(|i| {
                if counter_uniform(seed, layer_key, step, call, i) < rate {
                    S::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let mut out = xv.clone();
        for (o, &kf) in out.as_mut_slice().iter_mut().zip(&keep) {
            *o *= kf;
        }
        let rg = self.rg(x);
        self.push(Op::Dropout { x, keep }, out, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(Error::dim("concat_cols", (rows, cols), s));
            }
            cols += s.1;
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::dim("slice_cols", (r, c), (start, len)));
        }
        let xv = self.value(x);
        let out = Matrix::from_fn(r, len, |i, j| xv[(i, start + j)]);
        let rg = self.rg(x);
        Ok(self.push(Op::SliceCols { x, start }, out, rg))
    }

    /// Picks column `idx[r]` of every row `r`, giving a `rows x 1` column.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if idx.len() != r || idx.iter().any(|&i| i >= c) {
            return Err(Error::dim("gather_cols", (r, c), (idx.len(), 1)));
        }
        let xv = self.value(x);
        let out = Matrix::from_fn(r, 1, |i, _| xv[(i, idx[i])]);
        let rg = self.rg(x);
        Ok(self.push(
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
            out,
            rg,
        ))
    }

    /// Row-major reinterpretation with the same element count.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != rows * cols {
            return Err(Error::dim("reshape", xv.shape(), (rows, cols)));
        }
        let out = Matrix::from_vec(rows, cols, xv.as_slice().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), out, rg))
    }

    /// Sums each block of `group` consecutive rows into one row.
    pub fn sum_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if group == 0 || r % group != 0 {
            return Err(Error::dim("sum_groups", (r, c), (group, c)));
        }
        let xv = self.value(x);
        let mut out = Matrix::zeros(r / group, c);
        for row in 0..r {
            let dst = row / group;
            for j in 0..c {
                out[(dst, j)] += xv[(row, j)];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::SumGroups { x, group }, out, rg))
    }

    /// Per-row vector-matrix product: `out[b, j] = sum_i q[b, i] * w[b, i*m + j]`
    /// with `q: B x n` and `w: B x (n*m)`.
    pub fn row_bmm(&mut self, q: Var, w: Var, m: usize) -> Result<Var> {
        let (b, n) = self.shape(q);
        let ws = self.shape(w);
        if ws != (b, n * m) {
            return Err(Error::dim("row_bmm", (b, n * m), ws));
        }
        let (qv, wv) = (self.value(q), self.value(w));
        let out = Matrix::from_fn(b, m, |r, j| {
            (0..n).fold(S::zero(), |acc, i| acc + qv[(r, i)] * wv[(r, i * m + j)])
        });
        let rg = self.rg(q) || self.rg(w);
        Ok(self.push(Op::RowBmm { q, w, n, m }, out, rg))
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Matrix::from_fn(xv.rows(), 1, |r, _| {
            xv.row(r).iter().fold(S::zero(), |a, &v| a + v)
        });
        let rg = self.rg(x);
        self.push(Op::RowSum(x), out, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(x).sum());
        let rg = self.rg(x);
        self.push(Op::SumAll(x), out, rg)
    }

    /// Reverse pass seeded with ones at `seed` (the gradient of `sum(seed)`).
    pub fn backward(&self, seed: Var) -> Gradients<S> {
        let n = seed.0 + 1;
        let mut grads: Vec<Option<Matrix<S>>> = (0..n).map(|_| None).collect();
        let (r, c) = self.shape(seed);
        grads[seed.0] = Some(Matrix::filled(r, c, S::one()));
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params = HashMap::new();
        for (&id, &v) in &self.param_vars {
            if v.0 < n {
                if let Some(g) = grads[v.0].take() {
                    params.insert(id, g);
                }
            }
        }
        Gradients { nodes: grads, params }
    }

    fn propagate(&self, idx: usize, g: &Matrix<S>, grads: &mut [Option<Matrix<S>>]) {
        let node = &self.nodes[idx];
        let out = node.value.as_ref();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, ta, b, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let da = if *ta {
                        bv.matmul_t(*tb, g, true)
                    } else {
                        g.matmul_t(false, bv, !*tb)
                    };
                    acc(grads, *a, da.expect("matmul grad shapes"));
                }
                if self.rg(*b) {
                    let db = if *tb {
                        g.matmul_t(true, av, *ta)
                    } else {
                        av.matmul_t(!*ta, g, false)
                    };
                    acc(grads, *b, db.expect("matmul grad shapes"));
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
                self.acc_if(grads, *a, || g.zip_map(bv, |x, y| x * y));
                self.acc_if(grads, *b, || g.zip_map(av, |x, y| x * y));
            }
            Op::AddRow { x, bias } => {
                self.acc_if(grads, *x, || g.clone());
                self.acc_if(grads, *bias, || col_sums(g));
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                self.acc_if(grads, *x, || g.map(|v| v * s));
            }
            Op::Sigmoid(x) => {
                let y = out.unwrap();
                self.acc_if(grads, *x, || g.zip_map(y, |d, s| d * s * (S::one() - s)));
            }
            Op::Tanh(x) => {
                let y = out.unwrap();
                self.acc_if(grads, *x, || g.zip_map(y, |d, t| d * (S::one() - t * t)));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.acc_if(grads, *x, || {
                    g.zip_map(xv, |d, v| if v > S::zero() { d } else { S::zero() })
                });
            }
            Op::Elu(x) => {
                let y = out.unwrap();
                let xv = self.value(*x);
                self.acc_if(grads, *x, || {
                    let mut dx = g.zip_map(y, |d, yy| d * (yy + S::one()));
                    for (dv, (&d, &v)) in dx
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice().iter().zip(xv.as_slice()))
                    {
                        if v > S::zero() {
                            *dv = d;
                        }
                    }
                    dx
                });
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                self.acc_if(grads, *x, || {
                    g.zip_map(xv, |d, v| {
                        if v > S::zero() {
                            d
                        } else if v < S::zero() {
                            -d
                        } else {
                            S::zero()
                        }
                    })
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma).as_slice();
                let (r, c) = g.shape();
                if self.rg(*gamma) {
                    let dg = Matrix::from_fn(1, c, |_, j| {
                        (0..r).fold(S::zero(), |a, i| a + g[(i, j)] * xhat[(i, j)])
                    });
                    acc(grads, *gamma, dg);
                }
                self.acc_if(grads, *beta, || col_sums(g));
                if self.rg(*x) {
                    let inv_c = S::one() / S::from_usize(c).unwrap();
                    let mut dx = Matrix::zeros(r, c);
                    for i in 0..r {
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for j in 0..c {
                            let d = g[(i, j)] * gv[j];
                            mean_d += d;
                            mean_dx += d * xhat[(i, j)];
                        }
                        mean_d *= inv_c;
                        mean_dx *= inv_c;
                        for j in 0..c {
                            let d = g[(i, j)] * gv[j];
                            dx[(i, j)] = rstd[i] * (d - mean_d - xhat[(i, j)] * mean_dx);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                group,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *heads, *group, probs, g);
                if self.rg(*q) {
                    acc(grads, *q, dq);
                }
                if self.rg(*k) {
                    acc(grads, *k, dk);
                }
                if self.rg(*v) {
                    acc(grads, *v, dv);
                }
            }
            Op::Dropout { x, keep } => {
                self.acc_if(grads, *x, || {
                    let mut dx = g.clone();
                    for (d, &kf) in dx.as_mut_slice().iter_mut().zip(keep) {
                        *d *= kf;
                    }
                    dx
                });
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    if self.rg(p) {
                        let dp = Matrix::from_fn(pr, pc, |i, j| g[(i, c0 + j)]);
                        acc(grads, p, dp);
                    }
                    c0 += pc;
                }
            }
            Op::SliceCols { x, start } => {
                self.acc_if(grads, *x, || {
                    let (r, c) = self.shape(*x);
                    let mut dx = Matrix::zeros(r, c);
                    for i in 0..r {
                        dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    dx
                });
            }
            Op::GatherCols { x, idx } => {
                self.acc_if(grads, *x, || {
                    let (r, c) = self.shape(*x);
                    let mut dx = Matrix::zeros(r, c);
                    for (i, &j) in idx.iter().enumerate() {
                        dx[(i, j)] = g[(i, 0)];
                    }
                    dx
                });
            }
            Op::Reshape(x) => {
                self.acc_if(grads, *x, || {
                    let (r, c) = self.shape(*x);
                    Matrix::from_vec(r, c, g.as_slice().to_vec()).unwrap()
                });
            }
            Op::SumGroups { x, group } => {
                self.acc_if(grads, *x, || {
                    let (r, c) = self.shape(*x);
                    Matrix::from_fn(r, c, |i, j| g[(i / group, j)])
                });
            }
            Op::RowBmm { q, w, n, m } => {
                let (qv, wv) = (self.value(*q), self.value(*w));
                let (n, m) = (*n, *m);
                self.acc_if(grads, *q, || {
                    Matrix::from_fn(qv.rows(), n, |b, i| {
                        (0..m).fold(S::zero(), |a, j| a + g[(b, j)] * wv[(b, i * m + j)])
                    })
                });
                self.acc_if(grads, *w, || {
                    Matrix::from_fn(wv.rows(), n * m, |b, col| g[(b, col % m)] * qv[(b, col / m)])
                });
            }
            Op::RowSum(x) => {
                self.acc_if(grads, *x, || {
                    let (r, c) = self.shape(*x);
                    Matrix::from_fn(r, c, |i, _| g[(i, 0)])
                });
            }
            Op::SumAll(x) => {
                self.acc_if(grads, *x, || {
                    let (r, c) = self.shape(*x);
                    Matrix::filled(r, c, g[(0, 0)])
                });
            }
        }
    }

    fn acc_if(&self, grads: &mut [Option<Matrix<S>>], v: Var, f: impl FnOnce() -> Matrix<S>) {
        if self.rg(v) {
            acc(grads, v, f());
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        n: usize,
        probs: &[S],
        g: &Matrix<S>,
    ) -> (Matrix<S>, Matrix<S>, Matrix<S>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.shape();
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let mut dq = Matrix::zeros(rows, d);
        let mut dk = Matrix::zeros(rows, d);
        let mut dv = Matrix::zeros(rows, d);
        let mut dp = vec![S::zero(); n];
        for grp in 0..rows / n {
            let base = grp * n;
            for h in 0..heads {
                let off = h * dh;
                let pblock = (grp * heads + h) * n * n;
                for i in 0..n {
                    let gi = &g.row(base + i)[off..off + dh];
                    let p = &probs[pblock + i * n..pblock + (i + 1) * n];
                    let mut weighted = S::zero();
                    for j in 0..n {
                        let vj = &vv.row(base + j)[off..off + dh];
                        dp[j] = dot(gi, vj);
                        weighted += dp[j] * p[j];
                        if p[j] != S::zero() {
                            let dvj = &mut dv.row_mut(base + j)[off..off + dh];
                            for (o, &x) in dvj.iter_mut().zip(gi) {
                                *o += p[j] * x;
                            }
                        }
                    }
                    for j in 0..n {
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        if ds == S::zero() {
                            continue;
                        }
                        let kj = &kv.row(base + j)[off..off + dh];
                        let dqi = &mut dq.row_mut(base + i)[off..off + dh];
                        for (o, &x) in dqi.iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        let qi = &qv.row(base + i)[off..off + dh];
                        let dkj = &mut dk.row_mut(base + j)[off..off + dh];
                        for (o, &x) in dkj.iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn acc<S: Scalar>(grads: &mut [Option<Matrix<S>>], v: Var, g: Matrix<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sums<S: Scalar>(g: &Matrix<S>) -> Matrix<S> {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.as_mut_slice().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Result of a reverse pass.
pub struct Gradients<S> {
    nodes: Vec<Option<Matrix<S>>>,
    params: HashMap<ParamId, Matrix<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to an input leaf or intermediate node.
    pub fn wrt(&self, v: Var) -> Option<&Matrix<S>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix<S>> {
        self.params.get(&id)
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<S>) {
        let mut ids: Vec<_> = self.params.keys().copied().collect();
        ids.sort();
        for id in ids {
            store.get_mut(id).accumulate(&self.params[&id]);
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform `[0, 1)` draw that is a pure function of its key.
pub fn counter_uniform(seed: u64, layer: u64, step: u64, call: u64, index: u64) -> f64 {
    let mut h = splitmix64(seed);
    for part in [layer, step, call, index] {
        h = splitmix64(h ^ part);
    }
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn dropout_rate_and_rescale() {
        let s = store();
        let mut g = Graph::new(&s, Mode::Train { seed: 7, step: 3 });
        let x = g.constant(Matrix::filled(1, 100_000, 1.0));
        let y = g.dropout(x, 0.1, 1);
        let vals = g.value(y).as_slice();
        let dropped = vals.iter().filter(|&&v| v == 0.0).count() as f64 / vals.len() as f64;
        assert!((dropped - 0.1).abs() <= 0.01, "dropped fraction {dropped}");
        for &v in vals.iter().filter(|&&v| v != 0.0) {
            assert!((v - 1.0 / 0.9).abs() < 1e-12);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 1.0).abs() < 0.02);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let s = store();
        let mut g = Graph::new(&s, Mode::Eval);
        let x = g.constant(Matrix::filled(2, 3, 2.5));
        let y = g.dropout(x, 0.5, 0);
        assert_eq!(x, y);
    }

    #[test]
    fn masked_attention_rows_sum_to_one() {
        let s = store();
        let mut g = Graph::new(&s, Mode::Eval);
        let x = g.input(Matrix::from_fn(6, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.6));
        let mask = AttentionMask::from_fn(3, |i, j| i == j || j == 0);
        let a = g.attention(x, x, x, 2, 3, Some(&mask)).unwrap();
        let w = g.attention_weights(a).unwrap();
        for grp in 0..2 {
            for h in 0..2 {
                for i in 0..3 {
                    let row = &w[((grp * 2 + h) * 3 + i) * 3..][..3];
                    let total: f64 = row.iter().sum();
                    assert!((total - 1.0).abs() < 1e-12);
                    for j in 0..3 {
                        if !mask.allowed(i, j) {
                            assert_eq!(row[j], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn degenerate_mask_rejected() {
        let s = store();
        let mut g = Graph::new(&s, Mode::Eval);
        let x = g.input(Matrix::zeros(2, 4));
        let mask = AttentionMask::from_fn(2, |i, _| i == 0);
        assert!(matches!(
            g.attention(x, x, x, 1, 2, Some(&mask)),
            Err(Error::DegenerateMask { row: 1 })
        ));
        assert!(matches!(g.attention(x, x, x, 3, 2, None), Err(Error::Config(_))));
    }
}

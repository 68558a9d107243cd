//! Reverse-mode differentiation over dense rank-2 arrays.
//!
//! A [`Tape`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Every operation appends a node holding its value and enough context to
//! push gradients back to its inputs. [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a valid topological order because a node
//! can only reference nodes created before it.
//!
//! A tape built with [`Tape::inference`] records values only; its nodes carry
//! no parent links and `backward` on it is an error.

use std::collections::HashMap;

use rand::Rng;

use super::{Array, Gradients, ParamId, ParamStore, Scalar};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Clamp applied to probabilities inside log-likelihood style losses.
pub const PROB_CLAMP: f64 = 1e-10;
/// Variance floor of layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    SumCols(Var),
    SumAll(Var),
    GroupMax { x: Var, argmax: Vec<usize> },
    GroupMean { x: Var, group: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    ScaleRows { x: Var, w: Vec<T> },
    Blend { new: Var, old: Var, mask: Vec<bool> },
    Dropout { x: Var, mask: Vec<T> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    LstmCell { z: Var, c_prev: Var },
    Bce { p: Var, labels: Vec<T> },
    Reshape(Var),
    EdgeScores { q: Var, k: Var, e: Var, types: Vec<usize> },
    SymKl { a: Var, b: Var },
}

struct Node<T> {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Array<T>>,
    op: Op<T>,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    recording: bool,
}

fn shape_err<T: Scalar>(op: &'static str, a: &Array<T>, b: &Array<T>) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(0.044715);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let dinner = k * (T::one() + three * c * x * x);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (value, deriv)
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    p.max(lo).min(hi)
}

#[inline]
fn in_open_clamp<T: Scalar>(p: T) -> bool {
    let lo = T::lit(PROB_CLAMP);
    p > lo && p < T::one() - lo
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// Tape that records everything needed for [`Tape::backward`].
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            recording: true,
        }
    }

    /// Value-only tape; nothing is kept for a backward pass.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self {
            recording: false,
            ..Self::new(params)
        }
    }

    /// Hash of every discrete choice made so far (max positions, gathered
    /// and scattered indices, blend masks, edge types). Two evaluations with
    /// equal signatures took the same piecewise-smooth branch.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::GroupMax { argmax, .. } => (i, argmax).hash(&mut h),
                Op::GatherRows { idx, .. } | Op::ScatterRows { idx, .. } => (i, idx).hash(&mut h),
                Op::Blend { mask, .. } => (i, mask).hash(&mut h),
                Op::EdgeScores { types, .. } => (i, types).hash(&mut h),
                _ => {}
            }
        }
        self.nodes.len().hash(&mut h);
        h.finish()
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array<T>) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    fn zip_same(
        &self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Array<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Array::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |p, q| p + q)?;
        self.push(out, Op::Add(a, b), "add")
    }

    /// `m×n` plus a `1×n` row broadcast over every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(shape_err("add_row", x, r));
        }
        let n = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + r.data()[i % n])
            .collect();
        let out = Array::matrix(x.rows(), n, data)?;
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |p, q| p - q)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |p, q| p * q)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine(x, scale), "affine")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.affine(x, s, T::zero())
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| T::one() - v);
        self.push(out, Op::Affine(x, -T::one()), "one_minus")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(T::tanh);
        self.push(out, Op::Tanh(x), "tanh")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        self.push(out, Op::Gelu(x), "gelu")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (m, n) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = v.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&z| (z - mx).exp()).collect();
            let total: T = exps.iter().copied().sum();
            data.extend(exps.into_iter().map(|e| e / total));
        }
        let out = Array::matrix(m, n, data)?;
        self.push(out, Op::SoftmaxRows(x), "softmax")
    }

    /// `m×n -> m×1` row sums.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = (0..v.rows()).map(|r| v.row(r).iter().copied().sum()).collect();
        let out = Array::column(data);
        self.push(out, Op::SumCols(x), "sum_cols")
    }

    /// Row-wise inner product of two equally shaped matrices, `m×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let prod = self.mul(a, b)?;
        self.sum_cols(prod)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Array::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), "sum")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, T::one() / T::count(n.max(1)))
    }

    /// Column-wise max over consecutive blocks of `group` rows:
    /// `(g*group)×n -> g×n`. Ties resolve to the first row.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let v = self.value(x);
        if group == 0 || !v.rows().is_multiple_of(group) {
            return Err(Error::Shape {
                op: "group_max",
                left: v.shape().to_vec(),
                right: vec![group],
            });
        }
        let (n, g) = (v.cols(), v.rows() / group);
        let mut data = Vec::with_capacity(g * n);
        let mut argmax = Vec::with_capacity(g * n);
        for b in 0..g {
            for c in 0..n {
                let mut best = b * group;
                for r in b * group + 1..(b + 1) * group {
                    if v.get(r, c) > v.get(best, c) {
                        best = r;
                    }
                }
                data.push(v.get(best, c));
                argmax.push(best);
            }
        }
        let out = Array::matrix(g, n, data)?;
        self.push(out, Op::GroupMax { x, argmax }, "group_max")
    }

    /// Column-wise mean over consecutive blocks of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let v = self.value(x);
        if group == 0 || !v.rows().is_multiple_of(group) {
            return Err(Error::Shape {
                op: "group_mean",
                left: v.shape().to_vec(),
                right: vec![group],
            });
        }
        let (n, g) = (v.cols(), v.rows() / group);
        let inv = T::one() / T::count(group);
        let mut data = vec![T::zero(); g * n];
        for b in 0..g {
            for r in b * group..(b + 1) * group {
                for c in 0..n {
                    data[b * n + c] = data[b * n + c] + v.get(r, c);
                }
            }
        }
        for d in &mut data {
            *d = *d * inv;
        }
        let out = Array::matrix(g, n, data)?;
        self.push(out, Op::GroupMean { x, group }, "group_mean")
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.value(xs[0]).rows();
        let mut cols = 0;
        for &x in xs {
            let v = self.value(x);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(xs[0]), v));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let out = Array::matrix(rows, cols, data)?;
        self.push(out, Op::ConcatCols(xs.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.value(xs[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let v = self.value(x);
            if v.cols() != cols {
                return Err(shape_err("concat_rows", self.value(xs[0]), v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Array::matrix(rows, cols, data)?;
        self.push(out, Op::ConcatRows(xs.to_vec()), "concat_rows")
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x);
        if start > end || end > v.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                left: v.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let out = Array::from_fn(v.rows(), end - start, |r, c| v.get(r, start + c));
        self.push(out, Op::SliceCols { x, start }, "slice_cols")
    }

    /// Rows picked by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::Shape {
                op: "gather_rows",
                left: v.shape().to_vec(),
                right: vec![bad],
            });
        }
        let n = v.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        let out = Array::matrix(idx.len(), n, data)?;
        self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Places row `k` of `x` at row `idx[k]` of a zero `rows×n` matrix.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let v = self.value(x);
        if idx.len() != v.rows() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::Shape {
                op: "scatter_rows",
                left: v.shape().to_vec(),
                right: vec![rows, idx.len()],
            });
        }
        let n = v.cols();
        let mut out = Array::zeros(rows, n);
        for (k, &i) in idx.iter().enumerate() {
            out.data_mut()[i * n..(i + 1) * n].copy_from_slice(v.row(k));
        }
        self.push(
            out,
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
            "scatter_rows",
        )
    }

    /// Multiplies row `r` by the constant `w[r]`.
    pub fn scale_rows(&mut self, x: Var, w: &[T]) -> Result<Var> {
        let v = self.value(x);
        if w.len() != v.rows() {
            return Err(Error::Shape {
                op: "scale_rows",
                left: v.shape().to_vec(),
                right: vec![w.len()],
            });
        }
        let n = v.cols();
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a * w[i / n])
            .collect();
        let out = Array::new(v.shape().to_vec(), data)?;
        self.push(
            out,
            Op::ScaleRows {
                x,
                w: w.to_vec(),
            },
            "scale_rows",
        )
    }

    /// Row `r` comes from `new` where `mask[r]`, else from `old`. Exact copy.
    pub fn blend_rows(&mut self, new: Var, old: Var, mask: &[bool]) -> Result<Var> {
        let (a, b) = (self.value(new), self.value(old));
        if a.shape() != b.shape() || mask.len() != a.rows() {
            return Err(shape_err("blend_rows", a, b));
        }
        let n = a.cols();
        let mut data = Vec::with_capacity(a.len());
        for (r, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m { a.row(r) } else { b.row(r) });
        }
        let out = Array::matrix(a.rows(), n, data)?;
        self.push(
            out,
            Op::Blend {
                new,
                old,
                mask: mask.to_vec(),
            },
            "blend_rows",
        )
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let v = self.value(x);
        let mask: Vec<T> = (0..v.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Array::new(v.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { x, mask }, "dropout")
    }

    /// Row-wise layer normalisation with learned `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (v, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let n = v.cols();
        if g.len() != n || b.len() != n {
            return Err(shape_err("layer_norm", v, g));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = Vec::with_capacity(v.len());
        let mut inv_std = Vec::with_capacity(v.rows());
        let mut data = Vec::with_capacity(v.len());
        for r in 0..v.rows() {
            let row = v.row(r);
            let mean = row.iter().copied().sum::<T>() / T::count(n);
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / T::count(n);
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (c, &a) in row.iter().enumerate() {
                let h = (a - mean) * is;
                xhat.push(h);
                data.push(h * g.data()[c] + b.data()[c]);
            }
        }
        let out = Array::matrix(v.rows(), n, data)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Fused LSTM cell. `z` is `B×4H` pre-activations ordered
    /// `[input, forget, candidate, output]`, `c_prev` is `B×H`.
    /// Returns `B×2H` holding `[h, c]`.
    pub fn lstm_cell(&mut self, z: Var, c_prev: Var) -> Result<Var> {
        let (zv, cv) = (self.value(z), self.value(c_prev));
        let h = cv.cols();
        if zv.cols() != 4 * h || zv.rows() != cv.rows() {
            return Err(shape_err("lstm_cell", zv, cv));
        }
        let b = zv.rows();
        let mut data = Vec::with_capacity(b * 2 * h);
        for r in 0..b {
            let zr = zv.row(r);
            let cr = cv.row(r);
            let mut c_new = Vec::with_capacity(h);
            let mut h_new = Vec::with_capacity(h);
            for j in 0..h {
                let i_g = sigmoid(zr[j]);
                let f_g = sigmoid(zr[h + j]);
                let g_g = zr[2 * h + j].tanh();
                let o_g = sigmoid(zr[3 * h + j]);
                let c = f_g * cr[j] + i_g * g_g;
                c_new.push(c);
                h_new.push(o_g * c.tanh());
            }
            data.extend(h_new);
            data.extend(c_new);
        }
        let out = Array::matrix(b, 2 * h, data)?;
        self.push(out, Op::LstmCell { z, c_prev }, "lstm_cell")
    }

    /// Same data, new `rows×cols` view.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshape(vec![rows, cols])?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// Edge-modulated bilinear scores. With `q: K×d`, `k: A×d`, `e: B×d` and
    /// `types` an `A×K` row-major table of rows of `e`, returns the `K×A`
    /// matrix `s[j][a] = sum_d q[j][d] * k[a][d] * e[types[a][j]][d]`.
    pub fn edge_scores(&mut self, q: Var, k: Var, e: Var, types: &[usize]) -> Result<Var> {
        let (qv, kv, ev) = (self.value(q), self.value(k), self.value(e));
        let d = qv.cols();
        let (nk, na) = (qv.rows(), kv.rows());
        if kv.cols() != d || ev.cols() != d {
            return Err(shape_err("edge_scores", qv, kv));
        }
        if types.len() != na * nk {
            return Err(Error::Shape {
                op: "edge_scores",
                left: vec![na, nk],
                right: vec![types.len()],
            });
        }
        if let Some(&bad) = types.iter().find(|&&t| t >= ev.rows()) {
            return Err(Error::BucketOutOfRange {
                bucket: bad,
                count: ev.rows(),
            });
        }
        let mut data = Vec::with_capacity(nk * na);
        for j in 0..nk {
            let qr = qv.row(j);
            for a in 0..na {
                let kr = kv.row(a);
                let er = ev.row(types[a * nk + j]);
                let mut s = T::zero();
                for c in 0..d {
                    s = s + qr[c] * kr[c] * er[c];
                }
                data.push(s);
            }
        }
        let out = Array::matrix(nk, na, data)?;
        self.push(
            out,
            Op::EdgeScores {
                q,
                k,
                e,
                types: types.to_vec(),
            },
            "edge_scores",
        )
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 labels,
    /// with probabilities clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce_mean(&mut self, p: Var, labels: &[T]) -> Result<Var> {
        let v = self.value(p);
        if labels.len() != v.len() {
            return Err(Error::Shape {
                op: "bce",
                left: v.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let n = T::count(v.len().max(1));
        let total: T = v
            .data()
            .iter()
            .zip(labels)
            .map(|(&pi, &gi)| {
                let q = clamp_prob(pi);
                -(gi * q.ln() + (T::one() - gi) * (T::one() - q).ln())
            })
            .sum();
        let out = Array::scalar(total / n);
        self.push(
            out,
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            "bce",
        )
    }

    /// Mean over entries of the halved symmetric KL divergence between
    /// Bernoulli(a_i) and Bernoulli(b_i).
    pub fn sym_bernoulli_kl(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("sym_kl", x, y));
        }
        let n = T::count(x.len().max(1));
        let half = T::lit(0.5);
        let total: T = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| {
                let (p, q) = (clamp_prob(p), clamp_prob(q));
                let kl_pq = p * (p / q).ln() + (T::one() - p) * ((T::one() - p) / (T::one() - q)).ln();
                let kl_qp = q * (q / p).ln() + (T::one() - q) * ((T::one() - q) / (T::one() - p)).ln();
                half * (kl_pq + kl_qp)
            })
            .sum();
        let out = Array::scalar(total / n);
        self.push(out, Op::SymKl { a, b }, "sym_kl")
    }

    /// Propagates gradients from a scalar `loss` back to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::Config("backward on an inference tape".into()));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Array::scalar(T::one()));

        let mut param_grads: Vec<Option<Array<T>>> = vec![None; self.params.len()];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, g, &mut grads, &mut param_grads)?;
        }
        let shapes = self
            .params
            .ids()
            .map(|id| {
                let a = self.params.get(id);
                (a.rows(), a.cols())
            })
            .collect();
        Ok(Gradients::new(param_grads, shapes))
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: Array<T>,
        grads: &mut [Option<Array<T>>],
        param_grads: &mut [Option<Array<T>>],
    ) -> Result<()> {
        let acc = |grads: &mut [Option<Array<T>>], v: Var, d: Array<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        let out = || self.nodes[idx].value.as_ref().expect("op node has value");
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Param(id) => match &mut param_grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            },
            Op::MatMul(a, b) => {
                let da = g.matmul(&self.value(*b).transpose())?;
                let db = self.value(*a).transpose().matmul(&g)?;
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g);
            }
            Op::AddRow(a, row) => {
                let n = g.cols();
                let mut dr = vec![T::zero(); n];
                for (i, &v) in g.data().iter().enumerate() {
                    dr[i % n] = dr[i % n] + v;
                }
                acc(grads, *row, Array::matrix(1, n, dr)?);
                acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                acc(grads, *b, g.map(|v| -v));
                acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let da = zip(&g, y, |d, q| d * q)?;
                let db = zip(&g, x, |d, p| d * p)?;
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Affine(x, s) => {
                let s = *s;
                acc(grads, *x, g.map(|d| d * s));
            }
            Op::Sigmoid(x) => {
                let d = zip(&g, out(), |d, y| d * y * (T::one() - y))?;
                acc(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = zip(&g, out(), |d, y| d * (T::one() - y * y))?;
                acc(grads, *x, d);
            }
            Op::Gelu(x) => {
                let d = zip(&g, self.value(*x), |d, v| d * gelu_parts(v).1)?;
                acc(grads, *x, d);
            }
            Op::SoftmaxRows(x) => {
                let y = out();
                let (m, n) = (y.rows(), y.cols());
                let mut d = Vec::with_capacity(m * n);
                for r in 0..m {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                acc(grads, *x, Array::matrix(m, n, d)?);
            }
            Op::SumCols(x) => {
                let v = self.value(*x);
                let d = Array::from_fn(v.rows(), v.cols(), |r, _| g.data()[r]);
                acc(grads, *x, d);
            }
            Op::SumAll(x) => {
                let v = self.value(*x);
                acc(grads, *x, Array::full(v.rows(), v.cols(), g.item()));
            }
            Op::GroupMax { x, argmax } => {
                let v = self.value(*x);
                let n = v.cols();
                let mut d = Array::zeros(v.rows(), n);
                for (k, &src) in argmax.iter().enumerate() {
                    let c = k % n;
                    d.data_mut()[src * n + c] = d.data_mut()[src * n + c] + g.data()[k];
                }
                acc(grads, *x, d);
            }
            Op::GroupMean { x, group } => {
                let v = self.value(*x);
                let inv = T::one() / T::count(*group);
                let n = v.cols();
                let d = Array::from_fn(v.rows(), n, |r, c| g.get(r / group, c) * inv);
                acc(grads, *x, d);
            }
            Op::ConcatCols(xs) => {
                let mut start = 0;
                for &x in xs {
                    let w = self.value(x).cols();
                    let d = Array::from_fn(g.rows(), w, |r, c| g.get(r, start + c));
                    acc(grads, x, d);
                    start += w;
                }
            }
            Op::ConcatRows(xs) => {
                let n = g.cols();
                let mut start = 0;
                for &x in xs {
                    let h = self.value(x).rows();
                    let d = Array::matrix(h, n, g.data()[start * n..(start + h) * n].to_vec())?;
                    acc(grads, x, d);
                    start += h;
                }
            }
            Op::SliceCols { x, start } => {
                let v = self.value(*x);
                let w = g.cols();
                let d = Array::from_fn(v.rows(), v.cols(), |r, c| {
                    if c >= *start && c < start + w {
                        g.get(r, c - start)
                    } else {
                        T::zero()
                    }
                });
                acc(grads, *x, d);
            }
            Op::GatherRows { x, idx } => {
                let v = self.value(*x);
                let n = v.cols();
                let mut d = Array::zeros(v.rows(), n);
                for (k, &i) in idx.iter().enumerate() {
                    let dst = &mut d.data_mut()[i * n..(i + 1) * n];
                    for (a, &b) in dst.iter_mut().zip(g.row(k)) {
                        *a = *a + b;
                    }
                }
                acc(grads, *x, d);
            }
            Op::ScatterRows { x, idx } => {
                let n = g.cols();
                let mut data = Vec::with_capacity(idx.len() * n);
                for &i in idx {
                    data.extend_from_slice(g.row(i));
                }
                acc(grads, *x, Array::matrix(idx.len(), n, data)?);
            }
            Op::ScaleRows { x, w } => {
                let n = g.cols();
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| d * w[i / n])
                    .collect();
                acc(grads, *x, Array::new(g.shape().to_vec(), data)?);
            }
            Op::Blend { new, old, mask } => {
                let n = g.cols();
                let mut dn = Array::zeros(g.rows(), n);
                let mut dold = Array::zeros(g.rows(), n);
                for (r, &m) in mask.iter().enumerate() {
                    let dst = if m { &mut dn } else { &mut dold };
                    dst.data_mut()[r * n..(r + 1) * n].copy_from_slice(g.row(r));
                }
                acc(grads, *new, dn);
                acc(grads, *old, dold);
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                acc(grads, *x, Array::new(g.shape().to_vec(), data)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let (m, n) = (g.rows(), g.cols());
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                let mut dx = Vec::with_capacity(m * n);
                let nf = T::count(n);
                for r in 0..m {
                    let gr = g.row(r);
                    let hr = &xhat[r * n..(r + 1) * n];
                    let dh: Vec<T> = gr.iter().zip(gv.data()).map(|(&a, &w)| a * w).collect();
                    let sum_dh: T = dh.iter().copied().sum();
                    let sum_dh_h: T = dh.iter().zip(hr).map(|(&a, &h)| a * h).sum();
                    for c in 0..n {
                        dg[c] = dg[c] + gr[c] * hr[c];
                        db[c] = db[c] + gr[c];
                        dx.push(inv_std[r] / nf * (nf * dh[c] - sum_dh - hr[c] * sum_dh_h));
                    }
                }
                acc(grads, *x, Array::matrix(m, n, dx)?);
                let gshape = gv.shape().to_vec();
                acc(grads, *gain, Array::new(gshape.clone(), dg)?);
                acc(grads, *bias, Array::new(gshape, db)?);
            }
            Op::LstmCell { z, c_prev } => {
                let (zv, cv) = (self.value(*z), self.value(*c_prev));
                let h = cv.cols();
                let b = zv.rows();
                let mut dz = Vec::with_capacity(b * 4 * h);
                let mut dc_prev = Vec::with_capacity(b * h);
                let y = out();
                for r in 0..b {
                    let zr = zv.row(r);
                    let cr = cv.row(r);
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mut di = vec![T::zero(); h];
                    let mut df = vec![T::zero(); h];
                    let mut dgg = vec![T::zero(); h];
                    let mut dout = vec![T::zero(); h];
                    for j in 0..h {
                        let i_g = sigmoid(zr[j]);
                        let f_g = sigmoid(zr[h + j]);
                        let g_g = zr[2 * h + j].tanh();
                        let o_g = sigmoid(zr[3 * h + j]);
                        let c = yr[h + j];
                        let tc = c.tanh();
                        let dh = gr[j];
                        let dc = gr[h + j] + dh * o_g * (T::one() - tc * tc);
                        dout[j] = dh * tc * o_g * (T::one() - o_g);
                        di[j] = dc * g_g * i_g * (T::one() - i_g);
                        df[j] = dc * cr[j] * f_g * (T::one() - f_g);
                        dgg[j] = dc * i_g * (T::one() - g_g * g_g);
                        dc_prev.push(dc * f_g);
                    }
                    dz.extend(di);
                    dz.extend(df);
                    dz.extend(dgg);
                    dz.extend(dout);
                }
                acc(grads, *z, Array::matrix(b, 4 * h, dz)?);
                acc(grads, *c_prev, Array::matrix(b, h, dc_prev)?);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(grads, *x, g.reshape(shape)?);
            }
            Op::EdgeScores { q, k, e, types } => {
                let (qv, kv, ev) = (self.value(*q), self.value(*k), self.value(*e));
                let d = qv.cols();
                let (nk, na) = (qv.rows(), kv.rows());
                let mut dq = Array::zeros(nk, d);
                let mut dk = Array::zeros(na, d);
                let mut de = Array::zeros(ev.rows(), d);
                for j in 0..nk {
                    for a in 0..na {
                        let w = g.get(j, a);
                        if w == T::zero() {
                            continue;
                        }
                        let t = types[a * nk + j];
                        for c in 0..d {
                            let (qc, kc, ec) = (qv.get(j, c), kv.get(a, c), ev.get(t, c));
                            dq.data_mut()[j * d + c] = dq.data()[j * d + c] + w * kc * ec;
                            dk.data_mut()[a * d + c] = dk.data()[a * d + c] + w * qc * ec;
                            de.data_mut()[t * d + c] = de.data()[t * d + c] + w * qc * kc;
                        }
                    }
                }
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *e, de);
            }
            Op::Bce { p, labels } => {
                let v = self.value(*p);
                let scale = g.item() / T::count(v.len().max(1));
                let data = v
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&pi, &gi)| {
                        if in_open_clamp(pi) {
                            scale * (pi - gi) / (pi * (T::one() - pi))
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(grads, *p, Array::new(v.shape().to_vec(), data)?);
            }
            Op::SymKl { a, b } => {
                let (x, y) = (self.value(*a), self.value(*b));
                let scale = g.item() / T::count(x.len().max(1));
                let half = T::lit(0.5);
                let mut da = Vec::with_capacity(x.len());
                let mut db = Vec::with_capacity(x.len());
                for (&p, &q) in x.data().iter().zip(y.data()) {
                    let (pc, qc) = (clamp_prob(p), clamp_prob(q));
                    let lp = (pc / (T::one() - pc)).ln();
                    let lq = (qc / (T::one() - qc)).ln();
                    // penalty = ½ (p - q)(logit p - logit q)
                    let gp = half * ((lp - lq) + (pc - qc) / (pc * (T::one() - pc)));
                    let gq = half * ((lq - lp) + (qc - pc) / (qc * (T::one() - qc)));
                    da.push(if in_open_clamp(p) { scale * gp } else { T::zero() });
                    db.push(if in_open_clamp(q) { scale * gq } else { T::zero() });
                }
                acc(grads, *a, Array::new(x.shape().to_vec(), da)?);
                acc(grads, *b, Array::new(y.shape().to_vec(), db)?);
            }
        }
        Ok(())
    }
}

fn zip<T: Scalar>(a: &Array<T>, b: &Array<T>, f: impl Fn(T, T) -> T) -> Result<Array<T>> {
    if a.len() != b.len() {
        return Err(shape_err("backward", a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(b.shape().to_vec(), data)
}

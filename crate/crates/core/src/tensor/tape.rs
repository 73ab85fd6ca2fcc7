use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};
use crate::masks::AttentionMask;
use crate::scalar::Scalar;
use crate::wavelet;

/// Additive bias applied to masked logits before the softmax.
const MASK_BIAS: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Silu(Var),
    Gelu(Var),
    LeakyRelu(Var, T),
    Abs(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        scale: Option<Var>,
        shift: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Gather(Var, Arc<[usize]>),
    Concat(Vec<Var>),
    Reshape(Var),
    Haar {
        x: Var,
        dims: [usize; 4],
        inverse: bool,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// reverse pass is a single backwards sweep that visits each node once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let a = T::c(0.044715);
    let half = T::c(0.5);
    let inner = k * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::c(3.0) * a * x * x);
    (y, dy)
}

fn copy_head<T: Scalar>(src: &[T], n: usize, d: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * dh);
    for r in 0..n {
        out.extend_from_slice(&src[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn add_head<T: Scalar>(dst: &mut [T], src: &[T], n: usize, d: usize, h: usize, dh: usize) {
    for r in 0..n {
        for c in 0..dh {
            dst[r * d + h * dh + c] += src[r * dh + c];
        }
    }
}

impl<T: Scalar> Tape<T> {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf whose gradient is collected by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("gradient shape"))
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim(format!(
                "matmul: cannot multiply {:?} by {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(what, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    fn row_op(&mut self, x: Var, row: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (tx, tr) = (self.value(x), self.value(row));
        let d = tx.last_dim();
        if tr.numel() != d || tx.rank() == 0 {
            return Err(Error::dim(format!(
                "{what}: row vector {:?} does not match trailing dim of {:?}",
                tr.shape(),
                tx.shape()
            )));
        }
        let r = tr.data();
        let data = tx.data().iter().enumerate().map(|(i, &v)| f(v, r[i % d])).collect();
        Tensor::new(tx.shape(), data)
    }

    /// `x + b` with `b` broadcast over every row of the trailing dimension.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let t = self.row_op(x, b, "add_row", |v, r| v + r)?;
        Ok(self.push(t, Op::AddRow(x, b), &[x, b]))
    }

    /// `x ⊙ s` with `s` broadcast over every row of the trailing dimension.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let t = self.row_op(x, s, "mul_row", |v, r| v * r)?;
        Ok(self.push(t, Op::MulRow(x, s), &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push(t, Op::Silu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| gelu_parts(v).0);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(t, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.abs());
        self.push(t, Op::Abs(x), &[x])
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()) + (-v.abs()).exp().ln_1p());
        self.push(t, Op::Softplus(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = T::c(tx.numel().max(1) as f64);
        let s: T = tx.data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(x), &[x])
    }

    /// Layer normalization over the trailing dimension with optional affine
    /// parameters (`ε = 1e-5` added to the variance).
    pub fn layer_norm(&mut self, x: Var, scale: Option<Var>, shift: Option<Var>) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if d == 0 || tx.rank() == 0 {
            return Err(Error::dim(format!(
                "layer_norm: empty trailing dimension in {:?}",
                tx.shape()
            )));
        }
        for p in [scale, shift].into_iter().flatten() {
            let tp = self.value(p);
            if tp.numel() != d {
                return Err(Error::dim(format!(
                    "layer_norm: affine parameter {:?} does not match D={d}",
                    tp.shape()
                )));
            }
        }
        let rows = tx.outer();
        let eps = T::c(LN_EPS);
        let dn = T::c(d as f64);
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in tx.data().chunks(d) {
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mu) * r));
        }
        let mut out = xhat.clone();
        if let Some(s) = scale {
            let s = self.value(s).data();
            for (i, o) in out.iter_mut().enumerate() {
                *o *= s[i % d];
            }
        }
        if let Some(b) = shift {
            let b = self.value(b).data();
            for (i, o) in out.iter_mut().enumerate() {
                *o += b[i % d];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let mut inputs = vec![x];
        inputs.extend(scale);
        inputs.extend(shift);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                rstd,
            },
            &inputs,
        ))
    }

    /// Multi-head scaled dot-product attention restricted by `mask`.
    ///
    /// `q`, `k`, `v` are `n×D`; heads split `D` into contiguous slices.
    /// Masked pairs get a `-1e9` logit bias and are then re-zeroed, so their
    /// weight is exactly zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &AttentionMask, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        same_shape("attention q/k", tq, tk)?;
        same_shape("attention q/v", tq, tv)?;
        if tq.rank() != 2 {
            return Err(Error::dim(format!("attention: expected n×D, got {:?}", tq.shape())));
        }
        let (n, d) = (tq.shape()[0], tq.shape()[1]);
        if mask.len() != n {
            return Err(Error::dim(format!(
                "attention: mask is {0}×{0} but there are {n} tokens",
                mask.len()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "attention: D={d} not divisible into {heads} heads"
            )));
        }
        if let Some(row) = (0..n).find(|&r| mask.row(r).iter().all(|&b| !b)) {
            return Err(Error::config(format!("attention: query {row} has no visible key")));
        }
        let dh = d / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let bias = T::c(MASK_BIAS);
        let mut out = vec![T::zero(); n * d];
        let mut probs = vec![T::zero(); heads * n * n];
        let mut scores = vec![T::zero(); n * n];
        let mut oh = vec![T::zero(); n * dh];
        for h in 0..heads {
            let qh = copy_head(tq.data(), n, d, h, dh);
            let kh = copy_head(tk.data(), n, d, h, dh);
            let vh = copy_head(tv.data(), n, d, h, dh);
            T::gemm(n, dh, n, &qh, false, &kh, true, &mut scores, false);
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            for r in 0..n {
                let vis = mask.row(r);
                let srow = &scores[r * n..(r + 1) * n];
                let prow = &mut p[r * n..(r + 1) * n];
                let mut mx = T::neg_infinity();
                for c in 0..n {
                    let s = srow[c] * scale + if vis[c] { T::zero() } else { bias };
                    prow[c] = s;
                    mx = mx.max(s);
                }
                let mut z = T::zero();
                for c in 0..n {
                    let e = (prow[c] - mx).exp();
                    prow[c] = e;
                    z += e;
                }
                for c in 0..n {
                    prow[c] = if vis[c] { prow[c] / z } else { T::zero() };
                }
            }
            T::gemm(n, n, dh, p, false, &vh, false, &mut oh, false);
            add_head(&mut out, &oh, n, d, h, dh);
        }
        let t = Tensor::new(&[n, d], out)?;
        Ok(self.push(t, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Attention weights recorded for an attention node, `heads × n × n`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `out[i] = x[index[i]]` over the flattened input, producing `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::dim(format!(
                "gather: {} indices for output shape {:?}",
                index.len(),
                shape
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= tx.numel()) {
            return Err(Error::dim(format!(
                "gather: index {bad} out of range for {:?}",
                tx.shape()
            )));
        }
        let src = tx.data();
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Gather(x, index), &[x]))
    }

    /// Contiguous rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || start > end || end > tx.shape()[0] {
            return Err(Error::dim(format!(
                "slice_rows: rows {start}..{end} of {:?}",
                tx.shape()
            )));
        }
        let d = tx.shape()[1];
        let index: Arc<[usize]> = (start * d..end * d).collect();
        self.gather(x, index, &[end - start, d])
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat: no inputs"))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            if tp.rank() == 0 || tp.shape()[1..] != tail[..] {
                return Err(Error::dim(format!(
                    "concat: {:?} does not match trailing extents {:?}",
                    tp.shape(),
                    tail
                )));
            }
            lead += tp.shape()[0];
            data.extend_from_slice(tp.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Multi-level orthonormal Haar analysis of an `H×W×C` tensor into its
    /// packed spectrum.
    pub fn mdwt(&mut self, x: Var, levels: usize) -> Result<Var> {
        self.haar(x, levels, false)
    }

    /// Inverse of [`Tape::mdwt`].
    pub fn imdwt(&mut self, x: Var, levels: usize) -> Result<Var> {
        self.haar(x, levels, true)
    }

    fn haar(&mut self, x: Var, levels: usize, inverse: bool) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return Err(Error::dim(format!("haar: expected H×W×C, got {:?}", tx.shape())));
        }
        let (h, w, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        wavelet::check_levels(h, w, levels)?;
        let data = if inverse {
            wavelet::imdwt_raw(tx.data(), h, w, c, levels)
        } else {
            wavelet::mdwt_raw(tx.data(), h, w, c, levels)
        };
        let t = Tensor::new(&[h, w, c], data)?;
        Ok(self.push(
            t,
            Op::Haar {
                x,
                dims: [h, w, c, levels],
                inverse,
            },
            &[x],
        ))
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar `loss`. Gradients of every node that
    /// depends on a variable leaf are available through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let tl = self.value(loss);
        if tl.numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                tl.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if needs(*a) {
                    let ga = acc(grads, *a, m * k);
                    T::gemm(m, n, k, g, false, tb.data(), true, ga, true);
                }
                if needs(*b) {
                    let gb = acc(grads, *b, k * n);
                    T::gemm(k, m, n, ta.data(), true, g, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if needs(v) {
                        axpy(acc(grads, v, g.len()), g, sign);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if needs(v) {
                        axpy(acc(grads, v, g.len()), g, sign);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * tb[i];
                    }
                }
                if needs(*b) {
                    let gb = acc(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * ta[i];
                    }
                }
            }
            Op::AddRow(x, b) => {
                let d = val(*b).numel();
                if needs(*x) {
                    axpy(acc(grads, *x, g.len()), g, T::one());
                }
                if needs(*b) {
                    let gb = acc(grads, *b, d);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % d] += gi;
                    }
                }
            }
            Op::MulRow(x, s) => {
                let (tx, ts) = (val(*x).data(), val(*s).data());
                let d = ts.len();
                if needs(*x) {
                    let gx = acc(grads, *x, g.len());
                    for (i, &gi) in g.iter().enumerate() {
                        gx[i] += gi * ts[i % d];
                    }
                }
                if needs(*s) {
                    let gs = acc(grads, *s, d);
                    for (i, &gi) in g.iter().enumerate() {
                        gs[i % d] += gi * tx[i];
                    }
                }
            }
            Op::Scale(x, c) => axpy(acc(grads, *x, g.len()), g, *c),
            Op::AddScalar(x) | Op::Reshape(x) => axpy(acc(grads, *x, g.len()), g, T::one()),
            Op::Silu(x) => {
                let tx = val(*x).data();
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    let s = sigmoid(tx[i]);
                    gx[i] += g[i] * s * (T::one() + tx[i] * (T::one() - s));
                }
            }
            Op::Gelu(x) => {
                let tx = val(*x).data();
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * gelu_parts(tx[i]).1;
                }
            }
            Op::LeakyRelu(x, slope) => {
                let tx = val(*x).data();
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += if tx[i] > T::zero() { g[i] } else { g[i] * *slope };
                }
            }
            Op::Abs(x) => {
                let tx = val(*x).data();
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    let s = if tx[i] > T::zero() {
                        T::one()
                    } else if tx[i] < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    gx[i] += g[i] * s;
                }
            }
            Op::Softplus(x) => {
                let tx = val(*x).data();
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * sigmoid(tx[i]);
                }
            }
            Op::Sum(x) => {
                let n = val(*x).numel();
                let gx = acc(grads, *x, n);
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                let gi = g[0] / T::c(n.max(1) as f64);
                let gx = acc(grads, *x, n);
                for v in gx.iter_mut() {
                    *v += gi;
                }
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                rstd,
            } => {
                let d = val(*x).last_dim();
                let dn = T::c(d as f64);
                if let Some(b) = shift.filter(|b| needs(*b)) {
                    let gb = acc(grads, b, d);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % d] += gi;
                    }
                }
                if let Some(s) = scale.filter(|s| needs(*s)) {
                    let gs = acc(grads, s, d);
                    for (i, &gi) in g.iter().enumerate() {
                        gs[i % d] += gi * xhat[i];
                    }
                }
                if needs(*x) {
                    let sv = scale.map(|s| val(s).data());
                    let gx = acc(grads, *x, g.len());
                    let mut gh = vec![T::zero(); d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let base = r * d;
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..d {
                            let v = g[base + c] * sv.map_or(T::one(), |s| s[c]);
                            gh[c] = v;
                            m1 += v;
                            m2 += v * xhat[base + c];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for c in 0..d {
                            gx[base + c] += rs * (gh[c] - m1 - xhat[base + c] * m2);
                        }
                    }
                }
            }
            Op::Attention {
                q, k, v, heads, probs, ..
            } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let (n, d) = (tq.shape()[0], tq.shape()[1]);
                let dh = d / heads;
                let scale = T::one() / T::c(dh as f64).sqrt();
                let mut gq = vec![T::zero(); n * d];
                let mut gk = vec![T::zero(); n * d];
                let mut gv = vec![T::zero(); n * d];
                let mut dp = vec![T::zero(); n * n];
                let mut tmp = vec![T::zero(); n * dh];
                for h in 0..*heads {
                    let p = &probs[h * n * n..(h + 1) * n * n];
                    let go = copy_head(g, n, d, h, dh);
                    let qh = copy_head(tq.data(), n, d, h, dh);
                    let kh = copy_head(tk.data(), n, d, h, dh);
                    let vh = copy_head(tv.data(), n, d, h, dh);
                    // dV = Pᵀ·dO
                    T::gemm(n, n, dh, p, true, &go, false, &mut tmp, false);
                    add_head(&mut gv, &tmp, n, d, h, dh);
                    // dP = dO·Vᵀ, then softmax Jacobian
                    T::gemm(n, dh, n, &go, false, &vh, true, &mut dp, false);
                    for r in 0..n {
                        let prow = &p[r * n..(r + 1) * n];
                        let drow = &mut dp[r * n..(r + 1) * n];
                        let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                        for c in 0..n {
                            drow[c] = prow[c] * (drow[c] - dot) * scale;
                        }
                    }
                    T::gemm(n, n, dh, &dp, false, &kh, false, &mut tmp, false);
                    add_head(&mut gq, &tmp, n, d, h, dh);
                    T::gemm(n, n, dh, &dp, true, &qh, false, &mut tmp, false);
                    add_head(&mut gk, &tmp, n, d, h, dh);
                }
                for (var, gsrc) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if needs(var) {
                        axpy(acc(grads, var, n * d), &gsrc, T::one());
                    }
                }
            }
            Op::Gather(x, index) => {
                let n = val(*x).numel();
                let gx = acc(grads, *x, n);
                for (o, &i) in index.iter().enumerate() {
                    gx[i] += g[o];
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if needs(p) {
                        axpy(acc(grads, p, n), &g[off..off + n], T::one());
                    }
                    off += n;
                }
            }
            Op::Haar { x, dims, inverse } => {
                let [h, w, c, levels] = *dims;
                // orthonormal: the adjoint is the inverse transform
                let back = if *inverse {
                    wavelet::mdwt_raw(g, h, w, c, levels)
                } else {
                    wavelet::imdwt_raw(g, h, w, c, levels)
                };
                axpy(acc(grads, *x, back.len()), &back, T::one());
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[cfg(test)]
mod tests;

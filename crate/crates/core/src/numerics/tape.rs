//! Reverse-mode differentiation over an append-only tape.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! enough information to pull gradients back to its inputs. Nodes are appended
//! after their inputs, so the node order is a topological order and `backward`
//! is a single reverse sweep.

use std::collections::HashMap;

use super::kernels::{self, AttnGeom, ConvGeom, MatRef};
use super::svd::svd;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddAxis { x: Var, v: Var, axis: usize },
    MulAxis { x: Var, v: Var, axis: usize },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Reshape(Var),
    SwapLast2(Var),
    Concat { a: Var, b: Var, axis: usize },
    Gelu(Var),
    SumAll(Var),
    SumSq(Var),
    MeanAxis { x: Var, axis: usize },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    LayerNorm { x: Var, inv_std: Vec<T> },
    NormalizeRows { x: Var, norms: Vec<T> },
    Conv3d { x: Var, w: Var, geom: ConvGeom },
    AttnScores { q: Var, k: Var, log_tau: Var, geom: AttnGeom },
    AttnApply { p: Var, v: Var, geom: AttnGeom },
    Nuclear { x: Var, polar: Tensor<T> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
    key: Option<usize>,
}

/// Append-only record of one forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    by_key: HashMap<usize, Tensor<T>>,
    by_var: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a keyed parameter leaf. Parameters the loss does not reach
    /// get an all-zero gradient rather than `None`.
    pub fn param(&self, key: usize) -> Option<&Tensor<T>> {
        self.by_key.get(&key)
    }

    /// Gradient of any tracked leaf (parameters and watched values).
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(&v.0)
    }

    pub fn keys(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_key.keys().copied()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Apply `f(x_i, v_c)` where `c` is the index along the broadcast axis.
fn each_axis<T: Copy>(data: &mut [T], v: &[T], inner: usize, f: impl Fn(&mut T, T)) {
    if inner == 0 {
        return;
    }
    for (j, chunk) in data.chunks_mut(inner).enumerate() {
        let c = v[j % v.len()];
        chunk.iter_mut().for_each(|x| f(x, c));
    }
}

/// `Σ f(i)` grouped by the index along the axis of length `n`.
fn reduce_axis<T: Real>(len: usize, n: usize, inner: usize, f: impl Fn(usize) -> T) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    if inner == 0 {
        return out;
    }
    for j in 0..len / inner {
        let base = j * inner;
        out[j % n] += (base..base + inner).map(&f).sum::<T>();
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

// ½(1 + tanh u) = σ(2u), which is cheaper to evaluate than tanh
#[inline]
fn gelu_gate<T: Real>(x: T) -> T {
    let c2 = T::from_f64_lossy(2.0 * GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    T::one() / (T::one() + (-c2 * (x + a * x * x * x)).exp())
}

fn gelu<T: Real>(x: T) -> T {
    x * gelu_gate(x)
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c2 = T::from_f64_lossy(2.0 * GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let three = T::from_f64_lossy(3.0);
    let s = gelu_gate(x);
    s + x * s * (T::one() - s) * c2 * (T::one() + three * a * x * x)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Untracked leaf: gradients never flow into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false, None)
    }

    /// Tracked leaf keyed by a parameter identity.
    pub fn param(&mut self, t: Tensor<T>, key: usize) -> Var {
        self.leaf(t, true, Some(key))
    }

    /// Tracked leaf without a parameter key; its gradient is available via
    /// [`Gradients::wrt`].
    pub fn watch(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true, None)
    }

    fn leaf(&mut self, value: Tensor<T>, tracked: bool, key: Option<usize>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
            key,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value,
            op,
            tracked,
            key: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    /// Sum of several same-shaped values.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::shape("add_all of no terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    fn check_axis_vec(&self, x: Var, v: Var, axis: usize) -> Result<()> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        if axis >= xs.len() || vs != [xs[axis]] {
            return Err(Error::shape(format!(
                "cannot broadcast {vs:?} along axis {axis} of {xs:?}"
            )));
        }
        Ok(())
    }

    /// `x + v` with the vector `v` broadcast along `axis` of `x`.
    pub fn add_axis(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.check_axis_vec(x, v, axis)?;
        let (_, n, inner) = axis_split(self.shape(x), axis);
        let vv = self.value(v).data();
        debug_assert_eq!(vv.len(), n);
        let mut out = self.value(x).clone();
        each_axis(out.data_mut(), vv, inner, |o, c| *o += c);
        self.push("add_axis", out, Op::AddAxis { x, v, axis }, &[x, v])
    }

    /// `x * v` with the vector `v` broadcast along `axis` of `x`.
    pub fn mul_axis(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.check_axis_vec(x, v, axis)?;
        let (_, n, inner) = axis_split(self.shape(x), axis);
        let vv = self.value(v).data();
        debug_assert_eq!(vv.len(), n);
        let mut out = self.value(x).clone();
        each_axis(out.data_mut(), vv, inner, |o, c| *o *= c);
        self.push("mul_axis", out, Op::MulAxis { x, v, axis }, &[x, v])
    }

    /// Matrix product `op(a)·op(b)` of two 2-D values, `op` transposing on request.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let ma = MatRef::new(self.value(a).data(), ar, ac, ta);
        let mb = MatRef::new(self.value(b).data(), br, bc, tb);
        let ((m, k), (k2, n)) = (ma.dims(), mb.dims());
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: [{m}, {k}] · [{k2}, {n}]"
            )));
        }
        let out = Tensor::new([m, n], kernels::matmul(ma, mb))?;
        self.push("matmul", out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    /// Row-wise affine map over the last axis: `x·W + b` for `x [.., in]`, `W [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (fan_in, fan_out) = self.value(w).dims2()?;
        if shape.last() != Some(&fan_in) {
            return Err(Error::shape(format!(
                "linear: input {shape:?} does not end in {fan_in}"
            )));
        }
        let rows = shape.iter().product::<usize>() / fan_in;
        let flat = self.reshape(x, &[rows, fan_in])?;
        let mut y = self.matmul(flat, w, false, false)?;
        if let Some(b) = b {
            y = self.add_axis(y, b, 1)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = fan_out;
        self.reshape(y, &out_shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Swap the last two axes of a 3-D value: `[B, N, M] -> [B, M, N]`.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let out = swap_last2(self.value(x))?;
        self.push("swap_last2", out, Op::SwapLast2(x), &[x])
    }

    /// Concatenate two values that agree on every axis except `axis`.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape(format!(
                "cannot concatenate {sa:?} and {sb:?} along axis {axis}"
            )));
        }
        let (outer, na, inner) = axis_split(&sa, axis);
        let nb = sb[axis];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            data.extend_from_slice(&da[o * na * inner..(o + 1) * na * inner]);
            data.extend_from_slice(&db[o * nb * inner..(o + 1) * nb * inner]);
        }
        let mut shape = sa;
        shape[axis] = na + nb;
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat { a, b, axis }, &[a, b])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_usize_lossy(self.value(x).numel());
        let s = self.sum(x)?;
        self.scale(s, T::one() / n)
    }

    /// Sum of squared entries (squared Frobenius norm).
    pub fn sum_sq(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).data().iter().map(|&v| v * v).sum());
        self.push("sum_sq", out, Op::SumSq(x), &[x])
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("mean_axis {axis} on {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let inv = T::one() / T::from_usize_lossy(n);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        data.iter_mut().for_each(|d| *d *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let out = Tensor::new(out_shape, data)?;
        self.push("mean_axis", out, Op::MeanAxis { x, axis }, &[x])
    }

    fn last_dim(&self, x: Var) -> Result<usize> {
        self.shape(x)
            .last()
            .copied()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::shape("operation needs a non-empty last axis"))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.last_dim(x)?;
        let mut out = self.value(x).clone();
        kernels::softmax_rows(out.data_mut(), cols);
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.last_dim(x)?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(cols) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push("log_softmax", out, Op::LogSoftmax(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`), `logits [B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for logits [{b}, {c}]",
                labels.len()
            )));
        }
        let data = self.value(logits).data();
        let total: T = data
            .chunks(c)
            .zip(labels)
            .map(|(row, &l)| log_sum_exp(row) - row[l])
            .sum();
        let out = Tensor::scalar(total / T::from_usize_lossy(b));
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Normalize each row of the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let cols = self.last_dim(x)?;
        self.group_norm(x, cols)
    }

    /// Normalize consecutive groups of `group` entries in memory order, so
    /// `[B, C, ...]` with `group = Π spatial` normalizes each channel map.
    pub fn group_norm(&mut self, x: Var, group: usize) -> Result<Var> {
        let cols = group;
        if cols == 0 || self.value(x).numel() == 0 || !self.value(x).numel().is_multiple_of(cols) {
            return Err(Error::shape(format!("group of {cols} does not tile {:?}", self.shape(x))));
        }
        let mut out = self.value(x).clone();
        let eps = T::from_f64_lossy(LN_EPS);
        let n = T::from_usize_lossy(cols);
        let mut inv_std = Vec::with_capacity(out.numel() / cols);
        for row in out.data_mut().chunks_mut(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            inv_std.push(r);
        }
        self.push("layer_norm", out, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Scale each row of a `[B, D]` value to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, d) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        let mut norms = Vec::new();
        for (row_idx, row) in out.data_mut().chunks_mut(d).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(Error::ZeroNorm { row: row_idx });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.push("normalize_rows", out, Op::NormalizeRows { x, norms }, &[x])
    }

    /// 3-D convolution, kernel 3, padding 1: `x [B, Cin, X, Y, Z]`, `w [Cout, Cin, 3, 3, 3]`.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let ok = xs.len() == 5 && ws.len() == 5 && ws[1] == xs[1] && ws[2..] == [3, 3, 3] && stride > 0;
        if !ok {
            return Err(Error::shape(format!(
                "conv3d: input {xs:?}, weight {ws:?}, stride {stride}"
            )));
        }
        let geom = ConvGeom::new(xs[1], ws[0], [xs[2], xs[3], xs[4]], stride);
        let y = kernels::conv3d_forward(self.value(x).data(), xs[0], self.value(w).data(), &geom);
        let [ox, oy, oz] = geom.out_dims;
        let out = Tensor::new([xs[0], geom.cout, ox, oy, oz], y)?;
        self.push("conv3d", out, Op::Conv3d { x, w, geom }, &[x, w])
    }

    /// Per-head attention probabilities
    /// `softmax(q_h k_hᵀ / (τ_h √d_h))` with `τ_h = exp(log_tau[h])`.
    ///
    /// `q [B, Lq, D]`, `k [B, Lk, D]`, `log_tau [heads]`; output `[B, heads, Lq, Lk]`.
    pub fn attn_scores(&mut self, q: Var, k: Var, log_tau: Var, heads: usize) -> Result<Var> {
        let (qs, ks) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        let ok = qs.len() == 3
            && ks.len() == 3
            && qs[0] == ks[0]
            && qs[2] == ks[2]
            && heads > 0
            && qs[2] % heads == 0
            && self.shape(log_tau) == [heads];
        if !ok {
            return Err(Error::shape(format!(
                "attn_scores: q {qs:?}, k {ks:?}, heads {heads}, log_tau {:?}",
                self.shape(log_tau)
            )));
        }
        let geom = AttnGeom {
            batch: qs[0],
            lq: qs[1],
            lk: ks[1],
            dim: qs[2],
            heads,
        };
        let mut s = kernels::attn_raw_scores(self.value(q).data(), self.value(k).data(), &geom);
        let scales = self.attn_scales(log_tau, &geom);
        let plane = geom.lq * geom.lk;
        for (i, chunk) in s.chunks_mut(plane).enumerate() {
            let c = scales[i % heads];
            chunk.iter_mut().for_each(|v| *v *= c);
        }
        kernels::softmax_rows(&mut s, geom.lk);
        let out = Tensor::new([geom.batch, heads, geom.lq, geom.lk], s)?;
        self.push("attn_scores", out, Op::AttnScores { q, k, log_tau, geom }, &[q, k, log_tau])
    }

    fn attn_scales(&self, log_tau: Var, geom: &AttnGeom) -> Vec<T> {
        let root = T::from_usize_lossy(geom.head_dim()).sqrt();
        self.value(log_tau)
            .data()
            .iter()
            .map(|&lt| T::one() / (lt.exp() * root))
            .collect()
    }

    /// Apply per-head attention `p [B, h, Lq, Lk]` to values `v [B, Lk, D]`;
    /// heads are concatenated back into `[B, Lq, D]`.
    pub fn attn_apply(&mut self, p: Var, v: Var) -> Result<Var> {
        let (ps, vs) = (self.shape(p).to_vec(), self.shape(v).to_vec());
        let ok = ps.len() == 4 && vs.len() == 3 && ps[0] == vs[0] && ps[3] == vs[1] && vs[2] % ps[1] == 0;
        if !ok {
            return Err(Error::shape(format!("attn_apply: p {ps:?}, v {vs:?}")));
        }
        let geom = AttnGeom {
            batch: ps[0],
            lq: ps[2],
            lk: ps[3],
            dim: vs[2],
            heads: ps[1],
        };
        let o = kernels::attn_apply(self.value(p).data(), self.value(v).data(), &geom);
        let out = Tensor::new([geom.batch, geom.lq, geom.dim], o)?;
        self.push("attn_apply", out, Op::AttnApply { p, v, geom }, &[p, v])
    }

    /// Nuclear norm (sum of singular values) of a 2-D value.
    pub fn nuclear_norm(&mut self, x: Var) -> Result<Var> {
        let d = svd(self.value(x))?;
        let total: T = d.s.iter().copied().sum();
        let polar = d.polar_factor();
        self.push("nuclear_norm", Tensor::scalar(total), Op::Nuclear { x, polar }, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients accumulate over every use of a value. Tracked parameter
    /// leaves that the loss does not depend on receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        }
        let mut by_var = HashMap::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    by_var.insert(i, Tensor::zeros(node.value.shape().to_vec()));
                }
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                by_var.insert(i, g);
                continue;
            }
            self.pull(i, &g, &mut grads)?;
        }
        // leaves recorded after the loss cannot influence it
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.tracked && matches!(node.op, Op::Leaf) {
                by_var.insert(i, Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        let mut by_key = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(key) = node.key {
                if let Some(g) = by_var.get(&i) {
                    by_key
                        .entry(key)
                        .and_modify(|acc: &mut Tensor<T>| acc.add_assign_scaled(g, T::one()))
                        .or_insert_with(|| g.clone());
                }
            }
        }
        Ok(Gradients { by_key, by_var })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign_scaled(&g, T::one()),
            slot => *slot = Some(g),
        }
    }

    /// Push the output gradient `g` of node `i` back to its inputs.
    fn pull(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.is_tracked(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.is_tracked(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * *c)),
            Op::AddAxis { x, v, axis } => {
                self.accumulate(grads, *x, g.clone());
                if self.is_tracked(*v) {
                    let (_, n, inner) = axis_split(g.shape(), *axis);
                    let gd = g.data();
                    let gv = reduce_axis(gd.len(), n, inner, |i| gd[i]);
                    self.accumulate(grads, *v, Tensor::new([n], gv)?);
                }
            }
            Op::MulAxis { x, v, axis } => {
                let (_, n, inner) = axis_split(g.shape(), *axis);
                let vv = self.value(*v).data();
                if self.is_tracked(*x) {
                    let mut gx = g.clone();
                    each_axis(gx.data_mut(), vv, inner, |o, c| *o *= c);
                    self.accumulate(grads, *x, gx);
                }
                if self.is_tracked(*v) {
                    let xv = self.value(*x).data();
                    let gd = g.data();
                    let gv = reduce_axis(gd.len(), n, inner, |i| gd[i] * xv[i]);
                    self.accumulate(grads, *v, Tensor::new([n], gv)?);
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ar, ac) = av.dims2()?;
                let (br, bc) = bv.dims2()?;
                let (m, n) = g.dims2()?;
                let gm = |t| MatRef::new(g.data(), m, n, t);
                let am = |t| MatRef::new(av.data(), ar, ac, t);
                let bm = |t| MatRef::new(bv.data(), br, bc, t);
                if self.is_tracked(*a) {
                    // gradient wrt the stored (untransposed) a
                    let ga = match (*ta, *tb) {
                        (false, false) => kernels::matmul(gm(false), bm(true)),
                        (false, true) => kernels::matmul(gm(false), bm(false)),
                        (true, false) => kernels::matmul(bm(false), gm(true)),
                        (true, true) => kernels::matmul(bm(true), gm(true)),
                    };
                    self.accumulate(grads, *a, Tensor::new([ar, ac], ga)?);
                }
                if self.is_tracked(*b) {
                    let gb = match (*ta, *tb) {
                        (false, false) => kernels::matmul(am(true), gm(false)),
                        (false, true) => kernels::matmul(gm(true), am(false)),
                        (true, false) => kernels::matmul(am(false), gm(false)),
                        (true, true) => kernels::matmul(gm(true), am(true)),
                    };
                    self.accumulate(grads, *b, Tensor::new([br, bc], gb)?);
                }
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(shape)?);
            }
            Op::SwapLast2(x) => self.accumulate(grads, *x, swap_last2(g)?),
            Op::Concat { a, b, axis } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (outer, na, inner) = axis_split(&sa, *axis);
                let nb = sb[*axis];
                let mut ga = Vec::with_capacity(outer * na * inner);
                let mut gb = Vec::with_capacity(outer * nb * inner);
                for o in 0..outer {
                    let base = o * (na + nb) * inner;
                    ga.extend_from_slice(&g.data()[base..base + na * inner]);
                    gb.extend_from_slice(&g.data()[base + na * inner..base + (na + nb) * inner]);
                }
                self.accumulate(grads, *a, Tensor::new(sa, ga)?);
                self.accumulate(grads, *b, Tensor::new(sb, gb)?);
            }
            Op::Gelu(x) => {
                let gx = g.zip_map(self.value(*x), |gi, xi| gi * gelu_grad(xi))?;
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                self.accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), g.item()));
            }
            Op::SumSq(x) => {
                let two = T::from_f64_lossy(2.0) * g.item();
                self.accumulate(grads, *x, self.value(*x).map(|v| two * v));
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let inv = T::one() / T::from_usize_lossy(n);
                let gd = g.data();
                let gx = Tensor::from_fn(shape, |idx| {
                    let o = idx / (n * inner);
                    let r = idx % inner;
                    debug_assert!(o < outer);
                    gd[o * inner + r] * inv
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let cols = *y.shape().last().expect("non-empty");
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (gi, &yi) in grow.iter_mut().zip(yrow) {
                        *gi = yi * (*gi - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let cols = *y.shape().last().expect("non-empty");
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let total: T = grow.iter().copied().sum();
                    for (gi, &yi) in grow.iter_mut().zip(yrow) {
                        *gi -= yi.exp() * total;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let (b, c) = lv.dims2()?;
                let scale = g.item() / T::from_usize_lossy(b);
                let mut gx = lv.clone();
                for (row, &l) in gx.data_mut().chunks_mut(c).zip(labels) {
                    kernels::softmax_rows(row, c);
                    row[l] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let cols = y.numel() / inv_std.len();
                let n = T::from_usize_lossy(cols);
                let mut gx = g.clone();
                for ((grow, yrow), &r) in gx
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(y.data().chunks(cols))
                    .zip(inv_std)
                {
                    let mean_g = grow.iter().copied().sum::<T>() / n;
                    let mean_gy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for (gi, &yi) in grow.iter_mut().zip(yrow) {
                        *gi = r * (*gi - mean_g - yi * mean_gy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::NormalizeRows { x, norms } => {
                let (_, d) = y.dims2()?;
                let mut gx = g.clone();
                for ((grow, yrow), &norm) in gx.data_mut().chunks_mut(d).zip(y.data().chunks(d)).zip(norms) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (gi, &yi) in grow.iter_mut().zip(yrow) {
                        *gi = (*gi - yi * dot) / norm;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Conv3d { x, w, geom } => {
                let xv = self.value(*x);
                let batch = xv.shape()[0];
                let (dx, dw) = kernels::conv3d_backward(
                    xv.data(),
                    batch,
                    self.value(*w).data(),
                    g.data(),
                    geom,
                    self.is_tracked(*x),
                    self.is_tracked(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw)?);
                }
            }
            Op::AttnScores { q, k, log_tau, geom } => {
                self.pull_attn_scores(*q, *k, *log_tau, geom, y, g, grads)?;
            }
            Op::AttnApply { p, v, geom } => {
                let (dp, dv) =
                    kernels::attn_apply_backward(self.value(*p).data(), self.value(*v).data(), g.data(), geom);
                self.accumulate(grads, *p, Tensor::new(self.shape(*p).to_vec(), dp)?);
                self.accumulate(grads, *v, Tensor::new(self.shape(*v).to_vec(), dv)?);
            }
            Op::Nuclear { x, polar } => {
                let s = g.item();
                self.accumulate(grads, *x, polar.map(|v| v * s));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn pull_attn_scores(
        &self,
        q: Var,
        k: Var,
        log_tau: Var,
        geom: &AttnGeom,
        p: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let AttnGeom {
            batch,
            lq,
            lk,
            dim,
            heads,
        } = *geom;
        let dh = geom.head_dim();
        let scales = self.attn_scales(log_tau, geom);
        // dS = P ⊙ (dP - rowsum(dP ⊙ P)) on the scaled scores S
        let mut ds = g.data().to_vec();
        for (grow, prow) in ds.chunks_mut(lk).zip(p.data().chunks(lk)) {
            let dot: T = grow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
            for (gi, &pi) in grow.iter_mut().zip(prow) {
                *gi = pi * (*gi - dot);
            }
        }
        let (qv, kv) = (self.value(q).data(), self.value(k).data());
        let mut dq = vec![T::zero(); qv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut dlt = vec![T::zero(); heads];
        let raw = kernels::attn_raw_scores(qv, kv, geom);
        let plane = lq * lk;
        for b in 0..batch {
            for h in 0..heads {
                let c = scales[h];
                let po = (b * heads + h) * plane;
                // dτ: S = raw·c with dc/dlogτ = -c
                let acc: T = ds[po..po + plane]
                    .iter()
                    .zip(&raw[po..po + plane])
                    .map(|(&d, &r)| d * r)
                    .sum();
                dlt[h] -= acc * c;
                let qo = b * lq * dim + h * dh;
                let ko = b * lk * dim + h * dh;
                // dq_h [lq, dh] = c · dS [lq, lk] · k_h [lk, dh]
                T::gemm(
                    lq,
                    lk,
                    dh,
                    c,
                    &ds[po..],
                    lk as isize,
                    1,
                    &kv[ko..],
                    dim as isize,
                    1,
                    T::one(),
                    &mut dq[qo..],
                    dim as isize,
                    1,
                );
                // dk_h [lk, dh] = c · dSᵀ [lk, lq] · q_h [lq, dh]
                T::gemm(
                    lk,
                    lq,
                    dh,
                    c,
                    &ds[po..],
                    1,
                    lk as isize,
                    &qv[qo..],
                    dim as isize,
                    1,
                    T::one(),
                    &mut dk[ko..],
                    dim as isize,
                    1,
                );
            }
        }
        self.accumulate(grads, q, Tensor::new(self.shape(q).to_vec(), dq)?);
        self.accumulate(grads, k, Tensor::new(self.shape(k).to_vec(), dk)?);
        self.accumulate(grads, log_tau, Tensor::new([heads], dlt)?);
        Ok(())
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

fn swap_last2<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, n, m] = t.shape() else {
        return Err(Error::shape(format!("swap_last2 needs 3 axes, got {:?}", t.shape())));
    };
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        let s = &src[bi * n * m..(bi + 1) * n * m];
        let o = &mut out[bi * n * m..(bi + 1) * n * m];
        for i in 0..n {
            for j in 0..m {
                o[j * n + i] = s[i * m + j];
            }
        }
    }
    Tensor::new([b, m, n], out)
}

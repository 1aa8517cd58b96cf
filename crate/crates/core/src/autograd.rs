//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] is an append-only arena of nodes. Every primitive records its
//! inputs and whatever it needs for the backward rule, so arena order is a
//! topological order and [`Tape::backward`] simply walks it in reverse.
//!
//! Broadcasting is deliberately narrow: the right operand of an elementwise
//! op may have a shape that is a suffix of the left operand's shape, and
//! `matmul` broadcasts one side when it has no batch extents. Nothing else.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum MatmulMode {
    /// Identical batch extents on both sides (including none).
    Batched { batches: usize },
    /// Right operand is a plain matrix shared across the left's batch.
    SharedRhs { rows: usize },
    /// Left operand is a plain matrix shared across the right's batch.
    SharedLhs { batches: usize },
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        mode: MatmulMode,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Square {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: Var,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    ConcatRows {
        a: Var,
        b: Var,
    },
    BroadcastTo {
        a: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn slice(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    macs: BTreeMap<&'static str, u64>,
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn last2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [.., r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Writes (or adds, when `accumulate`) `src` permuted by `perm` into `dst`.
fn permute_into<T: Real>(src: &[T], shape: &[usize], perm: &[usize], dst: &mut [T], accumulate: bool) {
    let rank = shape.len();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for out in dst.iter_mut() {
        if accumulate {
            *out = *out + src[offset];
        } else {
            *out = src[offset];
        }
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn transpose_into<T: Real>(src: &[T], batches: usize, rows: usize, cols: usize, dst: &mut [T], accumulate: bool) {
    for t in 0..batches {
        let s = &src[t * rows * cols..(t + 1) * rows * cols];
        let d = &mut dst[t * rows * cols..(t + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let v = s[r * cols + c];
                let o = &mut d[c * rows + r];
                *o = if accumulate { *o + v } else { v };
            }
        }
    }
}

fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: BTreeMap::new(),
        }
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

    /// Multiply-accumulate counters recorded by instrumented layers.
    pub fn record_macs(&mut self, tag: &'static str, count: u64) {
        *self.macs.entry(tag).or_insert(0) += count;
    }

    pub fn macs(&self, tag: &str) -> u64 {
        self.macs.get(tag).copied().unwrap_or(0)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf (a parameter or an input under test).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never accumulates gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ((m, k), (k2, n)) = match (last2(&sa), last2(&sb)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        if k != k2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (mode, batch_shape) = if ba == bb {
            (MatmulMode::Batched { batches: numel(ba) }, ba.to_vec())
        } else if bb.is_empty() {
            (MatmulMode::SharedRhs { rows: numel(ba) * m }, ba.to_vec())
        } else if ba.is_empty() {
            (MatmulMode::SharedLhs { batches: numel(bb) }, bb.to_vec())
        } else {
            return Err(Error::dim("matmul", &sa, &sb));
        };
        let mut out_shape = batch_shape;
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); numel(&out_shape)];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            let (rs_a, rs_b, rs_c) = ((k as isize, 1), (n as isize, 1), (n as isize, 1));
            match mode {
                MatmulMode::Batched { batches } => {
                    for t in 0..batches {
                        T::gemm(
                            m,
                            k,
                            n,
                            &ad[t * m * k..(t + 1) * m * k],
                            rs_a,
                            &bd[t * k * n..(t + 1) * k * n],
                            rs_b,
                            T::zero(),
                            &mut out[t * m * n..(t + 1) * m * n],
                            rs_c,
                        );
                    }
                }
                MatmulMode::SharedRhs { rows } => {
                    T::gemm(rows, k, n, ad, rs_a, bd, rs_b, T::zero(), &mut out, rs_c);
                }
                MatmulMode::SharedLhs { batches } => {
                    for t in 0..batches {
                        T::gemm(
                            m,
                            k,
                            n,
                            ad,
                            rs_a,
                            &bd[t * k * n..(t + 1) * k * n],
                            rs_b,
                            T::zero(),
                            &mut out[t * m * n..(t + 1) * m * n],
                            rs_c,
                        );
                    }
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Matmul { a, b, mode, m, k, n }, rg))
    }

    /// Swaps the last two extents.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (r, c) = last2(&shape).ok_or_else(|| Error::dim("transpose", &shape, &[]))?;
        let batches = numel(&shape[..shape.len() - 2]);
        let mut out = vec![T::zero(); shape.iter().product()];
        transpose_into(self.value(a).data(), batches, r, c, &mut out, false);
        let mut out_shape = shape;
        let rank = out_shape.len();
        out_shape.swap(rank - 2, rank - 1);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Transpose { a }, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim("permute", &shape, perm));
        }
        let mut out = vec![T::zero(); numel(&shape)];
        permute_into(self.value(a).data(), &shape, perm, &mut out, false);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute { a, perm: perm.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if !is_suffix(vb.shape(), va.shape()) {
            return Err(Error::dim(op, va.shape(), vb.shape()));
        }
        let bd = vb.data();
        let data = if bd.is_empty() {
            Vec::new()
        } else {
            va.data()
                .chunks(bd.len())
                .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        Tensor::new(va.shape().to_vec(), data)
    }

    /// `a + b`, where `b`'s shape equals `a`'s or is a suffix of it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let factor = T::lit(factor);
        let value = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Square { a }, rg)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: T = self.value(a).data().iter().copied().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(total), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Numerically stable softmax over the last extent.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let width = *va
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax", va.shape(), &[]))?;
        if width == 0 {
            return Err(Error::dim("softmax", va.shape(), &[1]));
        }
        if va.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total = total + *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Softmax { a }, rg))
    }

    /// Normalizes each last-extent slice to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer norm eps must be positive, got {eps}")));
        }
        let vx = self.value(x);
        let width = *vx
            .shape()
            .last()
            .ok_or_else(|| Error::dim("layer_norm", vx.shape(), &[]))?;
        for p in [gain, bias] {
            if self.shape(p) != [width] {
                return Err(Error::dim("layer_norm", self.value(x).shape(), self.shape(p)));
            }
        }
        let eps = T::lit(eps);
        let inv_w = T::lit(1.0 / width.max(1) as f64);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = if width == 0 { 0 } else { vx.len() / width };
        let mut normalized = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.len()];
        for (r, row) in vx.data().chunks(width.max(1)).enumerate().take(rows) {
            let mean = row.iter().copied().sum::<T>() * inv_w;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (i, &v) in row.iter().enumerate() {
                let xh = (v - mean) * rs;
                normalized[r * width + i] = xh;
                out[r * width + i] = xh * g[i] + b[i];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            },
            rg,
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_scalar);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Gelu { a }, rg)
    }

    /// Selects rows along the second-to-last axis: `out[.., i, :] = a[.., idx[i], :]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let (n, e) = last2(&shape).ok_or_else(|| Error::dim("gather_rows", &shape, &[]))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                extent: n,
            });
        }
        let outer = numel(&shape[..shape.len() - 2]);
        let mut out = Vec::with_capacity(outer * idx.len() * e);
        for o in 0..outer {
            let block = &va.data()[o * n * e..(o + 1) * n * e];
            for &i in idx {
                out.extend_from_slice(&block[i * e..(i + 1) * e]);
            }
        }
        let mut out_shape = shape;
        let rank = out_shape.len();
        out_shape[rank - 2] = idx.len();
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::GatherRows { a, idx: idx.to_vec() },
            rg,
        ))
    }

    /// Concatenates along the second-to-last axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible =
            sa.len() >= 2 && sa.len() == sb.len() && sa[..sa.len() - 2] == sb[..sb.len() - 2] && sa.last() == sb.last();
        if !compatible {
            return Err(Error::dim("concat_rows", &sa, &sb));
        }
        let rank = sa.len();
        let e = sa[rank - 1];
        let (na, nb) = (sa[rank - 2], sb[rank - 2]);
        let outer = numel(&sa[..rank - 2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(outer * (na + nb) * e);
        for o in 0..outer {
            out.extend_from_slice(&da[o * na * e..(o + 1) * na * e]);
            out.extend_from_slice(&db[o * nb * e..(o + 1) * nb * e]);
        }
        let mut out_shape = sa;
        out_shape[rank - 2] = na + nb;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::ConcatRows { a, b }, rg))
    }

    /// Repeats `a` along new leading extents.
    pub fn broadcast_to(&mut self, a: Var, leading: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let reps = numel(leading);
        let mut out = Vec::with_capacity(reps * va.len());
        for _ in 0..reps {
            out.extend_from_slice(va.data());
        }
        let mut shape = leading.to_vec();
        shape.extend_from_slice(va.shape());
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::BroadcastTo { a }, rg))
    }

    /// Propagates from a scalar `loss` to every differentiable node reachable
    /// from it. The tape itself is left untouched, so repeated calls yield
    /// identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, mode, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let (ik, in_) = (k as isize, n as isize);
                // dA = dC·Bᵀ, dB = Aᵀ·dC; transposes are stride views.
                if let Some(ga) = self.slot(grads, *a) {
                    match *mode {
                        MatmulMode::Batched { batches } => {
                            for t in 0..batches {
                                T::gemm(
                                    m,
                                    n,
                                    k,
                                    &g[t * m * n..(t + 1) * m * n],
                                    (in_, 1),
                                    &bd[t * k * n..(t + 1) * k * n],
                                    (1, in_),
                                    T::one(),
                                    &mut ga[t * m * k..(t + 1) * m * k],
                                    (ik, 1),
                                );
                            }
                        }
                        MatmulMode::SharedRhs { rows } => {
                            T::gemm(rows, n, k, g, (in_, 1), bd, (1, in_), T::one(), ga, (ik, 1));
                        }
                        MatmulMode::SharedLhs { batches } => {
                            for t in 0..batches {
                                T::gemm(
                                    m,
                                    n,
                                    k,
                                    &g[t * m * n..(t + 1) * m * n],
                                    (in_, 1),
                                    &bd[t * k * n..(t + 1) * k * n],
                                    (1, in_),
                                    T::one(),
                                    ga,
                                    (ik, 1),
                                );
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    match *mode {
                        MatmulMode::Batched { batches } => {
                            for t in 0..batches {
                                T::gemm(
                                    k,
                                    m,
                                    n,
                                    &ad[t * m * k..(t + 1) * m * k],
                                    (1, ik),
                                    &g[t * m * n..(t + 1) * m * n],
                                    (in_, 1),
                                    T::one(),
                                    &mut gb[t * k * n..(t + 1) * k * n],
                                    (in_, 1),
                                );
                            }
                        }
                        MatmulMode::SharedRhs { rows } => {
                            T::gemm(k, rows, n, ad, (1, ik), g, (in_, 1), T::one(), gb, (in_, 1));
                        }
                        MatmulMode::SharedLhs { batches } => {
                            for t in 0..batches {
                                T::gemm(
                                    k,
                                    m,
                                    n,
                                    ad,
                                    (1, ik),
                                    &g[t * m * n..(t + 1) * m * n],
                                    (in_, 1),
                                    T::one(),
                                    &mut gb[t * k * n..(t + 1) * k * n],
                                    (in_, 1),
                                );
                            }
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    // The output has the swapped extents; transposing back.
                    let shape = node.value.shape();
                    let (r, c) = last2(shape).expect("rank checked in forward");
                    let batches = numel(&shape[..shape.len() - 2]);
                    transpose_into(g, batches, r, c, ga, true);
                }
            }
            Op::Permute { a, perm } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    permute_into(g, node.value.shape(), &inverse, ga, true);
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -T::one()
                } else {
                    T::one()
                };
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let w = gb.len();
                    if w > 0 {
                        for chunk in g.chunks(w) {
                            gb.iter_mut().zip(chunk).for_each(|(x, &y)| *x = *x + sign * y);
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let w = bd.len();
                if w == 0 {
                    return;
                }
                if let Some(ga) = self.slot(grads, *a) {
                    for (gchunk, gachunk) in g.chunks(w).zip(ga.chunks_mut(w)) {
                        for ((x, &y), &bv) in gachunk.iter_mut().zip(gchunk).zip(bd) {
                            *x = *x + y * bv;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (gchunk, achunk) in g.chunks(w).zip(ad.chunks(w)) {
                        for ((x, &y), &av) in gb.iter_mut().zip(gchunk).zip(achunk) {
                            *x = *x + y * av;
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * *factor);
                }
            }
            Op::Square { a } => {
                let ad = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    let two = T::lit(2.0);
                    for ((x, &y), &av) in ga.iter_mut().zip(g).zip(ad) {
                        *x = *x + two * av * y;
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let s = g[0];
                    ga.iter_mut().for_each(|x| *x = *x + s);
                }
            }
            Op::Softmax { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let y = node.value.data();
                    let w = *node.value.shape().last().expect("rank checked in forward");
                    for ((grow, yrow), garow) in g.chunks(w).zip(y.chunks(w)).zip(ga.chunks_mut(w)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                        for ((x, &gv), &yv) in garow.iter_mut().zip(grow).zip(yrow) {
                            *x = *x + yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            } => {
                let w = self.shape(*gain)[0];
                if w == 0 {
                    return;
                }
                let gv = self.value(*gain).data();
                if let Some(gg) = self.slot(grads, *gain) {
                    for (grow, nrow) in g.chunks(w).zip(normalized.chunks(w)) {
                        for ((acc, &gr), &nr) in gg.iter_mut().zip(grow).zip(nrow) {
                            *acc = *acc + gr * nr;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for grow in g.chunks(w) {
                        gb.iter_mut().zip(grow).for_each(|(acc, &gr)| *acc = *acc + gr);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let inv_w = T::lit(1.0 / w as f64);
                    for (r, ((grow, nrow), gxrow)) in
                        g.chunks(w).zip(normalized.chunks(w)).zip(gx.chunks_mut(w)).enumerate()
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dn = T::zero();
                        for i in 0..w {
                            let d = grow[i] * gv[i];
                            mean_d = mean_d + d;
                            mean_dn = mean_dn + d * nrow[i];
                        }
                        mean_d = mean_d * inv_w;
                        mean_dn = mean_dn * inv_w;
                        for i in 0..w {
                            let d = grow[i] * gv[i];
                            gxrow[i] = gxrow[i] + rstd[r] * (d - mean_d - nrow[i] * mean_dn);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let ad = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &y), &av) in ga.iter_mut().zip(g).zip(ad) {
                        *x = *x + y * gelu_grad_scalar(av);
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let shape = self.shape(*a);
                    let (n, e) = last2(shape).expect("rank checked in forward");
                    let outer = numel(&shape[..shape.len() - 2]);
                    let k = idx.len();
                    for o in 0..outer {
                        for (r, &src) in idx.iter().enumerate() {
                            let from = &g[(o * k + r) * e..(o * k + r + 1) * e];
                            let to = &mut ga[(o * n + src) * e..(o * n + src + 1) * e];
                            to.iter_mut().zip(from).for_each(|(x, &y)| *x = *x + y);
                        }
                    }
                }
            }
            Op::ConcatRows { a, b } => {
                let shape = self.shape(*a);
                let (na, e) = last2(shape).expect("rank checked in forward");
                let nb = self.shape(*b)[shape.len() - 2];
                let outer = numel(&shape[..shape.len() - 2]);
                let row = (na + nb) * e;
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let from = &g[o * row..o * row + na * e];
                        ga[o * na * e..(o + 1) * na * e]
                            .iter_mut()
                            .zip(from)
                            .for_each(|(x, &y)| *x = *x + y);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for o in 0..outer {
                        let from = &g[o * row + na * e..(o + 1) * row];
                        gb[o * nb * e..(o + 1) * nb * e]
                            .iter_mut()
                            .zip(from)
                            .for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::BroadcastTo { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let w = ga.len();
                    if w > 0 {
                        for chunk in g.chunks(w) {
                            ga.iter_mut().zip(chunk).for_each(|(x, &y)| *x = *x + y);
                        }
                    }
                }
            }
        }
    }
}

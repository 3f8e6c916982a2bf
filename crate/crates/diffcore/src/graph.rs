use std::collections::HashMap;

use crate::error::{DiffError, Result};
use crate::gemm::gemm;
use crate::params::ParamStore;
use crate::tensor::{broadcast_map, broadcast_shape, strides, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    BroadcastTo(Var),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Abs(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A tape of forward computations. One graph per forward pass; graphs are
/// independent of each other and never shared across threads.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    macs: u64,
}

/// Gradients of one scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` if it did not reach the loss.
    pub fn get(&self, graph: &Graph, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::from_vec(graph.shape(var).to_vec(), g.clone()).expect("gradient shape"))
    }

    /// Take the gradient of every parameter leaf of `graph` that the loss
    /// reached, keyed by parameter name.
    pub fn into_param_grads(mut self, graph: &Graph) -> Vec<(String, Vec<f64>)> {
        let mut out: Vec<(String, Vec<f64>)> = graph
            .param_nodes()
            .filter_map(|(name, v)| Some((name.to_string(), self.grads.get_mut(v.0)?.take()?)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub(crate) fn raw(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0)?.as_deref()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn permute_values(values: &[f64], in_shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let n = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = values.len();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(values[off]);
        for axis in (0..n).rev() {
            idx[axis] += 1;
            off += eff[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            off -= eff[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    (out, out_shape)
}

/// (outer, axis length, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

/// Sum a full-size gradient down to an operand that was broadcast.
fn reduce_broadcast(full: Vec<f64>, in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if in_shape == out_shape {
        return full;
    }
    let map = broadcast_map(in_shape, out_shape);
    let mut out = vec![0.0; in_shape.iter().product()];
    for (g, &m) in full.iter().zip(&map) {
        out[m] += g;
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant leaf. Gradients still flow into it, but nothing consumes them.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// A trainable leaf copied from `store`. Repeated calls with the same name
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.value(name)?.clone();
        let v = self.push(t, Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub(crate) fn param_nodes(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or(DiffError::ShapeMismatch {
            op,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let va = self.value(a).values();
        let vb = self.value(b).values();
        let values: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = (sa != out_shape).then(|| broadcast_map(&sa, &out_shape));
            let mb = (sb != out_shape).then(|| broadcast_map(&sb, &out_shape));
            let numel: usize = out_shape.iter().product();
            (0..numel)
                .map(|i| {
                    let x = va[ma.as_ref().map_or(i, |m| m[i])];
                    let y = vb[mb.as_ref().map_or(i, |m| m[i])];
                    f(x, y)
                })
                .collect()
        };
        Tensor::from_vec(out_shape, values)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.map_values(x, |v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    fn map_values(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let src = self.value(x);
        Tensor::from_vec(src.shape().to_vec(), src.values().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    /// Matrix product over the last two axes. The right operand is either a
    /// plain matrix shared by every leading index, or has the same leading
    /// axes as the left operand.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || DiffError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let va = self.value(a).values();
        let vb = self.value(b).values();
        let mut out = vec![0.0; out_shape.iter().product()];
        if sb.len() == 2 {
            let rows = va.len() / k.max(1);
            if k == 0 {
                // empty contraction
            } else {
                gemm(rows, k, n, va, false, vb, false, &mut out, false);
            }
            self.macs += (rows * k * n) as u64;
        } else if sa.len() == sb.len() && sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            let batch: usize = sa[..sa.len() - 2].iter().product();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..],
                    false,
                    &vb[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    false,
                );
            }
            self.macs += (batch * m * k * n) as u64;
        } else {
            return Err(err());
        }
        let t = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(DiffError::InvalidArgument {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            });
        }
        let (values, out_shape) = permute_values(self.value(x).values(), &shape, perm);
        let t = Tensor::from_vec(out_shape, values)?;
        Ok(self.push(t, Op::Permute(x, perm.to_vec())))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).len();
        if n < 2 {
            return Err(DiffError::InvalidArgument {
                op: "transpose",
                msg: format!("needs at least 2 axes, got {:?}", self.shape(x)),
            });
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or(DiffError::InvalidArgument {
                op: "concat",
                msg: "no operands".into(),
            })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(DiffError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).values()[o * len..(o + 1) * len]);
            }
        }
        let t = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(DiffError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, l, inner) = split_axis(&shape, axis);
        let src = self.value(x).values();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * l * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(t, Op::Slice { x, axis, start }))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if broadcast_shape(&s, shape).as_deref() != Some(shape) {
            return Err(DiffError::ShapeMismatch {
                op: "broadcast_to",
                lhs: s,
                rhs: shape.to_vec(),
            });
        }
        let map = broadcast_map(&s, shape);
        let src = self.value(x).values();
        let values = map.iter().map(|&m| src[m]).collect();
        let t = Tensor::from_vec(shape.to_vec(), values)?;
        Ok(self.push(t, Op::BroadcastTo(x)))
    }

    fn reduce_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(Tensor, usize)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::InvalidArgument {
                op,
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let (outer, l, inner) = split_axis(&shape, axis);
        let src = self.value(x).values();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..l {
                let row = &src[(o * l + j) * inner..(o * l + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok((Tensor::from_vec(out_shape, out)?, l))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (t, _) = self.reduce_axis("sum", x, axis)?;
        Ok(self.push(t, Op::Sum(x, axis)))
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (mut t, l) = self.reduce_axis("mean", x, axis)?;
        let inv = 1.0 / l as f64;
        t.values_mut().iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(t, Op::Mean(x, axis)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let t = self.map_values(x, f64::sin);
        self.push(t, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let t = self.map_values(x, f64::cos);
        self.push(t, Op::Cos(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map_values(x, f64::exp);
        self.push(t, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map_values(x, sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map_values(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map_values(x, gelu);
        self.push(t, Op::Gelu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.map_values(x, f64::abs);
        self.push(t, Op::Abs(x))
    }

    fn last_axis(&self, op: &'static str, x: Var) -> Result<usize> {
        match self.shape(x).last() {
            Some(&l) if l > 0 => Ok(l),
            _ => Err(DiffError::InvalidArgument {
                op,
                msg: format!("needs a non-empty last axis, got {:?}", self.shape(x)),
            }),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let l = self.last_axis("softmax", x)?;
        let src = self.value(x);
        let mut out = src.values().to_vec();
        for row in out.chunks_mut(l) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let t = Tensor::from_vec(src.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    /// Normalize each row of the last axis to zero mean and unit variance.
    /// No affine transform; callers compose one from `mul` and `add`.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let l = self.last_axis("layer_norm", x)?;
        let src = self.value(x);
        let mut out = src.values().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / l);
        for row in out.chunks_mut(l) {
            let mean = row.iter().sum::<f64>() / l as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / l as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let t = Tensor::from_vec(src.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, inv_std }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            let node = &self.nodes[i];
            let out_shape = node.value.shape();
            let out = node.value.values();
            match &node.op {
                Op::Input | Op::Param => {}
                Op::Add(a, b) => {
                    let ga = reduce_broadcast(g.to_vec(), self.shape(*a), out_shape);
                    let gb = reduce_broadcast(g.to_vec(), self.shape(*b), out_shape);
                    accumulate(&mut lo[a.0], ga);
                    accumulate(&mut lo[b.0], gb);
                }
                Op::Sub(a, b) => {
                    let ga = reduce_broadcast(g.to_vec(), self.shape(*a), out_shape);
                    let gb = reduce_broadcast(g.iter().map(|v| -v).collect(), self.shape(*b), out_shape);
                    accumulate(&mut lo[a.0], ga);
                    accumulate(&mut lo[b.0], gb);
                }
                Op::Mul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (va, vb) = (self.value(*a).values(), self.value(*b).values());
                    let ma = (sa != out_shape).then(|| broadcast_map(sa, out_shape));
                    let mb = (sb != out_shape).then(|| broadcast_map(sb, out_shape));
                    let idx = |m: &Option<Vec<usize>>, i: usize| m.as_ref().map_or(i, |m| m[i]);
                    let ga_full = (0..g.len()).map(|i| g[i] * vb[idx(&mb, i)]).collect();
                    let gb_full = (0..g.len()).map(|i| g[i] * va[idx(&ma, i)]).collect();
                    accumulate(&mut lo[a.0], reduce_broadcast(ga_full, sa, out_shape));
                    accumulate(&mut lo[b.0], reduce_broadcast(gb_full, sb, out_shape));
                }
                Op::Scale(x, c) => {
                    accumulate(&mut lo[x.0], g.iter().map(|v| v * c).collect());
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (va, vb) = (self.value(*a).values(), self.value(*b).values());
                    let k = sa[sa.len() - 1];
                    let m = sa[sa.len() - 2];
                    let n = sb[sb.len() - 1];
                    let mut ga = vec![0.0; va.len()];
                    let mut gb = vec![0.0; vb.len()];
                    if sb.len() == 2 {
                        let rows = va.len() / k.max(1);
                        if k > 0 {
                            gemm(rows, n, k, g, false, vb, true, &mut ga, false);
                            gemm(k, rows, n, va, true, g, false, &mut gb, false);
                        }
                    } else {
                        let batch = va.len() / (m * k).max(1);
                        for bi in 0..batch {
                            let gs = &g[bi * m * n..];
                            gemm(m, n, k, gs, false, &vb[bi * k * n..], true, &mut ga[bi * m * k..], false);
                            gemm(k, m, n, &va[bi * m * k..], true, gs, false, &mut gb[bi * k * n..], false);
                        }
                    }
                    accumulate(&mut lo[a.0], ga);
                    accumulate(&mut lo[b.0], gb);
                }
                Op::Permute(x, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (gx, _) = permute_values(g, out_shape, &inv);
                    accumulate(&mut lo[x.0], gx);
                }
                Op::Reshape(x) => accumulate(&mut lo[x.0], g.to_vec()),
                Op::Concat(parts, axis) => {
                    let (outer, _, inner) = split_axis(out_shape, *axis);
                    let mut offset = 0;
                    let mut pieces: Vec<Vec<f64>> = parts
                        .iter()
                        .map(|p| Vec::with_capacity(self.value(*p).len()))
                        .collect();
                    for _ in 0..outer {
                        for (p, piece) in parts.iter().zip(pieces.iter_mut()) {
                            let len = self.shape(*p)[*axis] * inner;
                            piece.extend_from_slice(&g[offset..offset + len]);
                            offset += len;
                        }
                    }
                    for (p, piece) in parts.iter().zip(pieces) {
                        accumulate(&mut lo[p.0], piece);
                    }
                }
                Op::Slice { x, axis, start } => {
                    let sx = self.shape(*x);
                    let (outer, l, inner) = split_axis(sx, *axis);
                    let len = out_shape[*axis];
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for o in 0..outer {
                        let dst = o * l * inner + start * inner;
                        gx[dst..dst + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    accumulate(&mut lo[x.0], gx);
                }
                Op::BroadcastTo(x) => {
                    accumulate(&mut lo[x.0], reduce_broadcast(g.to_vec(), self.shape(*x), out_shape));
                }
                Op::Sum(x, axis) | Op::Mean(x, axis) => {
                    let sx = self.shape(*x);
                    let (outer, l, inner) = split_axis(sx, *axis);
                    let c = if matches!(node.op, Op::Mean(..)) { 1.0 / l as f64 } else { 1.0 };
                    let mut gx = Vec::with_capacity(outer * l * inner);
                    for o in 0..outer {
                        for _ in 0..l {
                            gx.extend(g[o * inner..(o + 1) * inner].iter().map(|v| v * c));
                        }
                    }
                    accumulate(&mut lo[x.0], gx);
                }
                Op::SumAll(x) => {
                    accumulate(&mut lo[x.0], vec![g[0]; self.value(*x).len()]);
                }
                Op::Sin(x) => {
                    let vx = self.value(*x).values();
                    accumulate(&mut lo[x.0], g.iter().zip(vx).map(|(g, v)| g * v.cos()).collect());
                }
                Op::Cos(x) => {
                    let vx = self.value(*x).values();
                    accumulate(&mut lo[x.0], g.iter().zip(vx).map(|(g, v)| -g * v.sin()).collect());
                }
                Op::Exp(x) => {
                    accumulate(&mut lo[x.0], g.iter().zip(out).map(|(g, y)| g * y).collect());
                }
                Op::Sigmoid(x) => {
                    accumulate(&mut lo[x.0], g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect());
                }
                Op::Relu(x) => {
                    let vx = self.value(*x).values();
                    let gx = g.iter().zip(vx).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                    accumulate(&mut lo[x.0], gx);
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x).values();
                    accumulate(&mut lo[x.0], g.iter().zip(vx).map(|(g, &v)| g * gelu_grad(v)).collect());
                }
                Op::Abs(x) => {
                    let vx = self.value(*x).values();
                    let gx = g
                        .iter()
                        .zip(vx)
                        .map(|(g, &v)| if v > 0.0 { *g } else if v < 0.0 { -g } else { 0.0 })
                        .collect();
                    accumulate(&mut lo[x.0], gx);
                }
                Op::Softmax(x) => {
                    let l = *out_shape.last().unwrap();
                    let mut gx = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(l).zip(out.chunks(l)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        gx.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
                    }
                    accumulate(&mut lo[x.0], gx);
                }
                Op::LayerNorm { x, inv_std } => {
                    let l = *out_shape.last().unwrap();
                    let mut gx = Vec::with_capacity(g.len());
                    for ((gr, yr), is) in g.chunks(l).zip(out.chunks(l)).zip(inv_std) {
                        let mg = gr.iter().sum::<f64>() / l as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / l as f64;
                        gx.extend(gr.iter().zip(yr).map(|(gi, yi)| is * (gi - mg - yi * mgy)));
                    }
                    accumulate(&mut lo[x.0], gx);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 5], 3.7));
        let y = g.softmax(x).unwrap();
        for v in g.value(y).values() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[4, 7], |i| (i as f64 * 1.3).sin() * 30.0));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).values().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[3, 4], -2.5));
        let y = g.layer_norm(x, 1e-5).unwrap();
        assert!(g.value(y).values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[3, 16], |i| (i as f64).powi(2).sin() * 4.0 + 1.0));
        let y = g.layer_norm(x, 0.0).unwrap();
        for row in g.value(y).values().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 2]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
        let err = g.matmul(a, a).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2], &[1.0, -3.0, 0.5, 2.0]));
        let s = g.sum_all(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(&g, x).unwrap().values(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_twice_x() {
        let mut g = Graph::new();
        let xv = [1.0, -3.0, 0.5, 2.0];
        let x = g.input(t(&[4], &xv));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq);
        let grads = g.backward(s).unwrap();
        let gx = grads.get(&g, x).unwrap();
        for (a, b) in gx.values().iter().zip(xv) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3]));
        assert_eq!(g.backward(x).unwrap_err(), DiffError::NonScalarLoss(vec![3]));
    }

    #[test]
    fn unreachable_nodes_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3]));
        let y = g.input(Tensor::zeros(&[3]));
        let s = g.sum_all(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(&g, y).is_none());
    }

    #[test]
    fn matmul_counts_macs() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[5, 3, 4]));
        let b = g.input(Tensor::zeros(&[4, 2]));
        g.matmul(a, b).unwrap();
        assert_eq!(g.macs(), 5 * 3 * 4 * 2);
        let c = g.input(Tensor::zeros(&[5, 4, 6]));
        g.matmul(a, c).unwrap();
        assert_eq!(g.macs(), 5 * 3 * 4 * 2 + 5 * 3 * 4 * 6);
    }

    #[test]
    fn permute_then_inverse_is_identity() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64));
        let y = g.permute(x, &[0, 2, 3, 1]).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 5, 3]);
        assert_eq!(g.value(y).at(&[1, 2, 3, 0]), g.value(x).at(&[1, 0, 2, 3]));
        let z = g.permute(y, &[0, 3, 1, 2]).unwrap();
        assert_eq!(g.value(z), g.value(x));
        assert!(g.permute(x, &[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let b = g.input(Tensor::from_fn(&[2, 1, 2], |i| 100.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 4, 2]);
        assert_eq!(g.value(c).at(&[1, 3, 1]), 103.0);
        let s = g.slice(c, 1, 0, 3).unwrap();
        assert_eq!(g.value(s), g.value(a));
        let s = g.slice(c, 1, 3, 1).unwrap();
        assert_eq!(g.value(s), g.value(b));
    }

    #[test]
    fn mean_and_sum_over_axis() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = g.sum(x, 0).unwrap();
        assert_eq!(g.value(s).values(), &[3.0, 5.0, 7.0]);
        let m = g.mean(x, 1).unwrap();
        assert_eq!(g.value(m).values(), &[1.0, 4.0]);
    }
}

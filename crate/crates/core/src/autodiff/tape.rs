//! Define-by-run reverse-mode tape.
//!
//! Every primitive appends one node holding its output value and the indices
//! of its inputs. `backward` walks the nodes in reverse insertion order, which
//! is a valid reverse topological order because inputs always precede outputs.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Masking and head layout for [`Tape::attention`].
#[derive(Clone, Debug, Default)]
pub struct AttentionSpec {
    pub heads: usize,
    /// `Some(offset)` lets query `i` see keys `j <= i + offset`.
    pub causal_offset: Option<isize>,
    /// Per-key admissibility, laid out `[batch, keys]`.
    pub key_mask: Option<Vec<bool>>,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Tanh,
    Erf,
    Relu,
    Gelu,
    Abs,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: Binary, a: usize, b: usize },
    Unary { kind: Unary, x: usize },
    Sum(usize),
    Mean(usize),
    MatMul { a: usize, b: usize },
    Reshape(usize),
    Transpose(usize),
    Slice { x: usize, axis: usize, start: usize },
    IndexSelect { x: usize, axis: usize, indices: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    BroadcastTo(usize),
    LayerNorm { x: usize, scale: usize, shift: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One tape per forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
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

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    /// Gradient-tracked leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copies `x` into an untracked leaf: nothing upstream of the copy
    /// receives gradient through it.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let value = self.nodes[i].value.clone();
        Ok(self.constant(value))
    }

    /// # Panics
    /// If `v` was created by another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.idx(v).expect("variable from another tape");
        &self.nodes[i].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.idx(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let i = self.idx(v).ok()?;
        self.grads.get(i)?.as_deref()
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let sa = self.nodes[ia].value.shape().to_vec();
        let sb = self.nodes[ib].value.shape().to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let da = self.nodes[ia].value.data();
        let db = self.nodes[ib].value.data();
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&sa, &out_shape);
            let mb = broadcast_map(&sb, &out_shape);
            (0..out_shape.iter().product())
                .map(|i| f(da[src(&ma, i)], db[src(&mb, i)]))
                .collect()
        };
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Binary { kind, a: ia, b: ib }, rg))
    }

    /// Elementwise sum with trailing-dimension broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let input = &self.nodes[ix].value;
        let f: fn(f64, f64) -> f64 = match kind {
            Unary::Neg => |v, _| -v,
            Unary::Scale(_) => |v, c| v * c,
            Unary::AddScalar(_) => |v, c| v + c,
            Unary::Exp => |v, _| v.exp(),
            Unary::Tanh => |v, _| v.tanh(),
            Unary::Erf => |v, _| libm::erf(v),
            Unary::Relu => |v, _| v.max(0.0),
            Unary::Gelu => |v, _| gelu_scalar(v),
            Unary::Abs => |v, _| v.abs(),
            Unary::Square => |v, _| v * v,
        };
        let c = match kind {
            Unary::Scale(c) | Unary::AddScalar(c) => c,
            _ => 0.0,
        };
        let data = input.data().iter().map(|&v| f(v, c)).collect();
        let value = Tensor::new(input.shape().to_vec(), data)?;
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(value, Op::Unary { kind, x: ix }, rg))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(c), x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn erf(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Erf, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    /// `|x|`; the derivative at 0 is taken as +1.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.data().iter().sum();
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = &self.nodes[ix].value;
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(Tensor::scalar(m), Op::Mean(ix), rg))
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a[..., k] @ b[k, n] -> [..., n]`; leading dims of `a` are flattened
    /// into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if vb.rank() != 2 || va.rank() == 0 {
            return shape_err(format!("matmul {:?} x {:?}", va.shape(), vb.shape()));
        }
        let (k, n) = (vb.shape()[0], vb.shape()[1]);
        if *va.shape().last().unwrap() != k {
            return shape_err(format!("matmul {:?} x {:?}", va.shape(), vb.shape()));
        }
        let m = va.numel() / k;
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a: ia, b: ib }, rg))
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let value = self.nodes[ix].value.clone().reshape(shape.to_vec())?;
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(value, Op::Reshape(ix), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = &self.nodes[ix].value;
        if v.rank() < 2 {
            return shape_err(format!("transpose needs rank >= 2, got {:?}", v.shape()));
        }
        let r = v.rank();
        let (rows, cols) = (v.shape()[r - 2], v.shape()[r - 1]);
        let batch = v.numel() / (rows * cols);
        let mut out = vec![0.0; v.numel()];
        transpose_into(v.data(), &mut out, batch, rows, cols);
        let mut shape = v.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose(ix), rg))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = &self.nodes[ix].value;
        if axis >= v.rank() || len == 0 || start + len > v.shape()[axis] {
            return shape_err(format!(
                "slice axis {axis} [{start}, {}) of {:?}",
                start + len,
                v.shape()
            ));
        }
        let indices: Vec<usize> = (start..start + len).collect();
        let data = gather_axis(v, axis, &indices);
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { x: ix, axis, start }, rg))
    }

    /// Gathers the listed positions along `axis` (repeats allowed).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = &self.nodes[ix].value;
        if axis >= v.rank() || indices.is_empty() || indices.iter().any(|&i| i >= v.shape()[axis]) {
            return shape_err(format!("index_select axis {axis} {indices:?} of {:?}", v.shape()));
        }
        let data = gather_axis(v, axis, indices);
        let mut shape = v.shape().to_vec();
        shape[axis] = indices.len();
        let rg = self.nodes[ix].requires_grad;
        let op = Op::IndexSelect { x: ix, axis, indices: indices.to_vec() };
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let ids = xs.iter().map(|&x| self.idx(x)).collect::<Result<Vec<_>>>()?;
        let Some(&first) = ids.first() else {
            return shape_err("concat of nothing");
        };
        let base = self.nodes[first].value.shape().to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} of {base:?}"));
        }
        let mut total = 0;
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return shape_err(format!("concat {base:?} with {s:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &ids {
                let v = &self.nodes[i].value;
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = ids.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { inputs: ids, axis }, rg))
    }

    /// Explicit broadcast under trailing-dimension alignment.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = &self.nodes[ix].value;
        let out = broadcast_shape(v.shape(), shape)?;
        if out != shape {
            return shape_err(format!("cannot broadcast {:?} to {shape:?}", v.shape()));
        }
        let map = broadcast_map(v.shape(), shape);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| v.data()[src(&map, i)]).collect();
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::BroadcastTo(ix), rg))
    }

    // ---------------------------------------------------------------- fused network ops

    /// Normalizes over the last axis with population variance, then applies
    /// `scale` and `shift` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (ix, is, ib) = (self.idx(x)?, self.idx(scale)?, self.idx(shift)?);
        let v = &self.nodes[ix].value;
        let n = *v.shape().last().ok_or_else(|| Error::Shape("layer_norm of scalar".into()))?;
        let (gs, gb) = (&self.nodes[is].value, &self.nodes[ib].value);
        if gs.shape() != [n] || gb.shape() != [n] {
            return shape_err(format!(
                "layer_norm params {:?}/{:?} for last dim {n}",
                gs.shape(),
                gb.shape()
            ));
        }
        let rows = v.numel() / n;
        let mut xhat = vec![0.0; v.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; v.numel()];
        for r in 0..rows {
            let xs = &v.data()[r * n..(r + 1) * n];
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (xs[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gs.data()[c] + gb.data()[c];
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = [ix, is, ib].iter().any(|&i| self.nodes[i].requires_grad);
        let op = Op::LayerNorm { x: ix, scale: is, shift: ib, xhat, rstd };
        Ok(self.push(value, op, rg))
    }

    /// Multi-head scaled dot-product attention without projections.
    ///
    /// `q: [B, Cq, d]`, `k, v: [B, Ck, d]`, output `[B, Cq, d]` with heads
    /// concatenated along the last axis. Scores are scaled by `1/sqrt(d/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Result<Var> {
        let (iq, ik, iv) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let (vq, vk, vv) = (&self.nodes[iq].value, &self.nodes[ik].value, &self.nodes[iv].value);
        let dims = AttnDims::new(vq.shape(), vk.shape(), vv.shape(), spec)?;
        let probs = attention_probs(vq.data(), vk.data(), spec, &dims)?;
        let mut out = vec![0.0; dims.b * dims.cq * dims.d];
        let AttnDims { b: nb, h: nh, cq, ck, d, hd } = dims;
        for b in 0..nb {
            for h in 0..nh {
                for i in 0..cq {
                    let prow = &probs[((b * nh + h) * cq + i) * ck..][..ck];
                    let orow = &mut out[(b * cq + i) * d + h * hd..][..hd];
                    for (j, &p) in prow.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = &vv.data()[(b * ck + j) * d + h * hd..][..hd];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new([nb, cq, d], out)?;
        let rg = [iq, ik, iv].iter().any(|&i| self.nodes[i].requires_grad);
        let op = Op::Attention { q: iq, k: ik, v: iv, heads: nh, probs };
        Ok(self.push(value, op, rg))
    }

    /// Attention weights `[B, heads, Cq, Ck]` recorded by an attention node.
    pub fn attention_weights(&self, out: Var) -> Option<&[f64]> {
        let i = self.idx(out).ok()?;
        match &self.nodes[i].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ---------------------------------------------------------------- backward

    /// Populates gradients of `loss` with respect to every tracked ancestor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.idx(loss)?;
        let lv = &self.nodes[il].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let tracked = |j: usize| nodes[j].requires_grad;
        let val = |j: usize| &nodes[j].value;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let out_shape = out.shape();
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let ma = broadcast_map(sa, out_shape);
                let mb = broadcast_map(sb, out_shape);
                if tracked(a) {
                    let buf = slot(grads, a, val(a).numel());
                    for (o, &go) in g.iter().enumerate() {
                        let ga = match kind {
                            Binary::Add | Binary::Sub => go,
                            Binary::Mul => go * val(b).data()[src(&mb, o)],
                        };
                        buf[src(&ma, o)] += ga;
                    }
                }
                if tracked(b) {
                    let buf = slot(grads, b, val(b).numel());
                    for (o, &go) in g.iter().enumerate() {
                        let gb = match kind {
                            Binary::Add => go,
                            Binary::Sub => -go,
                            Binary::Mul => go * val(a).data()[src(&ma, o)],
                        };
                        buf[src(&mb, o)] += gb;
                    }
                }
            }
            Op::Unary { kind, x } => {
                let x = *x;
                if !tracked(x) {
                    return;
                }
                let xs = val(x).data();
                let ys = out.data();
                let buf = slot(grads, x, xs.len());
                for idx in 0..xs.len() {
                    let (xv, yv, go) = (xs[idx], ys[idx], g[idx]);
                    let d = match kind {
                        Unary::Neg => -1.0,
                        Unary::Scale(c) => *c,
                        Unary::AddScalar(_) => 1.0,
                        Unary::Exp => yv,
                        Unary::Tanh => 1.0 - yv * yv,
                        Unary::Erf => 2.0 * INV_SQRT_2PI * std::f64::consts::SQRT_2 * (-xv * xv).exp(),
                        Unary::Relu => {
                            if xv > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Gelu => gelu_grad(xv),
                        Unary::Abs => {
                            if xv >= 0.0 {
                                1.0
                            } else {
                                -1.0
                            }
                        }
                        Unary::Square => 2.0 * xv,
                    };
                    buf[idx] += go * d;
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let x = *x;
                if !tracked(x) {
                    return;
                }
                let n = val(x).numel();
                let scale = if matches!(nodes[i].op, Op::Mean(_)) { 1.0 / n as f64 } else { 1.0 };
                let buf = slot(grads, x, n);
                for b in buf.iter_mut() {
                    *b += g[0] * scale;
                }
            }
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (va, vb) = (val(a), val(b));
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = va.numel() / k;
                if tracked(a) {
                    let buf = slot(grads, a, m * k);
                    matmul_nt_acc(g, vb.data(), buf, m, n, k);
                }
                if tracked(b) {
                    let buf = slot(grads, b, k * n);
                    matmul_tn_acc(va.data(), g, buf, m, k, n);
                }
            }
            Op::Reshape(x) => {
                if tracked(*x) {
                    let buf = slot(grads, *x, g.len());
                    add_into(buf, g);
                }
            }
            Op::Transpose(x) => {
                let x = *x;
                if !tracked(x) {
                    return;
                }
                let s = out.shape();
                let r = s.len();
                let (rows, cols) = (s[r - 2], s[r - 1]);
                let mut t = vec![0.0; g.len()];
                transpose_into(g, &mut t, g.len() / (rows * cols), rows, cols);
                add_into(slot(grads, x, g.len()), &t);
            }
            Op::Slice { x, axis, start } => {
                let x = *x;
                if !tracked(x) {
                    return;
                }
                let len = out.shape()[*axis];
                let indices: Vec<usize> = (*start..*start + len).collect();
                scatter_axis(val(x).shape(), *axis, &indices, g, slot(grads, x, val(x).numel()));
            }
            Op::IndexSelect { x, axis, indices } => {
                let x = *x;
                if !tracked(x) {
                    return;
                }
                scatter_axis(val(x).shape(), *axis, indices, g, slot(grads, x, val(x).numel()));
            }
            Op::Concat { inputs, axis } => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis];
                let mut offset = 0;
                for &inp in inputs {
                    let width = val(inp).shape()[*axis];
                    if tracked(inp) {
                        let buf = slot(grads, inp, val(inp).numel());
                        for o in 0..outer {
                            let src_block = &g[(o * total + offset) * inner..][..width * inner];
                            add_into(&mut buf[o * width * inner..][..width * inner], src_block);
                        }
                    }
                    offset += width;
                }
            }
            Op::BroadcastTo(x) => {
                let x = *x;
                if !tracked(x) {
                    return;
                }
                let map = broadcast_map(val(x).shape(), out.shape());
                let buf = slot(grads, x, val(x).numel());
                for (o, &go) in g.iter().enumerate() {
                    buf[src(&map, o)] += go;
                }
            }
            Op::LayerNorm { x, scale, shift, xhat, rstd } => {
                let (x, scale, shift) = (*x, *scale, *shift);
                let n = *out.shape().last().unwrap();
                let rows = out.numel() / n;
                let gamma = val(scale).data();
                if tracked(x) {
                    let buf = slot(grads, x, rows * n);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rows {
                        let gr = &g[r * n..][..n];
                        let hr = &xhat[r * n..][..n];
                        for c in 0..n {
                            dxhat[c] = gr[c] * gamma[c];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / n as f64;
                        let m2 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let br = &mut buf[r * n..][..n];
                        for c in 0..n {
                            br[c] += rstd[r] * (dxhat[c] - m1 - hr[c] * m2);
                        }
                    }
                }
                if tracked(scale) {
                    let buf = slot(grads, scale, n);
                    for r in 0..rows {
                        for c in 0..n {
                            buf[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if tracked(shift) {
                    let buf = slot(grads, shift, n);
                    for r in 0..rows {
                        add_into(buf, &g[r * n..][..n]);
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let (sq, sk) = (val(q).shape(), val(k).shape());
                let dims = AttnDims { b: sq[0], h: *heads, cq: sq[1], ck: sk[1], d: sq[2], hd: sq[2] / heads };
                let (dq, dk, dv) = attention_backward(
                    g,
                    val(q).data(),
                    val(k).data(),
                    val(v).data(),
                    probs,
                    &dims,
                );
                for (idx, d) in [(q, dq), (k, dk), (v, dv)] {
                    if tracked(idx) {
                        add_into(slot(grads, idx, d.len()), &d);
                    }
                }
            }
        }
    }
}

// -------------------------------------------------------------------- helpers

fn slot(grads: &mut [Option<Vec<f64>>], idx: usize, n: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Standard normal CDF via `erfc`, which keeps the negative tail from cancelling to zero.
fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * INV_SQRT_2)
}

fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = std_normal_cdf(x);
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// Output shape of a binary op under trailing-dimension alignment.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Source index for every output element, or `None` when the shapes agree.
fn broadcast_map(shape: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if shape == out {
        return None;
    }
    let n: usize = out.iter().product();
    let numel: usize = shape.iter().product();
    // Pure rank padding: the input repeats with period `numel`.
    if out.ends_with(shape) {
        return Some((0..n).map(|i| i % numel).collect());
    }
    let pad = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + pad] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0; out.len()];
    let mut cur = 0;
    for _ in 0..n {
        map.push(cur);
        for ax in (0..out.len()).rev() {
            counter[ax] += 1;
            cur += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            cur -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Some(map)
}

#[inline]
fn src(map: &Option<Vec<usize>>, i: usize) -> usize {
    match map {
        Some(m) => m[i],
        None => i,
    }
}

fn gather_axis(v: &Tensor, axis: usize, indices: &[usize]) -> Vec<f64> {
    let s = v.shape();
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let dim = s[axis];
    let mut data = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &j in indices {
            data.extend_from_slice(&v.data()[(o * dim + j) * inner..][..inner]);
        }
    }
    data
}

fn scatter_axis(shape: &[usize], axis: usize, indices: &[usize], g: &[f64], buf: &mut [f64]) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let dim = shape[axis];
    for o in 0..outer {
        for (jj, &j) in indices.iter().enumerate() {
            let src_row = &g[(o * indices.len() + jj) * inner..][..inner];
            add_into(&mut buf[(o * dim + j) * inner..][..inner], src_row);
        }
    }
}

fn transpose_into(src: &[f64], dst: &mut [f64], batch: usize, rows: usize, cols: usize) {
    for b in 0..batch {
        let base = b * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                dst[base + c * rows + r] = src[base + r * cols + c];
            }
        }
    }
}

/// `out[m, n] = a[m, k] @ b[k, n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        let arow = &a[i * k..][..k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..][..n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `acc[m, k] += g[m, n] @ b[k, n]^T`.
fn matmul_nt_acc(g: &[f64], b: &[f64], acc: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..][..n];
        let arow = &mut acc[i * k..][..k];
        for (p, a) in arow.iter_mut().enumerate() {
            let brow = &b[p * n..][..n];
            *a += dot(grow, brow);
        }
    }
}

/// `acc[k, n] += a[m, k]^T @ g[m, n]`.
fn matmul_tn_acc(a: &[f64], g: &[f64], acc: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..][..n];
        let arow = &a[i * k..][..k];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut acc[p * n..][..n];
            for (c, &gv) in crow.iter_mut().zip(grow) {
                *c += av * gv;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociation.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub b: usize,
    pub h: usize,
    pub cq: usize,
    pub ck: usize,
    pub d: usize,
    pub hd: usize,
}

impl AttnDims {
    fn new(sq: &[usize], sk: &[usize], sv: &[usize], spec: &AttentionSpec) -> Result<Self> {
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return shape_err(format!("attention q {sq:?} k {sk:?} v {sv:?}"));
        }
        if spec.heads == 0 || sq[2] % spec.heads != 0 {
            return shape_err(format!("d_model {} not divisible by {} heads", sq[2], spec.heads));
        }
        if let Some(mask) = &spec.key_mask {
            if mask.len() != sk[0] * sk[1] {
                return shape_err(format!("key mask of {} for {sk:?}", mask.len()));
            }
        }
        Ok(Self { b: sq[0], h: spec.heads, cq: sq[1], ck: sk[1], d: sq[2], hd: sq[2] / spec.heads })
    }
}

fn attention_probs(q: &[f64], k: &[f64], spec: &AttentionSpec, dims: &AttnDims) -> Result<Vec<f64>> {
    let AttnDims { b: nb, h: nh, cq, ck, d, hd } = *dims;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs = vec![0.0; nb * nh * cq * ck];
    let mut allowed = vec![false; ck];
    for b in 0..nb {
        for i in 0..cq {
            let mut any = false;
            for (j, ok) in allowed.iter_mut().enumerate() {
                let causal_ok = spec.causal_offset.is_none_or(|off| j as isize <= i as isize + off);
                let key_ok = spec.key_mask.as_ref().is_none_or(|m| m[b * ck + j]);
                *ok = causal_ok && key_ok;
                any |= *ok;
            }
            if !any {
                return Err(Error::EmptyAttentionRow { row: i });
            }
            for h in 0..nh {
                let qrow = &q[(b * cq + i) * d + h * hd..][..hd];
                let prow = &mut probs[((b * nh + h) * cq + i) * ck..][..ck];
                let mut max = f64::NEG_INFINITY;
                for j in 0..ck {
                    if allowed[j] {
                        let krow = &k[(b * ck + j) * d + h * hd..][..hd];
                        let s = dot(qrow, krow) * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                }
                let mut z = 0.0;
                for j in 0..ck {
                    if allowed[j] {
                        let e = (prow[j] - max).exp();
                        prow[j] = e;
                        z += e;
                    }
                }
                for p in prow.iter_mut() {
                    *p /= z;
                }
            }
        }
    }
    Ok(probs)
}

fn attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dims: &AttnDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttnDims { b: nb, h: nh, cq, ck, d, hd } = *dims;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; ck];
    for b in 0..nb {
        for h in 0..nh {
            for i in 0..cq {
                let prow = &probs[((b * nh + h) * cq + i) * ck..][..ck];
                let grow = &g[(b * cq + i) * d + h * hd..][..hd];
                let mut weighted = 0.0;
                for j in 0..ck {
                    if prow[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vrow = &v[(b * ck + j) * d + h * hd..][..hd];
                    dp[j] = dot(grow, vrow);
                    weighted += prow[j] * dp[j];
                    let dvrow = &mut dv[(b * ck + j) * d + h * hd..][..hd];
                    for (o, &gv) in dvrow.iter_mut().zip(grow) {
                        *o += prow[j] * gv;
                    }
                }
                let qoff = (b * cq + i) * d + h * hd;
                for j in 0..ck {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    let koff = (b * ck + j) * d + h * hd;
                    for e in 0..hd {
                        dq[qoff + e] += ds * k[koff + e];
                        dk[koff + e] += ds * q[qoff + e];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

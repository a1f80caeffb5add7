//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward computation as an
//! append-only list of nodes. Handles ([`Tx`]) are indices into that list, so
//! topological order is creation order and the backward sweep is a single
//! reverse iteration. Gradients flow only into nodes reachable from a
//! [`Tape::leaf`]; branches made of constants are skipped entirely.
//!
//! The op set is deliberately closed: everything the models in this workspace
//! need (dense/batched matmul, attention softmax with masking, layer norm,
//! losses, 2-D convolution and nearest upsampling, straight-through
//! estimation via [`Tape::detach_value_keep_gradient`]) and nothing else.

use std::rc::Rc;

use rand::Rng;

use crate::error::{TensorError, TensorResult};
use crate::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::Tensor;
use crate::Real;

/// Handle to a tape node. Only meaningful for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tx(usize);

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

enum Op {
    Leaf,
    Constant,
    Add { a: Tx, b: Tx },
    Sub { a: Tx, b: Tx },
    Mul { a: Tx, b: Tx },
    AddScalar { a: Tx },
    MulScalar { a: Tx, s: Real },
    Matmul { a: Tx, b: Tx },
    Bmm { a: Tx, b: Tx },
    TransposeLast { a: Tx },
    Reshape { a: Tx },
    Concat { parts: Vec<Tx>, axis: usize },
    Slice { a: Tx, axis: usize, start: usize },
    GatherRows { a: Tx, idx: Rc<Vec<usize>> },
    SumAxis { a: Tx, axis: usize },
    MeanAxis { a: Tx, axis: usize },
    SumAll { a: Tx },
    MeanAll { a: Tx },
    Sqrt { a: Tx },
    Log { a: Tx },
    Exp { a: Tx },
    Tanh { a: Tx },
    Relu { a: Tx },
    Gelu { a: Tx },
    Abs { a: Tx },
    ClampMax { a: Tx, cap: Real },
    LayerNorm { x: Tx, gain: Tx, bias: Tx, xhat: Tensor, rstd: Vec<Real> },
    SoftmaxRows { a: Tx, mask: Option<Rc<Vec<bool>>> },
    CrossEntropyLogits { logits: Tx, targets: Rc<Vec<usize>>, row_mask: Option<Rc<Vec<bool>>>, probs: Tensor, selected: usize },
    Mse { a: Tx, b: Tx },
    L1 { a: Tx, b: Tx },
    Conv2d { x: Tx, w: Tx, bias: Option<Tx>, stride: usize, pad: usize },
    Upsample2 { a: Tx },
    Dropout { a: Tx, keep: Rc<Vec<bool>>, scale: Real },
    Detach { grad_src: Tx },
}

/// How two operand shapes line up for elementwise ops: either identical, or
/// the right operand is a single scalar, or its shape is a suffix of the left
/// operand's (broadcast over the leading axes).
enum Broadcast {
    Same,
    Scalar,
    Suffix { repeats: usize },
}

fn broadcast_kind(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorResult<Broadcast> {
    if lhs == rhs {
        return Ok(Broadcast::Same);
    }
    let rn: usize = rhs.iter().product();
    if rn == 1 {
        return Ok(Broadcast::Scalar);
    }
    if rhs.len() < lhs.len() && lhs.ends_with(rhs) {
        let repeats = lhs[..lhs.len() - rhs.len()].iter().product();
        return Ok(Broadcast::Suffix { repeats });
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

const GELU_C: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_value(x: Real) -> Real {
    0.5 * x * (1.0 + ((GELU_C) * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: Real) -> Real {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Tx {
        self.nodes.push(Node { value, op, needs_grad });
        Tx(self.nodes.len() - 1)
    }

    fn needs(&self, t: Tx) -> bool {
        self.nodes[t.0].needs_grad
    }

    /// Differentiable input; gradients accumulate here during [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Tx {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input; backward skips anything only reachable from constants.
    pub fn constant(&mut self, value: Tensor) -> Tx {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, t: Tx) -> &Tensor {
        &self.nodes[t.0].value
    }

    /// Gradient of the last [`Tape::backward`] target with respect to node `t`.
    pub fn grad(&self, t: Tx) -> Option<&Tensor> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, t: Tx) -> Option<Tensor> {
        self.grads.get_mut(t.0).and_then(|g| g.take())
    }

    // ── Elementwise arithmetic ──────────────────────────────────────────

    pub fn add(&mut self, a: Tx, b: Tx) -> TensorResult<Tx> {
        self.binary_broadcast("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Tx, b: Tx) -> TensorResult<Tx> {
        self.binary_broadcast("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Tx, b: Tx) -> TensorResult<Tx> {
        self.binary_broadcast("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn binary_broadcast(
        &mut self,
        name: &'static str,
        a: Tx,
        b: Tx,
        f: impl Fn(Real, Real) -> Real,
        op: Op,
    ) -> TensorResult<Tx> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let kind = broadcast_kind(name, va.shape(), vb.shape())?;
        let out = match kind {
            Broadcast::Same => va.zip_map(vb, f)?,
            Broadcast::Scalar => {
                let s = vb.data()[0];
                va.map(|x| f(x, s))
            }
            Broadcast::Suffix { repeats } => {
                let chunk = vb.numel();
                let mut data = Vec::with_capacity(va.numel());
                for r in 0..repeats {
                    let base = r * chunk;
                    for j in 0..chunk {
                        data.push(f(va.data()[base + j], vb.data()[j]));
                    }
                }
                Tensor::from_vec(va.shape(), data)?
            }
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, needs))
    }

    pub fn add_scalar(&mut self, a: Tx, s: Real) -> Tx {
        let out = self.nodes[a.0].value.map(|x| x + s);
        let needs = self.needs(a);
        self.push(out, Op::AddScalar { a }, needs)
    }

    pub fn mul_scalar(&mut self, a: Tx, s: Real) -> Tx {
        let out = self.nodes[a.0].value.map(|x| x * s);
        let needs = self.needs(a);
        self.push(out, Op::MulScalar { a, s }, needs)
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Tx, b: Tx) -> TensorResult<Tx> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm_nn(m, k, n, 1.0, va.data(), vb.data(), 0.0, out.data_mut());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul { a, b }, needs))
    }

    pub fn bmm(&mut self, a: Tx, b: Tx) -> TensorResult<Tx> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Tensor::zeros(&[bt, m, n]);
        for i in 0..bt {
            gemm_nn(
                m, k, n, 1.0,
                &va.data()[i * m * k..(i + 1) * m * k],
                &vb.data()[i * k * n..(i + 1) * k * n],
                0.0,
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
            );
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Bmm { a, b }, needs))
    }

    /// Swap the last two axes of a tensor with ndim >= 2.
    pub fn transpose_last(&mut self, a: Tx) -> TensorResult<Tx> {
        let va = &self.nodes[a.0].value;
        let s = va.shape();
        if s.len() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose_last",
                msg: format!("need ndim >= 2, got {:?}", s),
            });
        }
        let out = transpose_last_value(va);
        let needs = self.needs(a);
        Ok(self.push(out, Op::TransposeLast { a }, needs))
    }

    pub fn reshape(&mut self, a: Tx, shape: &[usize]) -> TensorResult<Tx> {
        let va = &self.nodes[a.0].value;
        let out = va.clone().reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Reshape { a }, needs))
    }

    // ── Shuffling ───────────────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[Tx], axis: usize) -> TensorResult<Tx> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: "no parts".into(),
            });
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {} out of range for {:?}", axis, first),
            });
        }
        let mut total_mid = 0;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total_mid += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total_mid;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = vec![0.0; outer * total_mid * inner];
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let mid = v.shape()[axis];
            for o in 0..outer {
                let src = &v.data()[o * mid * inner..(o + 1) * mid * inner];
                let dst_base = o * total_mid * inner + offset * inner;
                data[dst_base..dst_base + mid * inner].copy_from_slice(src);
            }
            offset += mid;
        }
        let out = Tensor::from_vec(&shape, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, needs))
    }

    pub fn slice(&mut self, a: Tx, axis: usize, start: usize, len: usize) -> TensorResult<Tx> {
        let va = &self.nodes[a.0].value;
        let s = va.shape();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("axis {} range {}..{} out of shape {:?}", axis, start, start + len, s),
            });
        }
        let (outer, mid, inner) = axis_split(s, axis);
        let mut shape = s.to_vec();
        shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &va.data()[(o * mid + start) * inner..(o * mid + start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let out = Tensor::from_vec(&shape, data)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Slice { a, axis, start }, needs))
    }

    /// Gather rows along axis 0 (embedding lookup). Indices may repeat.
    pub fn gather_rows(&mut self, a: Tx, idx: Rc<Vec<usize>>) -> TensorResult<Tx> {
        let va = &self.nodes[a.0].value;
        let s = va.shape();
        if s.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: "need ndim >= 1".into(),
            });
        }
        let rows = s[0];
        let inner: usize = s[1..].iter().product();
        let mut shape = s.to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx.iter() {
            if i >= rows {
                return Err(TensorError::InvalidArgument {
                    op: "gather_rows",
                    msg: format!("index {} out of {} rows", i, rows),
                });
            }
            data.extend_from_slice(&va.data()[i * inner..(i + 1) * inner]);
        }
        let out = Tensor::from_vec(&shape, data)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::GatherRows { a, idx }, needs))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_axis(&mut self, a: Tx, axis: usize) -> TensorResult<Tx> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Tx, axis: usize) -> TensorResult<Tx> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&mut self, a: Tx, axis: usize, mean: bool) -> TensorResult<Tx> {
        let va = &self.nodes[a.0].value;
        let s = va.shape();
        if axis >= s.len() {
            return Err(TensorError::InvalidArgument {
                op: if mean { "mean_axis" } else { "sum_axis" },
                msg: format!("axis {} out of shape {:?}", axis, s),
            });
        }
        let (outer, mid, inner) = axis_split(s, axis);
        let mut shape: Vec<usize> = s.to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    data[o * inner + i] += va.data()[base + i];
                }
            }
        }
        if mean {
            for v in data.iter_mut() {
                *v /= mid as Real;
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        let needs = self.needs(a);
        let op = if mean { Op::MeanAxis { a, axis } } else { Op::SumAxis { a, axis } };
        Ok(self.push(out, op, needs))
    }

    pub fn sum_all(&mut self, a: Tx) -> Tx {
        let total: Real = self.nodes[a.0].value.data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), Op::SumAll { a }, needs)
    }

    pub fn mean_all(&mut self, a: Tx) -> Tx {
        let v = &self.nodes[a.0].value;
        let total: Real = v.data().iter().sum();
        let n = v.numel() as Real;
        let needs = self.needs(a);
        self.push(Tensor::scalar(total / n), Op::MeanAll { a }, needs)
    }

    // ── Elementwise nonlinearities ──────────────────────────────────────

    pub fn sqrt(&mut self, a: Tx) -> Tx {
        self.unary(a, |x| x.sqrt(), |t| Op::Sqrt { a: t })
    }

    pub fn log(&mut self, a: Tx) -> Tx {
        self.unary(a, |x| x.ln(), |t| Op::Log { a: t })
    }

    pub fn exp(&mut self, a: Tx) -> Tx {
        self.unary(a, |x| x.exp(), |t| Op::Exp { a: t })
    }

    pub fn tanh(&mut self, a: Tx) -> Tx {
        self.unary(a, |x| x.tanh(), |t| Op::Tanh { a: t })
    }

    pub fn relu(&mut self, a: Tx) -> Tx {
        self.unary(a, |x| x.max(0.0), |t| Op::Relu { a: t })
    }

    pub fn gelu(&mut self, a: Tx) -> Tx {
        self.unary(a, gelu_value, |t| Op::Gelu { a: t })
    }

    pub fn abs(&mut self, a: Tx) -> Tx {
        self.unary(a, |x| x.abs(), |t| Op::Abs { a: t })
    }

    /// Elementwise `min(x, cap)`. Gradient passes only where `x < cap`.
    pub fn clamp_max(&mut self, a: Tx, cap: Real) -> Tx {
        self.unary(a, move |x| x.min(cap), move |t| Op::ClampMax { a: t, cap })
    }

    fn unary(&mut self, a: Tx, f: impl Fn(Real) -> Real, op: impl FnOnce(Tx) -> Op) -> Tx {
        let out = self.nodes[a.0].value.map(f);
        let needs = self.needs(a);
        self.push(out, op(a), needs)
    }

    // ── Normalization, attention, losses ────────────────────────────────

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Tx, gain: Tx, bias: Tx, eps: Real) -> TensorResult<Tx> {
        let vx = &self.nodes[x.0].value;
        let s = vx.shape();
        let d = *s.last().ok_or_else(|| TensorError::InvalidArgument {
            op: "layer_norm",
            msg: "need ndim >= 1".into(),
        })?;
        let vg = &self.nodes[gain.0].value;
        let vb = &self.nodes[bias.0].value;
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: s.to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let rows = vx.numel() / d;
        let mut xhat = Tensor::zeros(s);
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(s);
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean: Real = row.iter().sum::<Real>() / d as Real;
            let var: Real = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat.data_mut()[r * d + j] = xh;
                out.data_mut()[r * d + j] = vg.data()[j] * xh + vb.data()[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, needs))
    }

    /// Row-wise softmax of a `[rows, n]` tensor with an optional visibility
    /// mask (`true` = position participates). Masked positions come out as
    /// exactly 0. A row with no visible position is an error.
    pub fn softmax_rows(&mut self, a: Tx, mask: Option<Rc<Vec<bool>>>) -> TensorResult<Tx> {
        let va = &self.nodes[a.0].value;
        let s = va.shape();
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "softmax_rows",
                msg: format!("need 2-D input, got {:?}", s),
            });
        }
        let (rows, n) = (s[0], s[1]);
        if let Some(m) = &mask {
            if m.len() != rows * n {
                return Err(TensorError::InvalidArgument {
                    op: "softmax_rows",
                    msg: format!("mask length {} != {}", m.len(), rows * n),
                });
            }
        }
        let visible = |r: usize, j: usize| mask.as_ref().map_or(true, |m| m[r * n + j]);
        let mut out = Tensor::zeros(s);
        for r in 0..rows {
            let row = &va.data()[r * n..(r + 1) * n];
            let mut maxv = Real::NEG_INFINITY;
            for j in 0..n {
                if visible(r, j) {
                    maxv = maxv.max(row[j]);
                }
            }
            if maxv == Real::NEG_INFINITY {
                return Err(TensorError::DegenerateMask { row: r });
            }
            let mut denom = 0.0;
            for j in 0..n {
                if visible(r, j) {
                    let e = (row[j] - maxv).exp();
                    out.data_mut()[r * n + j] = e;
                    denom += e;
                }
            }
            for j in 0..n {
                out.data_mut()[r * n + j] /= denom;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(out, Op::SoftmaxRows { a, mask }, needs))
    }

    /// Mean negative log-likelihood over selected rows of `[rows, classes]`
    /// logits. `row_mask` (`true` = counted) defaults to all rows.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Tx,
        targets: Rc<Vec<usize>>,
        row_mask: Option<Rc<Vec<bool>>>,
    ) -> TensorResult<Tx> {
        let vl = &self.nodes[logits.0].value;
        let s = vl.shape();
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy_logits",
                msg: format!("need 2-D logits, got {:?}", s),
            });
        }
        let (rows, classes) = (s[0], s[1]);
        if targets.len() != rows {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy_logits",
                msg: format!("{} targets for {} rows", targets.len(), rows),
            });
        }
        if let Some(m) = &row_mask {
            if m.len() != rows {
                return Err(TensorError::InvalidArgument {
                    op: "cross_entropy_logits",
                    msg: format!("row mask length {} != {}", m.len(), rows),
                });
            }
        }
        let counted = |r: usize| row_mask.as_ref().map_or(true, |m| m[r]);
        let mut probs = Tensor::zeros(s);
        let mut selected = 0usize;
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &vl.data()[r * classes..(r + 1) * classes];
            let t = targets[r];
            if t >= classes {
                return Err(TensorError::InvalidArgument {
                    op: "cross_entropy_logits",
                    msg: format!("target {} out of {} classes", t, classes),
                });
            }
            let maxv = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let mut denom = 0.0;
            for j in 0..classes {
                let e = (row[j] - maxv).exp();
                probs.data_mut()[r * classes + j] = e;
                denom += e;
            }
            for j in 0..classes {
                probs.data_mut()[r * classes + j] /= denom;
            }
            if counted(r) {
                selected += 1;
                loss -= probs.data()[r * classes + t].ln();
            }
        }
        if selected == 0 {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy_logits",
                msg: "no rows selected".into(),
            });
        }
        loss /= selected as Real;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyLogits { logits, targets, row_mask, probs, selected },
            needs,
        ))
    }

    /// Mean squared error over all elements; shapes must match exactly.
    pub fn mse(&mut self, a: Tx, b: Tx) -> TensorResult<Tx> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let n = va.numel() as Real;
        let loss: Real = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<Real>()
            / n;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { a, b }, needs))
    }

    /// Mean absolute error over all elements; shapes must match exactly.
    pub fn l1(&mut self, a: Tx, b: Tx) -> TensorResult<Tx> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "l1",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let n = va.numel() as Real;
        let loss: Real = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<Real>()
            / n;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(loss), Op::L1 { a, b }, needs))
    }

    // ── Convolution and friends ─────────────────────────────────────────

    /// 2-D convolution: `x [B,Cin,H,W]`, `w [Cout,Cin,kh,kw]`, zero padding.
    pub fn conv2d(&mut self, x: Tx, w: Tx, bias: Option<Tx>, stride: usize, pad: usize) -> TensorResult<Tx> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: "stride must be >= 1".into(),
            });
        }
        let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, wd + 2 * pad),
            });
        }
        if let Some(bt) = bias {
            let vb = &self.nodes[bt.0].value;
            if vb.shape() != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![cout],
                    rhs: vb.shape().to_vec(),
                });
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let kdim = cin * kh * kw;
        let pdim = ho * wo;
        let mut out = Tensor::zeros(&[b, cout, ho, wo]);
        let mut col = vec![0.0; kdim * pdim];
        for bi in 0..b {
            im2col(
                &vx.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                cin, h, wd, kh, kw, stride, pad, ho, wo, &mut col,
            );
            gemm_nn(
                cout, kdim, pdim, 1.0,
                vw.data(), &col, 0.0,
                &mut out.data_mut()[bi * cout * pdim..(bi + 1) * cout * pdim],
            );
            if let Some(bt) = bias {
                let vb = self.nodes[bt.0].value.data().to_vec();
                let slab = &mut out.data_mut()[bi * cout * pdim..(bi + 1) * cout * pdim];
                for c in 0..cout {
                    for p in 0..pdim {
                        slab[c * pdim + p] += vb[c];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || bias.map_or(false, |bt| self.needs(bt));
        Ok(self.push(out, Op::Conv2d { x, w, bias, stride, pad }, needs))
    }

    /// Nearest-neighbor 2x upsampling of `[B,C,H,W]`.
    pub fn upsample2_nearest(&mut self, a: Tx) -> TensorResult<Tx> {
        let va = &self.nodes[a.0].value;
        let s = va.shape();
        if s.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op: "upsample2_nearest",
                msg: format!("need 4-D input, got {:?}", s),
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
        for bc in 0..b * c {
            let src = &va.data()[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out.data_mut()[bc * 4 * h * w..(bc + 1) * 4 * h * w];
            for i in 0..h {
                for j in 0..w {
                    let v = src[i * w + j];
                    let base = 2 * i * 2 * w + 2 * j;
                    dst[base] = v;
                    dst[base + 1] = v;
                    dst[base + 2 * w] = v;
                    dst[base + 2 * w + 1] = v;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(out, Op::Upsample2 { a }, needs))
    }

    /// Inverted dropout for training; `p = 0` is the identity. Inference code
    /// simply never applies this op.
    pub fn dropout<R: Rng>(&mut self, a: Tx, p: Real, rng: &mut R) -> TensorResult<Tx> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                msg: format!("p = {} outside [0, 1)", p),
            });
        }
        if p == 0.0 {
            return Ok(a);
        }
        let n = self.nodes[a.0].value.numel();
        let keep: Vec<bool> = (0..n).map(|_| rng.random::<Real>() >= p).collect();
        let scale = 1.0 / (1.0 - p);
        let va = &self.nodes[a.0].value;
        let data: Vec<Real> = va
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { 0.0 })
            .collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Dropout { a, keep: Rc::new(keep), scale }, needs))
    }

    /// Straight-through primitive: forward takes the value of `value_src`,
    /// backward routes the incoming gradient to `grad_src` untouched.
    /// `value_src` receives no gradient.
    pub fn detach_value_keep_gradient(&mut self, value_src: Tx, grad_src: Tx) -> TensorResult<Tx> {
        let (vv, vg) = (&self.nodes[value_src.0].value, &self.nodes[grad_src.0].value);
        if vv.shape() != vg.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "detach_value_keep_gradient",
                lhs: vv.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let out = vv.clone();
        let needs = self.needs(grad_src);
        Ok(self.push(out, Op::Detach { grad_src }, needs))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of every grad-requiring
    /// node are retained and readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: Tx) -> TensorResult<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                msg: format!("loss must be scalar, shape is {:?}", self.nodes[loss.0].value.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.apply_vjp(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Tensor>], t: Tx, produce: impl FnOnce(&mut Tensor)) {
        if !self.nodes[t.0].needs_grad {
            return;
        }
        let slot = &mut grads[t.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[t.0].value.shape()));
        }
        produce(slot.as_mut().unwrap());
    }

    fn apply_vjp(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> TensorResult<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add { a, b } => {
                self.accum(grads, *a, |da| {
                    da.add_scaled(1.0, g).expect("add vjp lhs");
                });
                self.accum_broadcast_rhs(grads, *b, g, None);
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, |da| {
                    da.add_scaled(1.0, g).expect("sub vjp lhs");
                });
                self.accum_broadcast_rhs_scaled(grads, *b, g, -1.0, None);
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                // d/da = g * b (b broadcast up), d/db = sum over leading of g * a.
                if self.needs(*a) {
                    let kind = broadcast_kind("mul", va.shape(), vb.shape())?;
                    self.accum(grads, *a, |da| match kind {
                        Broadcast::Same => {
                            for ((d, &gv), &bv) in da.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                                *d += gv * bv;
                            }
                        }
                        Broadcast::Scalar => {
                            let s = vb.data()[0];
                            for (d, &gv) in da.data_mut().iter_mut().zip(g.data()) {
                                *d += gv * s;
                            }
                        }
                        Broadcast::Suffix { repeats } => {
                            let chunk = vb.numel();
                            for r in 0..repeats {
                                for j in 0..chunk {
                                    da.data_mut()[r * chunk + j] += g.data()[r * chunk + j] * vb.data()[j];
                                }
                            }
                        }
                    });
                }
                self.accum_broadcast_rhs(grads, *b, g, Some(va));
            }
            Op::AddScalar { a } => {
                self.accum(grads, *a, |da| {
                    da.add_scaled(1.0, g).expect("add_scalar vjp");
                });
            }
            Op::MulScalar { a, s } => {
                let s = *s;
                self.accum(grads, *a, |da| {
                    da.add_scaled(s, g).expect("mul_scalar vjp");
                });
            }
            Op::Matmul { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                self.accum(grads, *a, |da| {
                    gemm_nt(m, n, k, 1.0, g.data(), vb.data(), 1.0, da.data_mut());
                });
                self.accum(grads, *b, |db| {
                    gemm_tn(k, m, n, 1.0, va.data(), g.data(), 1.0, db.data_mut());
                });
            }
            Op::Bmm { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (bt, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = vb.shape()[2];
                self.accum(grads, *a, |da| {
                    for i in 0..bt {
                        gemm_nt(
                            m, n, k, 1.0,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &vb.data()[i * k * n..(i + 1) * k * n],
                            1.0,
                            &mut da.data_mut()[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                self.accum(grads, *b, |db| {
                    for i in 0..bt {
                        gemm_tn(
                            k, m, n, 1.0,
                            &va.data()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            1.0,
                            &mut db.data_mut()[i * k * n..(i + 1) * k * n],
                        );
                    }
                });
            }
            Op::TransposeLast { a } => {
                let gt = transpose_last_value(g);
                self.accum(grads, *a, |da| {
                    da.add_scaled(1.0, &gt).expect("transpose vjp");
                });
            }
            Op::Reshape { a } => {
                self.accum(grads, *a, |da| {
                    for (d, &gv) in da.data_mut().iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total_mid, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let mid = self.nodes[p.0].value.shape()[*axis];
                    self.accum(grads, p, |dp| {
                        for o in 0..outer {
                            let src_base = o * total_mid * inner + offset * inner;
                            let dst_base = o * mid * inner;
                            for j in 0..mid * inner {
                                dp.data_mut()[dst_base + j] += g.data()[src_base + j];
                            }
                        }
                    });
                    offset += mid;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = self.nodes[a.0].value.shape();
                let (outer, mid, inner) = axis_split(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let start = *start;
                self.accum(grads, *a, |da| {
                    for o in 0..outer {
                        let dst_base = (o * mid + start) * inner;
                        let src_base = o * len * inner;
                        for j in 0..len * inner {
                            da.data_mut()[dst_base + j] += g.data()[src_base + j];
                        }
                    }
                });
            }
            Op::GatherRows { a, idx } => {
                let inner: usize = self.nodes[a.0].value.shape()[1..].iter().product();
                self.accum(grads, *a, |da| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..inner {
                            da.data_mut()[i * inner + j] += g.data()[r * inner + j];
                        }
                    }
                });
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let in_shape = self.nodes[a.0].value.shape();
                let (outer, mid, inner) = axis_split(in_shape, *axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / mid as Real
                } else {
                    1.0
                };
                self.accum(grads, *a, |da| {
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            for i in 0..inner {
                                da.data_mut()[base + i] += scale * g.data()[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                let gv = g.data()[0];
                self.accum(grads, *a, |da| {
                    for d in da.data_mut() {
                        *d += gv;
                    }
                });
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].value.numel() as Real;
                let gv = g.data()[0] / n;
                self.accum(grads, *a, |da| {
                    for d in da.data_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Sqrt { a } => {
                let out = &node.value;
                self.accum(grads, *a, |da| {
                    for ((d, &gv), &ov) in da.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *d += gv * 0.5 / ov;
                    }
                });
            }
            Op::Log { a } => {
                let va = &self.nodes[a.0].value;
                self.accum(grads, *a, |da| {
                    for ((d, &gv), &xv) in da.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *d += gv / xv;
                    }
                });
            }
            Op::Exp { a } => {
                let out = &node.value;
                self.accum(grads, *a, |da| {
                    for ((d, &gv), &ov) in da.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *d += gv * ov;
                    }
                });
            }
            Op::Tanh { a } => {
                let out = &node.value;
                self.accum(grads, *a, |da| {
                    for ((d, &gv), &tv) in da.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *d += gv * (1.0 - tv * tv);
                    }
                });
            }
            Op::Relu { a } => {
                let va = &self.nodes[a.0].value;
                self.accum(grads, *a, |da| {
                    for ((d, &gv), &xv) in da.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let va = &self.nodes[a.0].value;
                self.accum(grads, *a, |da| {
                    for ((d, &gv), &xv) in da.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *d += gv * gelu_grad(xv);
                    }
                });
            }
            Op::Abs { a } => {
                let va = &self.nodes[a.0].value;
                self.accum(grads, *a, |da| {
                    for ((d, &gv), &xv) in da.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *d += gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::ClampMax { a, cap } => {
                let va = &self.nodes[a.0].value;
                let cap = *cap;
                self.accum(grads, *a, |da| {
                    for ((d, &gv), &xv) in da.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        if xv < cap {
                            *d += gv;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.nodes[gain.0].value.shape()[0];
                let rows = xhat.numel() / d;
                let vg = &self.nodes[gain.0].value;
                self.accum(grads, *gain, |dg| {
                    for r in 0..rows {
                        for j in 0..d {
                            dg.data_mut()[j] += g.data()[r * d + j] * xhat.data()[r * d + j];
                        }
                    }
                });
                self.accum(grads, *bias, |db| {
                    for r in 0..rows {
                        for j in 0..d {
                            db.data_mut()[j] += g.data()[r * d + j];
                        }
                    }
                });
                self.accum(grads, *x, |dx| {
                    for r in 0..rows {
                        let mut mean_dy = 0.0;
                        let mut mean_dy_xhat = 0.0;
                        for j in 0..d {
                            let dy = g.data()[r * d + j] * vg.data()[j];
                            mean_dy += dy;
                            mean_dy_xhat += dy * xhat.data()[r * d + j];
                        }
                        mean_dy /= d as Real;
                        mean_dy_xhat /= d as Real;
                        for j in 0..d {
                            let dy = g.data()[r * d + j] * vg.data()[j];
                            dx.data_mut()[r * d + j] +=
                                rstd[r] * (dy - mean_dy - xhat.data()[r * d + j] * mean_dy_xhat);
                        }
                    }
                });
            }
            Op::SoftmaxRows { a, mask } => {
                let y = &node.value;
                let (rows, n) = (y.shape()[0], y.shape()[1]);
                self.accum(grads, *a, |da| {
                    for r in 0..rows {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g.data()[r * n + j] * y.data()[r * n + j];
                        }
                        for j in 0..n {
                            let visible = mask.as_ref().map_or(true, |m| m[r * n + j]);
                            if visible {
                                let yv = y.data()[r * n + j];
                                da.data_mut()[r * n + j] += yv * (g.data()[r * n + j] - dot);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropyLogits { logits, targets, row_mask, probs, selected } => {
                let (rows, classes) = (probs.shape()[0], probs.shape()[1]);
                let gv = g.data()[0] / *selected as Real;
                self.accum(grads, *logits, |dl| {
                    for r in 0..rows {
                        let counted = row_mask.as_ref().map_or(true, |m| m[r]);
                        if !counted {
                            continue;
                        }
                        for j in 0..classes {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            dl.data_mut()[r * classes + j] += gv * (probs.data()[r * classes + j] - onehot);
                        }
                    }
                });
            }
            Op::Mse { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let n = va.numel() as Real;
                let gv = g.data()[0];
                self.accum(grads, *a, |da| {
                    for ((d, &x), &y) in da.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                        *d += gv * 2.0 * (x - y) / n;
                    }
                });
                self.accum(grads, *b, |db| {
                    for ((d, &x), &y) in db.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                        *d -= gv * 2.0 * (x - y) / n;
                    }
                });
            }
            Op::L1 { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let n = va.numel() as Real;
                let gv = g.data()[0];
                let sign = |x: Real, y: Real| {
                    if x > y {
                        1.0
                    } else if x < y {
                        -1.0
                    } else {
                        0.0
                    }
                };
                self.accum(grads, *a, |da| {
                    for ((d, &x), &y) in da.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                        *d += gv * sign(x, y) / n;
                    }
                });
                self.accum(grads, *b, |db| {
                    for ((d, &x), &y) in db.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                        *d -= gv * sign(x, y) / n;
                    }
                });
            }
            Op::Conv2d { x, w, bias, stride, pad } => {
                let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (b, cin, h, wd) = {
                    let s = vx.shape();
                    (s[0], s[1], s[2], s[3])
                };
                let (cout, kh, kw) = {
                    let s = vw.shape();
                    (s[0], s[2], s[3])
                };
                let (ho, wo) = {
                    let s = node.value.shape();
                    (s[2], s[3])
                };
                let kdim = cin * kh * kw;
                let pdim = ho * wo;
                let mut col = vec![0.0; kdim * pdim];
                if self.needs(*w) || self.needs(*x) {
                    // dW accumulates over the batch; dX needs col2im per item.
                    let mut dcol = vec![0.0; kdim * pdim];
                    for bi in 0..b {
                        im2col(
                            &vx.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                            cin, h, wd, kh, kw, *stride, *pad, ho, wo, &mut col,
                        );
                        let gy = &g.data()[bi * cout * pdim..(bi + 1) * cout * pdim];
                        self.accum(grads, *w, |dw| {
                            gemm_nt(cout, pdim, kdim, 1.0, gy, &col, 1.0, dw.data_mut());
                        });
                        if self.needs(*x) {
                            gemm_tn(kdim, cout, pdim, 1.0, vw.data(), gy, 0.0, &mut dcol);
                            self.accum(grads, *x, |dx| {
                                col2im_add(
                                    &dcol,
                                    &mut dx.data_mut()[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                                    cin, h, wd, kh, kw, *stride, *pad, ho, wo,
                                );
                            });
                        }
                    }
                }
                if let Some(bt) = bias {
                    self.accum(grads, *bt, |db| {
                        for bi in 0..b {
                            let gy = &g.data()[bi * cout * pdim..(bi + 1) * cout * pdim];
                            for c in 0..cout {
                                let mut s = 0.0;
                                for p in 0..pdim {
                                    s += gy[c * pdim + p];
                                }
                                db.data_mut()[c] += s;
                            }
                        }
                    });
                }
            }
            Op::Upsample2 { a } => {
                let s = self.nodes[a.0].value.shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                self.accum(grads, *a, |da| {
                    for bc in 0..b * c {
                        let dst = &mut da.data_mut()[bc * h * w..(bc + 1) * h * w];
                        let src = &g.data()[bc * 4 * h * w..(bc + 1) * 4 * h * w];
                        for i in 0..h {
                            for j in 0..w {
                                let base = 2 * i * 2 * w + 2 * j;
                                dst[i * w + j] +=
                                    src[base] + src[base + 1] + src[base + 2 * w] + src[base + 2 * w + 1];
                            }
                        }
                    }
                });
            }
            Op::Dropout { a, keep, scale } => {
                let scale = *scale;
                self.accum(grads, *a, |da| {
                    for ((d, &gv), &k) in da.data_mut().iter_mut().zip(g.data()).zip(keep.iter()) {
                        if k {
                            *d += gv * scale;
                        }
                    }
                });
            }
            Op::Detach { grad_src } => {
                self.accum(grads, *grad_src, |dg| {
                    dg.add_scaled(1.0, g).expect("detach vjp");
                });
            }
        }
        Ok(())
    }

    /// Gradient for the rhs of add/sub/mul under broadcast: reduce the incoming
    /// gradient over leading axes (optionally weighted by the lhs value for mul).
    fn accum_broadcast_rhs(&self, grads: &mut [Option<Tensor>], b: Tx, g: &Tensor, mul_by: Option<&Tensor>) {
        self.accum_broadcast_rhs_scaled(grads, b, g, 1.0, mul_by)
    }

    fn accum_broadcast_rhs_scaled(
        &self,
        grads: &mut [Option<Tensor>],
        b: Tx,
        g: &Tensor,
        sign: Real,
        mul_by: Option<&Tensor>,
    ) {
        if !self.needs(b) {
            return;
        }
        let chunk = self.nodes[b.0].value.numel();
        let total = g.numel();
        self.accum(grads, b, |db| {
            if chunk == total && db.shape() == g.shape() {
                match mul_by {
                    None => db.add_scaled(sign, g).expect("broadcast rhs vjp"),
                    Some(a) => {
                        for ((d, &gv), &av) in db.data_mut().iter_mut().zip(g.data()).zip(a.data()) {
                            *d += sign * gv * av;
                        }
                    }
                }
            } else {
                let repeats = total / chunk;
                for r in 0..repeats {
                    for j in 0..chunk {
                        let gv = g.data()[r * chunk + j];
                        let av = mul_by.map_or(1.0, |a| a.data()[r * chunk + j]);
                        db.data_mut()[j % chunk] += sign * gv * av;
                    }
                }
            }
        });
    }
}

fn transpose_last_value(v: &Tensor) -> Tensor {
    let s = v.shape();
    let nd = s.len();
    let (m, n) = (s[nd - 2], s[nd - 1]);
    let outer: usize = s[..nd - 2].iter().product();
    let mut shape = s.to_vec();
    shape[nd - 2] = n;
    shape[nd - 1] = m;
    let mut out = Tensor::zeros(&shape);
    for o in 0..outer {
        let src = &v.data()[o * m * n..(o + 1) * m * n];
        let dst = &mut out.data_mut()[o * m * n..(o + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[Real],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [Real],
) {
    let pdim = ho * wo;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let krow = (c * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let iy = (oi * stride + ki) as isize - pad as isize;
                    for oj in 0..wo {
                        let ix = (oj * stride + kj) as isize - pad as isize;
                        let v = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            x[(c * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                        col[krow * pdim + oi * wo + oj] = v;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[Real],
    x: &mut [Real],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let pdim = ho * wo;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let krow = (c * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let iy = (oi * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let ix = (oj * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        x[(c * h + iy as usize) * w + ix as usize] += col[krow * pdim + oi * wo + oj];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Real]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_broadcasts_suffix_and_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(t(&[3], &[10.0, 20.0, 30.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let s = tape.leaf(Tensor::scalar(1.0));
        let d = tape.add(c, s).unwrap();
        let l = tape.sum_all(d);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(tape.grad(s).unwrap().data(), &[6.0]);
    }

    #[test]
    fn mul_gradient_routes_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[3.0, -2.0]));
        let b = tape.leaf(t(&[2], &[4.0, 5.0]));
        let c = tape.mul(a, b).unwrap();
        let l = tape.sum_all(c);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[4.0, 5.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[3.0, -2.0]);
    }

    #[test]
    fn matmul_known_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let l = tape.sum_all(c);
        tape.backward(l).unwrap();
        // dA = ones @ B^T, dB = A^T @ ones.
        assert_eq!(tape.grad(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_rows_mask_zeroes_and_normalizes() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let mask = Rc::new(vec![true, false, true]);
        let y = tape.softmax_rows(a, Some(mask)).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert!(v[2] > v[0]);
    }

    #[test]
    fn softmax_degenerate_row_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let mask = Rc::new(vec![false, false]);
        assert!(matches!(
            tape.softmax_rows(a, Some(mask)),
            Err(TensorError::DegenerateMask { row: 0 })
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_classes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[4, 7]));
        let l = tape
            .cross_entropy_logits(a, Rc::new(vec![0, 1, 2, 3]), None)
            .unwrap();
        let v = tape.value(l).item().unwrap();
        assert!((v - (7.0 as Real).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_row_mask_selects_rows() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t(&[2, 2], &[10.0, 0.0, 0.0, 10.0]));
        // Only the first row counts: a confident correct prediction, loss ~ 0.
        let l = tape
            .cross_entropy_logits(logits, Rc::new(vec![0, 0]), Some(Rc::new(vec![true, false])))
            .unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-3);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0]));
        let gain = tape.leaf(Tensor::full(&[4], 1.0));
        let bias = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        let v = tape.value(y);
        for r in 0..2 {
            let row = &v.data()[r * 4..(r + 1) * 4];
            let mean: Real = row.iter().sum::<Real>() / 4.0;
            let var: Real = row.iter().map(|x| (x - mean) * (x - mean)).sum::<Real>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn detach_value_keep_gradient_is_straight_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.7, -0.3]));
        let floored = {
            let v = tape.value(x).map(Real::floor);
            tape.constant(v)
        };
        let st = tape.detach_value_keep_gradient(floored, x).unwrap();
        assert_eq!(tape.value(st).data(), &[1.0, -1.0]);
        let l = tape.sum_all(st);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
        assert!(tape.grad(floored).is_none());
    }

    #[test]
    fn slice_concat_roundtrip_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 4], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
        let left = tape.slice(x, 1, 0, 2).unwrap();
        let right = tape.slice(x, 1, 2, 2).unwrap();
        let back = tape.concat(&[left, right], 1).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
        let doubled = tape.mul_scalar(back, 2.0);
        let l = tape.sum_all(doubled);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 8]);
    }

    #[test]
    fn gather_rows_accumulates_repeats() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = tape.gather_rows(x, Rc::new(vec![2, 0, 2])).unwrap();
        assert_eq!(tape.value(g).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let l = tape.sum_all(g);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        // 1x1 kernel of value 1 with stride 1 reproduces the input.
        let w = tape.leaf(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_stride2_shapes_and_sum_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 4, 4], 1.0));
        let w = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, w, None, 2, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[4.0; 4]);
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        // Non-overlapping stride-2 windows: every input cell used exactly once.
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 16]);
        assert_eq!(tape.grad(w).unwrap().data(), &[4.0; 4]);
    }

    #[test]
    fn upsample2_nearest_repeats_and_pools_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let y = tape.upsample2_nearest(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 4]);
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn constants_do_not_accumulate_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn bmm_matches_per_slice_matmul() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2, 2, 1], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.bmm(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1, 1]);
        assert_eq!(tape.value(c).data(), &[17.0, 53.0]);
    }

    #[test]
    fn transpose_last_swaps_axes() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let at = tape.transpose_last(a).unwrap();
        assert_eq!(tape.value(at).shape(), &[1, 3, 2]);
        assert_eq!(tape.value(at).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each forward op appends a node holding its output value plus whatever
//! the backward rule needs. [`Tape::backward`] walks the nodes in reverse
//! and accumulates gradients additively, so fan-out is handled for free.
//! A tape supports exactly one backward pass.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind tag of a recorded op, used by traces and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    AddBroadcast,
    Mul,
    Scale,
    Relu,
    Softmax,
    LayerNorm,
    BatchNorm,
    Dropout,
    MeanAxis,
    Concat,
    L2Normalize,
    CrossEntropy,
    Sum,
    Reshape,
    SplitHeads,
    MergeHeads,
    SwapAxes12,
    StrideFrames,
    TemporalDiff,
    Narrow,
}

/// Shape-level record of one forward op.
#[derive(Clone, Debug, PartialEq)]
pub struct OpRecord {
    pub kind: OpKind,
    pub inputs: Vec<Vec<usize>>,
    pub output: Vec<usize>,
}

/// Batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    pub count: usize,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBroadcast {
        x: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Concat {
        a: Var,
        b: Var,
        wa: usize,
        wb: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    SplitHeads {
        x: Var,
        n: usize,
        l: usize,
        h: usize,
        dk: usize,
    },
    MergeHeads {
        x: Var,
        n: usize,
        l: usize,
        h: usize,
        dk: usize,
    },
    SwapAxes12 {
        x: Var,
        dims: [usize; 4],
    },
    StrideFrames {
        x: Var,
        batch: usize,
        frames: usize,
        inner: usize,
        k: usize,
    },
    TemporalDiff {
        x: Var,
        batch: usize,
        frames: usize,
        inner: usize,
    },
    Narrow {
        x: Var,
        total: usize,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Add { .. } => OpKind::Add,
            Op::AddBroadcast { .. } => OpKind::AddBroadcast,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Relu { .. } => OpKind::Relu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::Concat { .. } => OpKind::Concat,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum { .. } => OpKind::Sum,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::SplitHeads { .. } => OpKind::SplitHeads,
            Op::MergeHeads { .. } => OpKind::MergeHeads,
            Op::SwapAxes12 { .. } => OpKind::SwapAxes12,
            Op::StrideFrames { .. } => OpKind::StrideFrames,
            Op::TemporalDiff { .. } => OpKind::TemporalDiff,
            Op::Narrow { .. } => OpKind::Narrow,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. }
            | Op::BatchMatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Mul { a, b }
            | Op::Concat { a, b, .. } => vec![a, b],
            Op::AddBroadcast { x, b } => vec![x, b],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![x, gamma, beta]
            }
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Softmax { x }
            | Op::Dropout { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::Sum { x }
            | Op::Reshape { x }
            | Op::SplitHeads { x, .. }
            | Op::MergeHeads { x, .. }
            | Op::SwapAxes12 { x, .. }
            | Op::StrideFrames { x, .. }
            | Op::TemporalDiff { x, .. }
            | Op::Narrow { x, .. } => vec![x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of the ops of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(Var, String)>,
    consumed: bool,
    faults: HashMap<OpKind, T>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            consumed: false,
            faults: HashMap::new(),
        }
    }

    /// Fault injection: scales every gradient emitted by the backward rule
    /// of `kind` by `factor`. Used to validate the gradient checker.
    pub fn corrupt_backward(&mut self, kind: OpKind, factor: T) {
        self.faults.insert(kind, factor);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the loss with respect to the leaf `v`, once backward has
    /// run. Intermediate gradients are freed during the pass.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Named parameter leaves in registration order.
    pub fn params(&self) -> &[(Var, String)] {
        &self.params
    }

    /// Shape-level trace of every non-leaf op, in execution order.
    pub fn trace(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| OpRecord {
                kind: n.op.kind(),
                inputs: n
                    .op
                    .inputs()
                    .iter()
                    .map(|v| self.shape(*v).to_vec())
                    .collect(),
                output: n.value.shape().to_vec(),
            })
            .collect()
    }

    /// Positive/non-positive pattern of every ReLU input on the tape. Two
    /// forward passes with equal patterns lie in the same smooth region.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu { x } = n.op {
                out.extend(self.value(x).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    /// Records a leaf; it participates in backward iff the tensor
    /// requires grad.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push_raw(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// Records a named, gradient-tracked leaf.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        let v = self.push_raw(value.clone(), Op::Leaf, true);
        self.params.push((v, name.to_string()));
        v
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownVar(v.0))
        }
    }

    // ---------------------------------------------------------------
    // forward ops

    /// `a[..., k] · b[k, n] -> [..., n]`; leading axes of `a` are treated
    /// as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b, m, k, n })
    }

    /// Batched product `[B, m, k] · [B, k, n]`, or `[B, m, k] · [B, n, k]ᵀ`
    /// when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let (rsb, csb) = if trans_b {
                (1, k as isize)
            } else {
                (n as isize, 1)
            };
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &ad[i * m * k..(i + 1) * m * k],
                    k as isize,
                    1,
                    &bd[i * k * n..(i + 1) * k * n],
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.push(
            "batch_matmul",
            value,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", value, Op::Add { a, b })
    }

    /// Adds `b` to every trailing block of `x`; `b`'s shape must equal the
    /// trailing axes of `x` (bias rows, joint and positional embeddings).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(b)?;
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sx, sb));
        }
        let bd = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        if !bd.is_empty() {
            for chunk in data.chunks_mut(bd.len()) {
                chunk.iter_mut().zip(bd).for_each(|(v, &c)| *v += c);
            }
        }
        let value = Tensor::new(sx.to_vec(), data)?;
        self.push("add_broadcast", value, Op::AddBroadcast { x, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", value, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(|v| v * s);
        self.push("scale", value, Op::Scale { x, s })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", value, Op::Relu { x })
    }

    /// Softmax over the trailing axis, stabilized by max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let n = xv.last_dim();
        if xv.rank() == 0 || n == 0 {
            return Err(Error::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: "softmax needs a non-empty trailing axis".into(),
            });
        }
        if !xv.all_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax { x })
    }

    /// Layer normalization over the trailing axis with affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.check(x)?;
        let f = self.value(x).last_dim();
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let rows = xd.len() / f;
        let ff = T::of(f as f64);
        let mut xhat = Vec::with_capacity(xd.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in xd.chunks(f) {
            let mean = row.iter().copied().sum::<T>() / ff;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / ff;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|&v| (v - mean) * is));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Vec::with_capacity(xhat.len());
        for row in xhat.chunks(f) {
            out.extend(row.iter().zip(g).zip(b).map(|((&h, &g), &b)| h * g + b));
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Train-mode batch normalization of `x[N, F]` over the batch axis.
    /// Returns the batch statistics so the caller can update running
    /// estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        self.check(x)?;
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::InvalidShape {
                shape: sx,
                reason: "batch norm expects [batch, features]".into(),
            });
        }
        let (n, f) = (sx[0], sx[1]);
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(Error::shape("batch_norm", &sx, self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let nn = T::of(n as f64);
        let mut mean = vec![T::zero(); f];
        for row in xd.chunks(f) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nn);
        let mut var = vec![T::zero(); f];
        for row in xd.chunks(f) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= nn);
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let v = self.batch_norm_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((
            v,
            BatchStats {
                mean,
                var,
                count: n,
            },
        ))
    }

    /// Eval-mode batch normalization using fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        self.check(x)?;
        let f = self.value(x).last_dim();
        if running_mean.len() != f || running_var.len() != f {
            return Err(Error::shape("batch_norm", self.shape(x), &[running_mean.len()]));
        }
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(Error::shape("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let inv_std = running_var
            .iter()
            .map(|&s| T::one() / (s + eps).sqrt())
            .collect();
        self.batch_norm_apply(x, gamma, beta, running_mean, inv_std, false)
    }

    fn batch_norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        train: bool,
    ) -> Result<Var> {
        let f = mean.len();
        let xd = self.value(x).data();
        let xhat: Vec<T> = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % f]) * inv_std[i % f])
            .collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Vec::with_capacity(xhat.len());
        for row in xhat.chunks(f) {
            out.extend(row.iter().zip(g).zip(b).map(|((&h, &g), &b)| h * g + b));
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )
    }

    /// Multiplies by a precomputed mask (zeros and `1/(1-p)` survivors).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        self.check(x)?;
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("dropout", self.shape(x), &[mask.len()]));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { x, mask })
    }

    /// Mean over `axis`; the result drops that axis.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx[axis] == 0 {
            return Err(Error::InvalidShape {
                shape: sx,
                reason: format!("cannot average over axis {axis}"),
            });
        }
        let outer: usize = sx[..axis].iter().product();
        let len = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let inv = T::one() / T::of(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..len {
                let src = &xd[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let mut shape = sx;
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push(
            "mean_axis",
            value,
            Op::MeanAxis {
                x,
                outer,
                axis: len,
                inner,
            },
        )
    }

    /// Concatenation along the trailing axis; leading axes must match.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let wa = sa[sa.len() - 1];
        let wb = sb[sb.len() - 1];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let rows = if wa > 0 { ad.len() / wa } else { bd.len() / wb.max(1) };
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for r in 0..rows {
            out.extend_from_slice(&ad[r * wa..(r + 1) * wa]);
            out.extend_from_slice(&bd[r * wb..(r + 1) * wb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = wa + wb;
        let value = Tensor::new(shape, out)?;
        self.push("concat", value, Op::Concat { a, b, wa, wb })
    }

    /// Row-wise `x / max(‖x‖₂, eps)` over the trailing axis.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        self.check(x)?;
        let f = self.value(x).last_dim().max(1);
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(xd.len() / f);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(f) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(norm);
            let d = norm.max(eps);
            out.extend(row.iter().map(|&v| v / d));
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("l2_normalize", value, Op::L2Normalize { x, norms, eps })
    }

    /// Mean cross-entropy of `logits[B, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let lse = log_sum_exp(row);
            loss += lse - row[label];
            softmax_in_place(row);
        }
        loss /= T::of(b as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape { x })
    }

    /// `[N, L, h·dk] -> [N·h, L, dk]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::shape("split_heads", &s, &[heads]));
        }
        let (n, l, h, dk) = (s[0], s[1], heads, s[2] / heads);
        if h == 1 {
            return self.reshape(x, &[n, l, dk]);
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for ni in 0..n {
            for li in 0..l {
                for hi in 0..h {
                    let src = ((ni * l + li) * h + hi) * dk;
                    let dst = ((ni * h + hi) * l + li) * dk;
                    out[dst..dst + dk].copy_from_slice(&xd[src..src + dk]);
                }
            }
        }
        let value = Tensor::new(vec![n * h, l, dk], out)?;
        self.push("split_heads", value, Op::SplitHeads { x, n, l, h, dk })
    }

    /// Inverse of [`split_heads`](Self::split_heads).
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(Error::shape("merge_heads", &s, &[heads]));
        }
        let (n, l, h, dk) = (s[0] / heads, s[1], heads, s[2]);
        if h == 1 {
            return self.reshape(x, &[n, l, dk]);
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for ni in 0..n {
            for li in 0..l {
                for hi in 0..h {
                    let src = ((ni * h + hi) * l + li) * dk;
                    let dst = ((ni * l + li) * h + hi) * dk;
                    out[dst..dst + dk].copy_from_slice(&xd[src..src + dk]);
                }
            }
        }
        let value = Tensor::new(vec![n, l, h * dk], out)?;
        self.push("merge_heads", value, Op::MergeHeads { x, n, l, h, dk })
    }

    /// `[A, B, C, D] -> [A, C, B, D]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        let &[a, b, c, d] = s.as_slice() else {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "swap_axes12 expects rank 4".into(),
            });
        };
        let xd = self.value(x).data();
        let out = swap12(xd, [a, b, c, d]);
        let value = Tensor::new(vec![a, c, b, d], out)?;
        self.push(
            "swap_axes12",
            value,
            Op::SwapAxes12 {
                x,
                dims: [a, b, c, d],
            },
        )
    }

    /// Keeps frames `0, k, 2k, …` of `x[B, T, ...]`.
    pub fn stride_frames(&mut self, x: Var, k: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() < 2 || k == 0 {
            return Err(Error::shape("stride_frames", &s, &[k]));
        }
        let (batch, frames) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let kept = frames.div_ceil(k);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(batch * kept * inner);
        for bi in 0..batch {
            for t in (0..frames).step_by(k) {
                let off = (bi * frames + t) * inner;
                out.extend_from_slice(&xd[off..off + inner]);
            }
        }
        let mut shape = s;
        shape[1] = kept;
        let value = Tensor::new(shape, out)?;
        self.push(
            "stride_frames",
            value,
            Op::StrideFrames {
                x,
                batch,
                frames,
                inner,
                k,
            },
        )
    }

    /// First difference along the frame axis of `x[B, T, ...]`.
    pub fn temporal_diff(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[1] < 2 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "temporal difference needs at least 2 frames".into(),
            });
        }
        let (batch, frames) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(batch * (frames - 1) * inner);
        for bi in 0..batch {
            for t in 0..frames - 1 {
                let cur = (bi * frames + t) * inner;
                let next = cur + inner;
                out.extend((0..inner).map(|j| xd[next + j] - xd[cur + j]));
            }
        }
        let mut shape = s;
        shape[1] = frames - 1;
        let value = Tensor::new(shape, out)?;
        self.push(
            "temporal_diff",
            value,
            Op::TemporalDiff {
                x,
                batch,
                frames,
                inner,
            },
        )
    }

    /// First `len` entries along the leading axis.
    pub fn narrow(&mut self, x: Var, len: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.is_empty() || len > s[0] || len == 0 {
            return Err(Error::shape("narrow", &s, &[len]));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[..len * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let value = Tensor::new(shape, data)?;
        self.push("narrow", value, Op::Narrow { x, total: s[0] })
    }

    // ---------------------------------------------------------------
    // backward

    /// Propagates gradients from the scalar `loss` to every
    /// gradient-tracked leaf. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.backward_node(i, &g);
            let factor = self.faults.get(&self.nodes[i].op.kind()).copied();
            for (v, mut cg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if let Some(f) = factor {
                    cg.iter_mut().for_each(|x| *x *= f);
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, &c)| *a += c),
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                if self.rg(a) {
                    // da = g · bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m, n, k, T::one(), g, n as isize, 1, bd, 1, n as isize, T::zero(),
                        &mut da, k as isize, 1,
                    );
                    out.push((a, da));
                }
                if self.rg(b) {
                    // db = aᵀ · g
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k, m, n, T::one(), ad, 1, k as isize, g, n as isize, 1, T::zero(),
                        &mut db, n as isize, 1,
                    );
                    out.push((b, db));
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                if self.rg(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    // b viewed as [k, n] with strides (rsb, csb); da = g · bᵀ
                    let (rsb, csb) = if trans_b {
                        (1, k as isize)
                    } else {
                        (n as isize, 1)
                    };
                    for bi in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            &bd[bi * k * n..(bi + 1) * k * n],
                            csb,
                            rsb,
                            T::zero(),
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                    out.push((a, da));
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        let a_i = &ad[bi * m * k..(bi + 1) * m * k];
                        let g_i = &g[bi * m * n..(bi + 1) * m * n];
                        let db_i = &mut db[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            // db [n, k] = gᵀ · a
                            T::gemm(
                                n, m, k, T::one(), g_i, 1, n as isize, a_i, k as isize, 1,
                                T::zero(), db_i, k as isize, 1,
                            );
                        } else {
                            // db [k, n] = aᵀ · g
                            T::gemm(
                                k, m, n, T::one(), a_i, 1, k as isize, g_i, n as isize, 1,
                                T::zero(), db_i, n as isize, 1,
                            );
                        }
                    }
                    out.push((b, db));
                }
            }
            &Op::Add { a, b } => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::AddBroadcast { x, b } => {
                out.push((x, g.to_vec()));
                if self.rg(b) {
                    let w = self.value(b).len().max(1);
                    let mut db = vec![T::zero(); w];
                    for chunk in g.chunks(w) {
                        db.iter_mut().zip(chunk).for_each(|(d, &c)| *d += c);
                    }
                    out.push((b, db));
                }
            }
            &Op::Mul { a, b } => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                out.push((a, g.iter().zip(bd).map(|(&g, &y)| g * y).collect()));
                out.push((b, g.iter().zip(ad).map(|(&g, &x)| g * x).collect()));
            }
            &Op::Scale { x, s } => out.push((x, g.iter().map(|&v| v * s).collect())),
            &Op::Relu { x } => {
                let xd = self.value(x).data();
                out.push((
                    x,
                    g.iter()
                        .zip(xd)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                ));
            }
            &Op::Softmax { x } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                out.push((x, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let f = inv_std.len().max(1);
                let f = xhat.len() / f;
                let gam = self.value(*gamma).data();
                let ff = T::of(f as f64);
                let mut dgamma = vec![T::zero(); f];
                let mut dbeta = vec![T::zero(); f];
                let mut dx = Vec::with_capacity(xhat.len());
                for ((hr, gr), &is) in xhat.chunks(f).zip(g.chunks(f)).zip(inv_std) {
                    let mut sum_d = T::zero();
                    let mut sum_dh = T::zero();
                    for j in 0..f {
                        let d = gr[j] * gam[j];
                        sum_d += d;
                        sum_dh += d * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    for j in 0..f {
                        let d = gr[j] * gam[j];
                        dx.push(is / ff * (ff * d - sum_d - hr[j] * sum_dh));
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let f = inv_std.len();
                let rows = xhat.len() / f;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); f];
                let mut dbeta = vec![T::zero(); f];
                for (hr, gr) in xhat.chunks(f).zip(g.chunks(f)) {
                    for j in 0..f {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                }
                let mut dx = vec![T::zero(); xhat.len()];
                if *train {
                    let nn = T::of(rows as f64);
                    for r in 0..rows {
                        for j in 0..f {
                            let idx = r * f + j;
                            // sum over batch of dxhat = gamma*dbeta, of dxhat*xhat = gamma*dgamma
                            dx[idx] = gam[j] * inv_std[j] / nn
                                * (nn * g[idx] - dbeta[j] - xhat[idx] * dgamma[j]);
                        }
                    }
                } else {
                    for (idx, d) in dx.iter_mut().enumerate() {
                        let j = idx % f;
                        *d = g[idx] * gam[j] * inv_std[j];
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Dropout { x, mask } => {
                out.push((*x, g.iter().zip(mask).map(|(&g, &m)| g * m).collect()));
            }
            &Op::MeanAxis {
                x,
                outer,
                axis,
                inner,
            } => {
                let inv = T::one() / T::of(axis as f64);
                let mut dx = Vec::with_capacity(outer * axis * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for _ in 0..axis {
                        dx.extend(src.iter().map(|&v| v * inv));
                    }
                }
                out.push((x, dx));
            }
            &Op::Concat { a, b, wa, wb } => {
                let w = wa + wb;
                let rows = g.len() / w.max(1);
                let mut da = Vec::with_capacity(rows * wa);
                let mut db = Vec::with_capacity(rows * wb);
                for r in 0..rows {
                    da.extend_from_slice(&g[r * w..r * w + wa]);
                    db.extend_from_slice(&g[r * w + wa..(r + 1) * w]);
                }
                out.push((a, da));
                out.push((b, db));
            }
            Op::L2Normalize { x, norms, eps } => {
                let y = node.value.data();
                let f = node.value.last_dim().max(1);
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), &norm) in y.chunks(f).zip(g.chunks(f)).zip(norms) {
                    if norm > *eps {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / norm));
                    } else {
                        dx.extend(gr.iter().map(|&gv| gv / *eps));
                    }
                }
                out.push((*x, dx));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / T::of(b as f64);
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                out.push((*logits, d));
            }
            &Op::Sum { x } => out.push((x, vec![g[0]; self.value(x).len()])),
            &Op::Reshape { x } => out.push((x, g.to_vec())),
            &Op::SplitHeads { x, n, l, h, dk } => {
                let mut dx = vec![T::zero(); g.len()];
                for ni in 0..n {
                    for li in 0..l {
                        for hi in 0..h {
                            let orig = ((ni * l + li) * h + hi) * dk;
                            let split = ((ni * h + hi) * l + li) * dk;
                            dx[orig..orig + dk].copy_from_slice(&g[split..split + dk]);
                        }
                    }
                }
                out.push((x, dx));
            }
            &Op::MergeHeads { x, n, l, h, dk } => {
                let mut dx = vec![T::zero(); g.len()];
                for ni in 0..n {
                    for li in 0..l {
                        for hi in 0..h {
                            let split = ((ni * h + hi) * l + li) * dk;
                            let merged = ((ni * l + li) * h + hi) * dk;
                            dx[split..split + dk].copy_from_slice(&g[merged..merged + dk]);
                        }
                    }
                }
                out.push((x, dx));
            }
            &Op::SwapAxes12 { x, dims } => {
                let [a, b, c, d] = dims;
                out.push((x, swap12(g, [a, c, b, d])));
            }
            &Op::StrideFrames {
                x,
                batch,
                frames,
                inner,
                k,
            } => {
                let kept = frames.div_ceil(k);
                let mut dx = vec![T::zero(); batch * frames * inner];
                for bi in 0..batch {
                    for (j, t) in (0..frames).step_by(k).enumerate() {
                        let src = (bi * kept + j) * inner;
                        let dst = (bi * frames + t) * inner;
                        dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                out.push((x, dx));
            }
            &Op::TemporalDiff {
                x,
                batch,
                frames,
                inner,
            } => {
                let mut dx = vec![T::zero(); batch * frames * inner];
                for bi in 0..batch {
                    for t in 0..frames - 1 {
                        let src = (bi * (frames - 1) + t) * inner;
                        let cur = (bi * frames + t) * inner;
                        for j in 0..inner {
                            dx[cur + inner + j] += g[src + j];
                            dx[cur + j] -= g[src + j];
                        }
                    }
                }
                out.push((x, dx));
            }
            &Op::Narrow { x, total } => {
                let inner = g.len() / node.value.shape()[0];
                let mut dx = g.to_vec();
                dx.resize(total * inner, T::zero());
                out.push((x, dx));
            }
        }
        out
    }
}

fn swap12<T: Copy>(src: &[T], [a, b, c, d]: [usize; 4]) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for ai in 0..a {
        for ci in 0..c {
            for bi in 0..b {
                let off = ((ai * b + bi) * c + ci) * d;
                out.extend_from_slice(&src[off..off + d]);
            }
        }
    }
    out
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    T::exp_shifted(row, max);
    let total: T = row.iter().copied().sum();
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

//! Wengert tape: ops are recorded as they execute and replayed in reverse by
//! [`Tape::backward`]. One tape per loss; a tape that has run backward is
//! consumed and rejects further use.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels as k;
use super::{Result, Tensor, TensorError, STD_EPS};

/// Stabilizer for pairwise cosine similarity norms (kept far below STD_EPS so
/// near-unit vectors keep similarity 1 to ~1e-12).
const COS_EPS: f64 = 1e-12;

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    node: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    ScalarMul { a: usize, factor: f64 },
    AddScalar { a: usize },
    MatMul { a: usize, b: usize },
    Conv2d { input: usize, weight: usize, stride: usize, pad: usize },
    Relu { a: usize },
    MaxPool2d { a: usize, argmax: Vec<usize> },
    InstanceNorm { a: usize },
    MeanAxes { a: usize, axes: Vec<usize> },
    StdAxes { a: usize, axes: Vec<usize> },
    Softmax { a: usize, axis: usize },
    Log { a: usize },
    Exp { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Sum { a: usize },
    L2DistancePairwise { a: usize, b: usize },
    CosinePairwise { a: usize, b: usize },
    CrossEntropy { logits: usize, labels: Vec<usize> },
    L2NormalizeRows { a: usize },
    UpsampleNearest2d { a: usize, factor: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation graph over [`Tensor`] values.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    /// Register an input tensor. Its `requires_grad` flag decides whether
    /// `backward` reports a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        self.push_unchecked(tensor, Op::Leaf, needs)
    }

    /// Register a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_unchecked(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "Var used on the wrong tape");
        &self.nodes[v.node].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.node)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var {
            tape: self.id,
            node: self.nodes.len() - 1,
        }
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let value = Tensor::new(shape, data).map_err(|_| TensorError::NonFinite { op: op_name })?;
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    // ── Elementwise / broadcast ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |ai, bi| Op::Add { a: ai, b: bi })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |ai, bi| Op::Sub { a: ai, b: bi })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |ai, bi| Op::Mul { a: ai, b: bi })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, |ai, bi| Op::Div { a: ai, b: bi })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let (ta, tb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let out_shape = k::broadcast_shapes(name, ta.shape(), tb.shape())?;
        let data = k::broadcast_binary(ta.shape(), ta.data(), tb.shape(), tb.data(), &out_shape, f);
        let needs = self.needs(ai) || self.needs(bi);
        self.push(name, out_shape, data, op(ai, bi), needs)
    }

    pub fn scalar_mul(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let t = &self.nodes[ai].value;
        let data = t.data().iter().map(|v| v * factor).collect();
        let needs = self.needs(ai);
        self.push(
            "scalar_mul",
            t.shape().to_vec(),
            data,
            Op::ScalarMul { a: ai, factor },
            needs,
        )
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let t = &self.nodes[ai].value;
        let data = t.data().iter().map(|v| v + offset).collect();
        let needs = self.needs(ai);
        self.push(
            "add_scalar",
            t.shape().to_vec(),
            data,
            Op::AddScalar { a: ai },
            needs,
        )
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let (ta, tb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, kk, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = k::matmul(ta.data(), tb.data(), m, kk, n);
        let needs = self.needs(ai) || self.needs(bi);
        self.push("matmul", vec![m, n], data, Op::MatMul { a: ai, b: bi }, needs)
    }

    /// 2-D convolution over NCHW input with an OIHW kernel, zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let xi = self.check(input)?;
        let wi = self.check(weight)?;
        let (tx, tw) = (&self.nodes[xi].value, &self.nodes[wi].value);
        if tx.rank() != 4 {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                expected: "rank-4 input (N,C,H,W)",
                shape: tx.shape().to_vec(),
            });
        }
        if tw.rank() != 4 || tw.shape()[1] != tx.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: tx.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let (n, ci, h, w) = shape4(tx.shape());
        let (co, _, kh, kw) = shape4(tw.shape());
        let (ho, wo) = k::conv2d_out_dims(h, w, kh, kw, stride, pad)?;
        let data = k::conv2d_forward(
            tx.data(),
            tw.data(),
            n,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        );
        let needs = self.needs(xi) || self.needs(wi);
        self.push(
            "conv2d",
            vec![n, co, ho, wo],
            data,
            Op::Conv2d {
                input: xi,
                weight: wi,
                stride,
                pad,
            },
            needs,
        )
    }

    // ── Nonlinearities / pooling / normalization ────────────────────

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let t = &self.nodes[ai].value;
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let needs = self.needs(ai);
        self.push("relu", t.shape().to_vec(), data, Op::Relu { a: ai }, needs)
    }

    pub fn max_pool2d(&mut self, a: Var, kernel: usize, stride: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let t = &self.nodes[ai].value;
        if t.rank() != 4 {
            return Err(TensorError::InvalidShape {
                op: "max_pool2d",
                expected: "rank-4 input (N,C,H,W)",
                shape: t.shape().to_vec(),
            });
        }
        let (n, c, h, w) = shape4(t.shape());
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(TensorError::BadParameter {
                op: "max_pool2d",
                detail: format!("kernel {kernel} stride {stride} on {h}x{w}"),
            });
        }
        let ho = (h - kernel) / stride + 1;
        let wo = (w - kernel) / stride + 1;
        let (data, argmax) = k::maxpool2d_forward(t.data(), n, c, h, w, kernel, stride, ho, wo);
        let needs = self.needs(ai);
        self.push(
            "max_pool2d",
            vec![n, c, ho, wo],
            data,
            Op::MaxPool2d { a: ai, argmax },
            needs,
        )
    }

    /// Per-sample, per-channel normalization by spatial statistics
    /// (no learned scale/shift, no running averages).
    pub fn instance_norm(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let t = &self.nodes[ai].value;
        if t.rank() != 4 {
            return Err(TensorError::InvalidShape {
                op: "instance_norm",
                expected: "rank-4 input (N,C,H,W)",
                shape: t.shape().to_vec(),
            });
        }
        let (n, c, h, w) = shape4(t.shape());
        let m = h * w;
        if m == 0 {
            return Err(TensorError::Empty { op: "instance_norm" });
        }
        let x = t.data();
        let mut data = vec![0.0; x.len()];
        for g in 0..n * c {
            let lane = &x[g * m..(g + 1) * m];
            let mu = lane.iter().sum::<f64>() / m as f64;
            let var = lane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let sigma = (var + STD_EPS).sqrt();
            for (o, &v) in data[g * m..(g + 1) * m].iter_mut().zip(lane) {
                *o = (v - mu) / sigma;
            }
        }
        let needs = self.needs(ai);
        self.push(
            "instance_norm",
            t.shape().to_vec(),
            data,
            Op::InstanceNorm { a: ai },
            needs,
        )
    }

    // ── Reductions ──────────────────────────────────────────────────

    /// Mean over the given axes, keeping reduced dims as size 1.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let (out_shape, count) = self.reduction_prologue("mean_axes", ai, axes)?;
        let t = &self.nodes[ai].value;
        let mut data = vec![0.0; out_shape.iter().product()];
        let src = t.data();
        k::for_each_reduced(t.shape(), axes, |o, i| data[o] += src[i]);
        for v in data.iter_mut() {
            *v /= count as f64;
        }
        let needs = self.needs(ai);
        self.push(
            "mean_axes",
            out_shape,
            data,
            Op::MeanAxes {
                a: ai,
                axes: axes.to_vec(),
            },
            needs,
        )
    }

    /// Epsilon-stabilized standard deviation over the given axes
    /// (population variance, keepdims): `sqrt(var + STD_EPS)`.
    pub fn std_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let (out_shape, count) = self.reduction_prologue("std_axes", ai, axes)?;
        let t = &self.nodes[ai].value;
        let src = t.data();
        let out_numel: usize = out_shape.iter().product();
        let mut sums = vec![0.0; out_numel];
        k::for_each_reduced(t.shape(), axes, |o, i| sums[o] += src[i]);
        let means: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; out_numel];
        k::for_each_reduced(t.shape(), axes, |o, i| {
            let d = src[i] - means[o];
            sq[o] += d * d;
        });
        let data: Vec<f64> = sq
            .iter()
            .map(|s| (s / count as f64 + STD_EPS).sqrt())
            .collect();
        let needs = self.needs(ai);
        self.push(
            "std_axes",
            out_shape,
            data,
            Op::StdAxes {
                a: ai,
                axes: axes.to_vec(),
            },
            needs,
        )
    }

    fn reduction_prologue(
        &self,
        op: &'static str,
        ai: usize,
        axes: &[usize],
    ) -> Result<(Vec<usize>, usize)> {
        let t = &self.nodes[ai].value;
        let rank = t.rank();
        if axes.is_empty() {
            return Err(TensorError::Empty { op });
        }
        for &ax in axes {
            if ax >= rank {
                return Err(TensorError::InvalidAxis { op, axis: ax, rank });
            }
        }
        let count: usize = axes.iter().map(|&ax| t.shape()[ax]).product();
        if count == 0 {
            return Err(TensorError::Empty { op });
        }
        let out_shape: Vec<usize> = (0..rank)
            .map(|d| if axes.contains(&d) { 1 } else { t.shape()[d] })
            .collect();
        Ok((out_shape, count))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let t = &self.nodes[ai].value;
        if axis >= t.rank() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: t.rank(),
            });
        }
        if t.shape()[axis] == 0 {
            return Err(TensorError::Empty { op: "softmax" });
        }
        let src = t.data();
        let mut data = vec![0.0; src.len()];
        k::for_each_lane(t.shape(), axis, |base, stride, len| {
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(src[base + i * stride]);
            }
            let mut denom = 0.0;
            for i in 0..len {
                let e = (src[base + i * stride] - max).exp();
                data[base + i * stride] = e;
                denom += e;
            }
            for i in 0..len {
                data[base + i * stride] /= denom;
            }
        });
        let needs = self.needs(ai);
        self.push(
            "softmax",
            t.shape().to_vec(),
            data,
            Op::Softmax { a: ai, axis },
            needs,
        )
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let t = &self.nodes[ai].value;
        let data = t.data().iter().map(|v| v.ln()).collect();
        let needs = self.needs(ai);
        self.push("log", t.shape().to_vec(), data, Op::Log { a: ai }, needs)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let t = &self.nodes[ai].value;
        let data = t.data().iter().map(|v| v.exp()).collect();
        let needs = self.needs(ai);
        self.push("exp", t.shape().to_vec(), data, Op::Exp { a: ai }, needs)
    }

    // ── Shape surgery ────────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat" });
        }
        let idxs: Vec<usize> = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<_>>()?;
        let first = self.nodes[idxs[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total_axis = 0usize;
        for &i in &idxs {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(d, &v)| d != axis && v != first[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first.clone(),
                    right: s.to_vec(),
                });
            }
            total_axis += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let mut offset = 0usize;
        for &i in &idxs {
            let s = self.nodes[i].value.shape();
            let mid = s[axis];
            let src = self.nodes[i].value.data();
            for o in 0..outer {
                for m in 0..mid {
                    let dst_base = (o * total_axis + offset + m) * inner;
                    let src_base = (o * mid + m) * inner;
                    data[dst_base..dst_base + inner]
                        .copy_from_slice(&src[src_base..src_base + inner]);
                }
            }
            offset += mid;
        }
        let needs = idxs.iter().any(|&i| self.needs(i));
        self.push(
            "concat",
            out_shape,
            data,
            Op::Concat { parts: idxs, axis },
            needs,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let t = &self.nodes[ai].value;
        if axis >= t.rank() {
            return Err(TensorError::InvalidAxis {
                op: "slice",
                axis,
                rank: t.rank(),
            });
        }
        if start + len > t.shape()[axis] {
            return Err(TensorError::BadParameter {
                op: "slice",
                detail: format!(
                    "range {start}..{} exceeds axis {axis} of size {}",
                    start + len,
                    t.shape()[axis]
                ),
            });
        }
        let mut out_shape = t.shape().to_vec();
        out_shape[axis] = len;
        let data = copy_axis_range(t.shape(), t.data(), axis, start, len);
        let needs = self.needs(ai);
        self.push(
            "slice",
            out_shape,
            data,
            Op::Slice { a: ai, axis, start },
            needs,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ai = self.check(a)?;
        let t = &self.nodes[ai].value;
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: t.numel(),
                numel,
            });
        }
        let data = t.data().to_vec();
        let needs = self.needs(ai);
        self.push("reshape", shape, data, Op::Reshape { a: ai }, needs)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let t = &self.nodes[ai].value;
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::BadParameter {
                op: "permute",
                detail: format!("perm {perm:?} is not a permutation of 0..{rank}"),
            });
        }
        let (out_shape, data) = k::permute_forward(t.shape(), t.data(), perm);
        let needs = self.needs(ai);
        self.push(
            "permute",
            out_shape,
            data,
            Op::Permute {
                a: ai,
                perm: perm.to_vec(),
            },
            needs,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let total: f64 = self.nodes[ai].value.data().iter().sum();
        let needs = self.needs(ai);
        self.push("sum", vec![], vec![total], Op::Sum { a: ai }, needs)
    }

    /// Mean over all elements (reduces to a scalar).
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(TensorError::Empty { op: "mean_all" });
        }
        let s = self.sum(a)?;
        self.scalar_mul(s, 1.0 / n as f64)
    }

    // ── Distance / similarity / losses ──────────────────────────────

    /// Pairwise squared Euclidean distances between rows: (P,D) x (Q,D) -> (P,Q).
    pub fn l2_distance_pairwise(&mut self, a: Var, b: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let (ta, tb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "l2_distance_pairwise",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (p, d) = (ta.shape()[0], ta.shape()[1]);
        let q = tb.shape()[0];
        let mut data = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                let mut acc = 0.0;
                for t in 0..d {
                    let diff = ta.data()[i * d + t] - tb.data()[j * d + t];
                    acc += diff * diff;
                }
                data[i * q + j] = acc;
            }
        }
        let needs = self.needs(ai) || self.needs(bi);
        self.push(
            "l2_distance_pairwise",
            vec![p, q],
            data,
            Op::L2DistancePairwise { a: ai, b: bi },
            needs,
        )
    }

    /// Pairwise cosine similarity between rows: (P,D) x (Q,D) -> (P,Q).
    pub fn cosine_similarity_pairwise(&mut self, a: Var, b: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let (ta, tb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_similarity_pairwise",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (p, d) = (ta.shape()[0], ta.shape()[1]);
        let q = tb.shape()[0];
        let na = row_norms(ta.data(), p, d);
        let nb = row_norms(tb.data(), q, d);
        let mut data = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                let mut dot = 0.0;
                for t in 0..d {
                    dot += ta.data()[i * d + t] * tb.data()[j * d + t];
                }
                data[i * q + j] = dot / (na[i] * nb[j]);
            }
        }
        let needs = self.needs(ai) || self.needs(bi);
        self.push(
            "cosine_similarity_pairwise",
            vec![p, q],
            data,
            Op::CosinePairwise { a: ai, b: bi },
            needs,
        )
    }

    /// Mean cross-entropy of row-softmaxed logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.check(logits)?;
        let t = &self.nodes[li].value;
        if t.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                expected: "rank-2 logits (batch, classes)",
                shape: t.shape().to_vec(),
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if rows == 0 || cols == 0 {
            return Err(TensorError::Empty { op: "cross_entropy" });
        }
        if labels.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        for &l in labels {
            if l >= cols {
                return Err(TensorError::LabelOutOfRange {
                    label: l,
                    classes: cols,
                });
            }
        }
        let z = t.data();
        let mut total = 0.0;
        for r in 0..rows {
            let row = &z[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[r]];
        }
        let needs = self.needs(li);
        self.push(
            "cross_entropy",
            vec![],
            vec![total / rows as f64],
            Op::CrossEntropy {
                logits: li,
                labels: labels.to_vec(),
            },
            needs,
        )
    }

    /// Normalize each row of a (R,D) matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let t = &self.nodes[ai].value;
        if t.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "l2_normalize_rows",
                expected: "rank-2 matrix",
                shape: t.shape().to_vec(),
            });
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                return Err(TensorError::ZeroNorm {
                    op: "l2_normalize_rows",
                    row: r,
                });
            }
            for (o, &v) in data[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / n;
            }
        }
        let needs = self.needs(ai);
        self.push(
            "l2_normalize_rows",
            vec![rows, d],
            data,
            Op::L2NormalizeRows { a: ai },
            needs,
        )
    }

    /// Nearest-neighbor spatial upsampling of an NCHW map by an integer factor.
    pub fn upsample_nearest2d(&mut self, a: Var, factor: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let t = &self.nodes[ai].value;
        if t.rank() != 4 {
            return Err(TensorError::InvalidShape {
                op: "upsample_nearest2d",
                expected: "rank-4 input (N,C,H,W)",
                shape: t.shape().to_vec(),
            });
        }
        if factor == 0 {
            return Err(TensorError::BadParameter {
                op: "upsample_nearest2d",
                detail: "factor must be >= 1".into(),
            });
        }
        let (n, c, h, w) = shape4(t.shape());
        let (ho, wo) = (h * factor, w * factor);
        let mut data = vec![0.0; n * c * ho * wo];
        let src = t.data();
        for g in 0..n * c {
            for y in 0..ho {
                for x in 0..wo {
                    data[(g * ho + y) * wo + x] = src[(g * h + y / factor) * w + x / factor];
                }
            }
        }
        let needs = self.needs(ai);
        self.push(
            "upsample_nearest2d",
            vec![n, c, ho, wo],
            data,
            Op::UpsampleNearest2d { a: ai, factor },
            needs,
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape: a second call
    /// (or recording more ops) errors.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let li = self.check(loss)?;
        if !self.nodes[li].value.is_scalar() {
            return Err(TensorError::LossNotScalar {
                shape: self.nodes[li].value.shape().to_vec(),
            });
        }
        self.consumed = true;
        self.grads[li] = Some(vec![1.0]);
        for idx in (0..=li).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let grad_out = self.grads[idx].clone().expect("grad present");
            self.backward_node(idx, &grad_out);
        }
        Ok(())
    }

    /// Gradient of the most recent `backward` loss w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Result<Option<Tensor>> {
        let i = self.check(v)?;
        Ok(self.grads[i].as_ref().map(|g| {
            Tensor::new(self.nodes[i].value.shape().to_vec(), g.clone())
                .expect("gradient shape matches value")
        }))
    }

    /// Value of `v` with its gradient attached (zeros if none flowed).
    pub fn extract(&self, v: Var) -> Result<Tensor> {
        let i = self.check(v)?;
        let mut t = self.nodes[i].value.clone();
        let g = self.grads[i]
            .clone()
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        t.set_grad(g);
        Ok(t)
    }

    fn accumulate(&mut self, idx: usize, contribution: Vec<f64>) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut self.grads[idx] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contribution) {
                    *a += b;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn backward_node(&mut self, idx: usize, g: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let sa = self.nodes[a].value.shape().to_vec();
                let sb = self.nodes[b].value.shape().to_vec();
                if self.needs(a) {
                    self.accumulate(a, k::reduce_to_shape(g, &out_shape, &sa));
                }
                if self.needs(b) {
                    self.accumulate(b, k::reduce_to_shape(g, &out_shape, &sb));
                }
            }
            Op::Sub { a, b } => {
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let sa = self.nodes[a].value.shape().to_vec();
                let sb = self.nodes[b].value.shape().to_vec();
                if self.needs(a) {
                    self.accumulate(a, k::reduce_to_shape(g, &out_shape, &sa));
                }
                if self.needs(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(b, k::reduce_to_shape(&neg, &out_shape, &sb));
                }
            }
            Op::Mul { a, b } => self.backward_mul_div(idx, a, b, g, false),
            Op::Div { a, b } => self.backward_mul_div(idx, a, b, g, true),
            Op::ScalarMul { a, factor } => {
                if self.needs(a) {
                    self.accumulate(a, g.iter().map(|v| v * factor).collect());
                }
            }
            Op::AddScalar { a } => {
                if self.needs(a) {
                    self.accumulate(a, g.to_vec());
                }
            }
            Op::MatMul { a, b } => {
                let ta = &self.nodes[a].value;
                let tb = &self.nodes[b].value;
                let (m, kk) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let da = if self.needs(a) {
                    let bt = k::transpose2d(tb.data(), kk, n);
                    Some(k::matmul(g, &bt, m, n, kk))
                } else {
                    None
                };
                let db = if self.needs(b) {
                    let at = k::transpose2d(ta.data(), m, kk);
                    Some(k::matmul(&at, g, kk, m, n))
                } else {
                    None
                };
                if let Some(da) = da {
                    self.accumulate(a, da);
                }
                if let Some(db) = db {
                    self.accumulate(b, db);
                }
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            } => {
                let tx = &self.nodes[input].value;
                let tw = &self.nodes[weight].value;
                let (n, ci, h, w) = shape4(tx.shape());
                let (co, _, kh, kw) = shape4(tw.shape());
                let (_, _, ho, wo) = shape4(self.nodes[idx].value.shape());
                let (dx, dw) = k::conv2d_backward(
                    tx.data(),
                    tw.data(),
                    g,
                    n,
                    ci,
                    h,
                    w,
                    co,
                    kh,
                    kw,
                    stride,
                    pad,
                    ho,
                    wo,
                    self.needs(input),
                    self.needs(weight),
                );
                if let Some(dx) = dx {
                    self.accumulate(input, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(weight, dw);
                }
            }
            Op::Relu { a } => {
                if self.needs(a) {
                    let x = self.nodes[a].value.data();
                    let dx = g
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.accumulate(a, dx);
                }
            }
            Op::MaxPool2d { a, argmax } => {
                if self.needs(a) {
                    let mut dx = vec![0.0; self.nodes[a].value.numel()];
                    for (gi, &src) in argmax.iter().enumerate() {
                        dx[src] += g[gi];
                    }
                    self.accumulate(a, dx);
                }
            }
            Op::InstanceNorm { a } => {
                if self.needs(a) {
                    let tx = &self.nodes[a].value;
                    let (n, c, h, w) = shape4(tx.shape());
                    let m = h * w;
                    let x = tx.data();
                    let y = self.nodes[idx].value.data();
                    let mut dx = vec![0.0; x.len()];
                    for gidx in 0..n * c {
                        let lane = gidx * m..(gidx + 1) * m;
                        let xs = &x[lane.clone()];
                        let ys = &y[lane.clone()];
                        let gs = &g[lane.clone()];
                        let mu = xs.iter().sum::<f64>() / m as f64;
                        let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
                        let sigma = (var + STD_EPS).sqrt();
                        let g_mean = gs.iter().sum::<f64>() / m as f64;
                        let gy_mean =
                            gs.iter().zip(ys).map(|(gv, yv)| gv * yv).sum::<f64>() / m as f64;
                        for ((o, &gv), &yv) in dx[lane].iter_mut().zip(gs).zip(ys) {
                            *o = (gv - g_mean - yv * gy_mean) / sigma;
                        }
                    }
                    self.accumulate(a, dx);
                }
            }
            Op::MeanAxes { a, axes } => {
                if self.needs(a) {
                    let t = &self.nodes[a].value;
                    let count: usize = axes.iter().map(|&ax| t.shape()[ax]).product();
                    let mut dx = vec![0.0; t.numel()];
                    k::for_each_reduced(t.shape(), &axes, |o, i| {
                        dx[i] = g[o] / count as f64;
                    });
                    self.accumulate(a, dx);
                }
            }
            Op::StdAxes { a, axes } => {
                if self.needs(a) {
                    let t = &self.nodes[a].value;
                    let count: usize = axes.iter().map(|&ax| t.shape()[ax]).product();
                    let out = self.nodes[idx].value.data();
                    let src = t.data();
                    let mut sums = vec![0.0; out.len()];
                    k::for_each_reduced(t.shape(), &axes, |o, i| sums[o] += src[i]);
                    let means: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
                    let mut dx = vec![0.0; t.numel()];
                    k::for_each_reduced(t.shape(), &axes, |o, i| {
                        dx[i] = g[o] * (src[i] - means[o]) / (count as f64 * out[o]);
                    });
                    self.accumulate(a, dx);
                }
            }
            Op::Softmax { a, axis } => {
                if self.needs(a) {
                    let s = self.nodes[idx].value.data();
                    let shape = self.nodes[idx].value.shape().to_vec();
                    let mut dx = vec![0.0; s.len()];
                    k::for_each_lane(&shape, axis, |base, stride, len| {
                        let mut dot = 0.0;
                        for i in 0..len {
                            let p = base + i * stride;
                            dot += g[p] * s[p];
                        }
                        for i in 0..len {
                            let p = base + i * stride;
                            dx[p] = s[p] * (g[p] - dot);
                        }
                    });
                    self.accumulate(a, dx);
                }
            }
            Op::Log { a } => {
                if self.needs(a) {
                    let x = self.nodes[a].value.data();
                    self.accumulate(a, g.iter().zip(x).map(|(gv, xv)| gv / xv).collect());
                }
            }
            Op::Exp { a } => {
                if self.needs(a) {
                    let y = self.nodes[idx].value.data();
                    self.accumulate(a, g.iter().zip(y).map(|(gv, yv)| gv * yv).collect());
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let mut offset = 0usize;
                for p in parts {
                    let len = self.nodes[p].value.shape()[axis];
                    if self.needs(p) {
                        let dp = copy_axis_range(&out_shape, g, axis, offset, len);
                        self.accumulate(p, dp);
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                if self.needs(a) {
                    let src_shape = self.nodes[a].value.shape().to_vec();
                    let out_shape = self.nodes[idx].value.shape().to_vec();
                    let mut dx = vec![0.0; self.nodes[a].value.numel()];
                    scatter_axis_range(&src_shape, &mut dx, axis, start, out_shape[axis], g);
                    self.accumulate(a, dx);
                }
            }
            Op::Reshape { a } => {
                if self.needs(a) {
                    self.accumulate(a, g.to_vec());
                }
            }
            Op::Permute { a, perm } => {
                if self.needs(a) {
                    let out_shape = self.nodes[idx].value.shape().to_vec();
                    let inv = k::invert_perm(&perm);
                    let (_, dx) = k::permute_forward(&out_shape, g, &inv);
                    self.accumulate(a, dx);
                }
            }
            Op::Sum { a } => {
                if self.needs(a) {
                    self.accumulate(a, vec![g[0]; self.nodes[a].value.numel()]);
                }
            }
            Op::L2DistancePairwise { a, b } => {
                let ta = &self.nodes[a].value;
                let tb = &self.nodes[b].value;
                let (p, d) = (ta.shape()[0], ta.shape()[1]);
                let q = tb.shape()[0];
                let (xa, xb) = (ta.data(), tb.data());
                let mut da = self.needs(a).then(|| vec![0.0; p * d]);
                let mut db = self.needs(b).then(|| vec![0.0; q * d]);
                for i in 0..p {
                    for j in 0..q {
                        let gv = g[i * q + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = xa[i * d + t] - xb[j * d + t];
                            if let Some(da) = da.as_mut() {
                                da[i * d + t] += 2.0 * gv * diff;
                            }
                            if let Some(db) = db.as_mut() {
                                db[j * d + t] -= 2.0 * gv * diff;
                            }
                        }
                    }
                }
                if let Some(da) = da {
                    self.accumulate(a, da);
                }
                if let Some(db) = db {
                    self.accumulate(b, db);
                }
            }
            Op::CosinePairwise { a, b } => {
                let ta = &self.nodes[a].value;
                let tb = &self.nodes[b].value;
                let (p, d) = (ta.shape()[0], ta.shape()[1]);
                let q = tb.shape()[0];
                let (xa, xb) = (ta.data(), tb.data());
                let na = row_norms(xa, p, d);
                let nb = row_norms(xb, q, d);
                let c = self.nodes[idx].value.data();
                let mut da = self.needs(a).then(|| vec![0.0; p * d]);
                let mut db = self.needs(b).then(|| vec![0.0; q * d]);
                for i in 0..p {
                    for j in 0..q {
                        let gv = g[i * q + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let cij = c[i * q + j];
                        for t in 0..d {
                            if let Some(da) = da.as_mut() {
                                da[i * d + t] += gv
                                    * (xb[j * d + t] / (na[i] * nb[j])
                                        - cij * xa[i * d + t] / (na[i] * na[i]));
                            }
                            if let Some(db) = db.as_mut() {
                                db[j * d + t] += gv
                                    * (xa[i * d + t] / (na[i] * nb[j])
                                        - cij * xb[j * d + t] / (nb[j] * nb[j]));
                            }
                        }
                    }
                }
                if let Some(da) = da {
                    self.accumulate(a, da);
                }
                if let Some(db) = db {
                    self.accumulate(b, db);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if self.needs(logits) {
                    let t = &self.nodes[logits].value;
                    let (rows, cols) = (t.shape()[0], t.shape()[1]);
                    let z = t.data();
                    let scale = g[0] / rows as f64;
                    let mut dz = vec![0.0; z.len()];
                    for r in 0..rows {
                        let row = &z[r * cols..(r + 1) * cols];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for cidx in 0..cols {
                            let p = (row[cidx] - max).exp() / denom;
                            let target = if labels[r] == cidx { 1.0 } else { 0.0 };
                            dz[r * cols + cidx] = scale * (p - target);
                        }
                    }
                    self.accumulate(logits, dz);
                }
            }
            Op::L2NormalizeRows { a } => {
                if self.needs(a) {
                    let t = &self.nodes[a].value;
                    let (rows, d) = (t.shape()[0], t.shape()[1]);
                    let x = t.data();
                    let mut dx = vec![0.0; x.len()];
                    for r in 0..rows {
                        let row = &x[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = row.iter().zip(gr).map(|(xv, gv)| xv * gv).sum();
                        for t in 0..d {
                            dx[r * d + t] = gr[t] / n - row[t] * dot / (n * n * n);
                        }
                    }
                    self.accumulate(a, dx);
                }
            }
            Op::UpsampleNearest2d { a, factor } => {
                if self.needs(a) {
                    let t = &self.nodes[a].value;
                    let (n, c, h, w) = shape4(t.shape());
                    let (ho, wo) = (h * factor, w * factor);
                    let mut dx = vec![0.0; t.numel()];
                    for gidx in 0..n * c {
                        for y in 0..ho {
                            for x in 0..wo {
                                dx[(gidx * h + y / factor) * w + x / factor] +=
                                    g[(gidx * ho + y) * wo + x];
                            }
                        }
                    }
                    self.accumulate(a, dx);
                }
            }
        }
    }

    fn backward_mul_div(&mut self, idx: usize, a: usize, b: usize, g: &[f64], is_div: bool) {
        let out_shape = self.nodes[idx].value.shape().to_vec();
        let sa = self.nodes[a].value.shape().to_vec();
        let sb = self.nodes[b].value.shape().to_vec();
        let (xa, xb) = (
            self.nodes[a].value.data().to_vec(),
            self.nodes[b].value.data().to_vec(),
        );
        if self.needs(a) {
            // d/da: mul -> g*b, div -> g/b
            let da_full = if is_div {
                broadcast_with_grad(g, &sb, &xb, &out_shape, |gv, bv| gv / bv)
            } else {
                broadcast_with_grad(g, &sb, &xb, &out_shape, |gv, bv| gv * bv)
            };
            self.accumulate(a, k::reduce_to_shape(&da_full, &out_shape, &sa));
        }
        if self.needs(b) {
            // d/db: mul -> g*a, div -> -g*a/b^2
            let db_full = if is_div {
                let tmp = broadcast_with_grad(g, &sa, &xa, &out_shape, |gv, av| gv * av);
                
                k::broadcast_binary(&out_shape, &tmp, &sb, &xb, &out_shape, |t, bv| {
                    -t / (bv * bv)
                })
            } else {
                broadcast_with_grad(g, &sa, &xa, &out_shape, |gv, av| gv * av)
            };
            self.accumulate(b, k::reduce_to_shape(&db_full, &out_shape, &sb));
        }
    }
}

/// Combine a full-shape gradient with a (possibly broadcast) operand.
fn broadcast_with_grad(
    g: &[f64],
    operand_shape: &[usize],
    operand: &[f64],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    k::broadcast_binary(out_shape, g, operand_shape, operand, out_shape, f)
}

fn shape4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

fn row_norms(data: &[f64], rows: usize, d: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            (data[r * d..(r + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                + COS_EPS)
                .sqrt()
        })
        .collect()
}

/// Copy the sub-block `start..start+len` along `axis` out of `src`.
fn copy_axis_range(shape: &[usize], src: &[f64], axis: usize, start: usize, len: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for m in 0..len {
            let src_base = (o * mid + start + m) * inner;
            let dst_base = (o * len + m) * inner;
            out[dst_base..dst_base + inner].copy_from_slice(&src[src_base..src_base + inner]);
        }
    }
    out
}

/// Add `src` (shaped like the slice) into `dst` at `start..start+len` along `axis`.
fn scatter_axis_range(
    dst_shape: &[usize],
    dst: &mut [f64],
    axis: usize,
    start: usize,
    len: usize,
    src: &[f64],
) {
    let outer: usize = dst_shape[..axis].iter().product();
    let mid = dst_shape[axis];
    let inner: usize = dst_shape[axis + 1..].iter().product();
    for o in 0..outer {
        for m in 0..len {
            let dst_base = (o * mid + start + m) * inner;
            let src_base = (o * len + m) * inner;
            for i in 0..inner {
                dst[dst_base + i] += src[src_base + i];
            }
        }
    }
}

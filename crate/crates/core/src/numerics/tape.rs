//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive records its inputs (and whatever it needs for the
//! backward pass) as a node on the tape. [`Tape::backward`] walks the nodes
//! in reverse execution order and accumulates gradients additively, so a
//! value consumed by several operations receives the sum of their
//! contributions.
//!
//! Leading batch axes are supported throughout: the spatial ops (`gap`,
//! `soft_threshold`, channel broadcasts) act on the trailing `C×S×S` block and
//! treat everything before it as batch.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    Sub,
    Mul,
    AddBias,
    Abs,
    Neg,
    Scale,
    Sigmoid,
    Relu,
    Gap,
    SoftThreshold,
    Reshape,
    SliceLast,
    SmoothL1,
    SumLast,
    SumAll,
    CrossEntropy,
    CornerSort,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "bmm",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddBias => "add_bias",
            OpKind::Abs => "abs",
            OpKind::Neg => "neg",
            OpKind::Scale => "scale",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Gap => "gap",
            OpKind::SoftThreshold => "soft_threshold",
            OpKind::Reshape => "reshape",
            OpKind::SliceLast => "slice_last",
            OpKind::SmoothL1 => "smooth_l1",
            OpKind::SumLast => "sum_last",
            OpKind::SumAll => "sum_all",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::CornerSort => "corner_sort",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        use OpKind::*;
        [
            Leaf,
            MatMul,
            BatchMatMul,
            Add,
            Sub,
            Mul,
            AddBias,
            Abs,
            Neg,
            Scale,
            Sigmoid,
            Relu,
            Gap,
            SoftThreshold,
            Reshape,
            SliceLast,
            SmoothL1,
            SumLast,
            SumAll,
            CrossEntropy,
            CornerSort,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

/// Element-wise operation selector for [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Abs,
    Scale(f64),
}

/// How the second operand of a binary op lines up with the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `b` matches a leading prefix of `a`'s shape and is repeated over the
    /// remaining `inner` trailing elements (per-channel over spatial dims).
    Trailing { inner: usize },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var, bc: Broadcast },
    Sub { a: Var, b: Var, bc: Broadcast },
    Mul { a: Var, b: Var, bc: Broadcast },
    AddBias { x: Var, bias: Var },
    Abs(Var),
    Neg(Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Gap { x: Var, spatial: usize },
    SoftThreshold { x: Var, tau: Var, spatial: usize },
    Reshape(Var),
    SliceLast { x: Var, start: usize, width: usize },
    SmoothL1(Var),
    SumLast(Var),
    SumAll(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    CornerSort(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Abs(_) => OpKind::Abs,
            Op::Neg(_) => OpKind::Neg,
            Op::Scale(..) => OpKind::Scale,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::Gap { .. } => OpKind::Gap,
            Op::SoftThreshold { .. } => OpKind::SoftThreshold,
            Op::Reshape(_) => OpKind::Reshape,
            Op::SliceLast { .. } => OpKind::SliceLast,
            Op::SmoothL1(_) => OpKind::SmoothL1,
            Op::SumLast(_) => OpKind::SumLast,
            Op::SumAll(_) => OpKind::SumAll,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::CornerSort(_) => OpKind::CornerSort,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass.
///
/// A tape is meant to be used for a single forward/backward pass and is
/// confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    branches: Option<Vec<u8>>,
    fault: Option<OpKind>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe row-major (or transposed row-major)
    // matrices that lie entirely inside the given slices, and `c` holds
    // m*n contiguous elements that do not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn broadcast_of(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if b.len() < a.len() && a.starts_with(b) {
        let inner = a[b.len()..].iter().product();
        return Ok(Broadcast::Trailing { inner });
    }
    Err(Error::shape(
        op,
        format!("cannot broadcast {b:?} against {a:?}"),
    ))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records which side of every kink (relu, abs, soft
    /// threshold, corner sort, SmoothL1 knee) each element fell on.
    pub fn with_branch_tracking() -> Self {
        Self {
            branches: Some(Vec::new()),
            ..Self::default()
        }
    }

    /// Makes the backward pass of `kind` deliberately wrong (upstream
    /// gradient scaled by 1.1). Used to verify that gradient checks catch
    /// broken derivatives.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn fault(&self) -> Option<OpKind> {
        self.fault
    }

    /// Branch signature recorded so far, if tracking is on.
    pub fn branch_signature(&self) -> Option<&[u8]> {
        self.branches.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn record_branches(&mut self, it: impl Iterator<Item = u8>) {
        if let Some(b) = self.branches.as_mut() {
            b.extend(it);
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("{sa:?} · {sb:?}: need [m×k]·[k×n]"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            (self.value(a).data(), k as isize, 1),
            (self.value(b).data(), n as isize, 1),
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// Batched product `a[B×m×k] · b[B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(
                "bmm",
                format!("{sa:?} · {sb:?}: need [B×m×k]·[B×k×n]"),
            ));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    (&ad[i * m * k..], k as isize, 1),
                    (&bd[i * k * n..], n as isize, 1),
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul { a, b, batch, m, k, n },
            rg,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let bc = broadcast_of(name, self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data: Vec<f64> = match bc {
            Broadcast::Same => av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Broadcast::Trailing { inner } => av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv.data()[i / inner]))
                .collect(),
        };
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, make(a, b, bc), rg))
    }

    /// `a + b`; `b` may also be per-channel (a leading prefix of `a`'s shape).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |a, b, bc| Op::Add { a, b, bc })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |a, b, bc| Op::Sub { a, b, bc })
    }

    /// Element-wise (Hadamard) product, with the same broadcasting as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |a, b, bc| Op::Mul { a, b, bc })
    }

    /// `x + bias` where `bias` matches the last axis of `x` (dense-layer bias).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape(
                "add_bias",
                format!("bias {sb:?} does not match last axis of {sx:?}"),
            ));
        }
        let n = sb[0];
        let bd = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % n])
            .collect();
        let out = Tensor::from_parts(sx.to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        if self.branches.is_some() {
            let signs: Vec<u8> = self
                .value(x)
                .data()
                .iter()
                .map(|&v| (v > 0.0) as u8 + 2 * (v < 0.0) as u8)
                .collect();
            self.record_branches(signs.into_iter());
        }
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    /// `max(x, 0)`, with subgradient 0 at 0.
    pub fn relu(&mut self, x: Var) -> Var {
        if self.branches.is_some() {
            let b: Vec<u8> = self.value(x).data().iter().map(|&v| (v > 0.0) as u8).collect();
            self.record_branches(b.into_iter());
        }
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Dispatches one of the element-wise kinds.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = |b: Option<Var>| {
            b.ok_or_else(|| Error::Invalid(format!("{kind:?} needs a second operand")))
        };
        match kind {
            ElementwiseKind::Add => self.add(a, need_b(b)?),
            ElementwiseKind::Sub => self.sub(a, need_b(b)?),
            ElementwiseKind::Mul => self.mul(a, need_b(b)?),
            ElementwiseKind::Abs => Ok(self.abs(a)),
            ElementwiseKind::Scale(s) => Ok(self.scale(a, s)),
        }
    }

    fn spatial_split(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
        if shape.len() < 3 {
            return Err(Error::shape(
                op,
                format!("expected [..., C, S, S], got {shape:?}"),
            ));
        }
        let spatial = shape[shape.len() - 2] * shape[shape.len() - 1];
        let outer = shape[..shape.len() - 2].iter().product();
        Ok((outer, spatial))
    }

    /// Global average pooling over the two trailing (spatial) axes:
    /// `[..., C, S, S] -> [..., C]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, spatial) = Self::spatial_split("gap", &shape)?;
        let xd = self.value(x).data();
        let inv = 1.0 / spatial as f64;
        let data = (0..outer)
            .map(|c| xd[c * spatial..(c + 1) * spatial].iter().sum::<f64>() * inv)
            .collect();
        let out = Tensor::from_parts(shape[..shape.len() - 2].to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gap { x, spatial }, rg))
    }

    /// Channel-wise soft thresholding of `x[..., C, S, S]` by `tau[..., C]`:
    /// `x - τ` above `τ`, `x + τ` below `-τ`, zero in between.
    pub fn soft_threshold(&mut self, x: Var, tau: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, spatial) = Self::spatial_split("soft_threshold", &shape)?;
        if self.shape(tau) != &shape[..shape.len() - 2] {
            return Err(Error::shape(
                "soft_threshold",
                format!(
                    "thresholds {:?} do not match channels of {shape:?}",
                    self.shape(tau)
                ),
            ));
        }
        let td = self.value(tau).data();
        if let Some(t) = td.iter().find(|t| !(**t >= 0.0)) {
            return Err(Error::Invalid(format!(
                "soft_threshold: thresholds must be non-negative, got {t}"
            )));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(xd.len());
        let mut br = self.branches.as_ref().map(|_| Vec::with_capacity(xd.len()));
        for c in 0..outer {
            let t = td[c];
            for &v in &xd[c * spatial..(c + 1) * spatial] {
                let (y, b) = if v > t {
                    (v - t, 1)
                } else if v < -t {
                    (v + t, 2)
                } else {
                    (0.0, 0)
                };
                data.push(y);
                if let Some(br) = br.as_mut() {
                    br.push(b);
                }
            }
        }
        if let Some(br) = br {
            self.record_branches(br.into_iter());
        }
        let out = Tensor::from_parts(shape, data);
        let rg = self.rg(x) || self.rg(tau);
        Ok(self.push(out, Op::SoftThreshold { x, tau, spatial }, rg))
    }

    /// Metadata-only reshape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Columns `start..start+width` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("tensor has at least one axis");
        if width == 0 || start + width > n {
            return Err(Error::shape(
                "slice_last",
                format!("range {start}..{} out of last axis {n}", start + width),
            ));
        }
        let rows = self.value(x).len() / n;
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&xd[r * n + start..r * n + start + width]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = width;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::SliceLast { x, start, width },
            rg,
        ))
    }

    /// Element-wise SmoothL1: `0.5x²` for `|x| < 1`, `|x| - 0.5` otherwise.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        if self.branches.is_some() {
            let b: Vec<u8> = self
                .value(x)
                .data()
                .iter()
                .map(|&v| (v.abs() < 1.0) as u8 + 2 * (v < 0.0) as u8)
                .collect();
            self.record_branches(b.into_iter());
        }
        self.unary(x, crate::losses::smooth_l1, Op::SmoothL1(x))
    }

    /// Sum over the last axis; a 1-d input collapses to shape `[1]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let xd = self.value(x).data();
        let data: Vec<f64> = xd.chunks(n).map(|c| c.iter().sum()).collect();
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let rg = self.rg(x);
        self.push(Tensor::from_parts(out_shape, data), Op::SumLast(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Per-row softmax cross-entropy of `logits[B×M]` against class ids;
    /// returns `[B]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {shape:?} vs {} labels", labels.len()),
            ));
        }
        let m = shape[1];
        if let Some(&l) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::Invalid(format!(
                "cross_entropy: label {l} out of range for {m} classes"
            )));
        }
        let ld = self.value(logits).data();
        let mut probs = Vec::with_capacity(ld.len());
        let mut loss = Vec::with_capacity(labels.len());
        for (row, &label) in ld.chunks(m).zip(labels) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - mx).exp()).sum();
            let lse = mx + sum.ln();
            loss.push(lse - row[label]);
            probs.extend(row.iter().map(|&z| (z - lse).exp()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::vector(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Orders raw box outputs `[..., 4]` into corner form:
    /// `(min(a0,a2), min(a1,a3), max(a0,a2), max(a1,a3))`.
    pub fn corner_sort(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.last() != Some(&4) {
            return Err(Error::shape(
                "corner_sort",
                format!("last axis must be 4, got {shape:?}"),
            ));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(xd.len());
        let mut br = Vec::new();
        for r in xd.chunks(4) {
            data.extend_from_slice(&[r[0].min(r[2]), r[1].min(r[3]), r[0].max(r[2]), r[1].max(r[3])]);
            br.push((r[0] <= r[2]) as u8);
            br.push((r[1] <= r[3]) as u8);
        }
        self.record_branches(br.into_iter());
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::CornerSort(x), rg))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.1);
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| {
                    g.filter(|_| matches!(self.nodes[i].op, Op::Leaf))
                        .map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
                })
                .collect(),
        })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Returns the gradient buffer of `v` (zero-initialized on first use),
        // or None when `v` does not need a gradient.
        fn buf<'a>(
            tape: &Tape,
            grads: &'a mut [Option<Vec<f64>>],
            v: Var,
        ) -> Option<&'a mut Vec<f64>> {
            if !tape.nodes[v.0].requires_grad {
                return None;
            }
            let n = tape.nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
        }

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = buf(self, grads, a) {
                    // dA = G · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        (g, n as isize, 1),
                        (self.value(b).data(), 1, n as isize),
                        1.0,
                        ga,
                    );
                }
                if let Some(gb) = buf(self, grads, b) {
                    // dB = Aᵀ · G
                    gemm(
                        k,
                        m,
                        n,
                        (self.value(a).data(), 1, k as isize),
                        (g, n as isize, 1),
                        1.0,
                        gb,
                    );
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n } => {
                if let Some(ga) = buf(self, grads, a) {
                    let bd = self.value(b).data();
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            (&g[i * m * n..], n as isize, 1),
                            (&bd[i * k * n..], 1, n as isize),
                            1.0,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = buf(self, grads, b) {
                    let ad = self.value(a).data();
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            (&ad[i * m * k..], 1, k as isize),
                            (&g[i * m * n..], n as isize, 1),
                            1.0,
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                }
            }
            &Op::Add { a, b, bc } | &Op::Sub { a, b, bc } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if let Some(ga) = buf(self, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = buf(self, grads, b) {
                    match bc {
                        Broadcast::Same => gb.iter_mut().zip(g).for_each(|(d, s)| *d += sign * s),
                        Broadcast::Trailing { inner } => {
                            for (d, chunk) in gb.iter_mut().zip(g.chunks(inner)) {
                                *d += sign * chunk.iter().sum::<f64>();
                            }
                        }
                    }
                }
            }
            &Op::Mul { a, b, bc } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(ga) = buf(self, grads, a) {
                    match bc {
                        Broadcast::Same => {
                            for ((d, s), y) in ga.iter_mut().zip(g).zip(bv) {
                                *d += s * y;
                            }
                        }
                        Broadcast::Trailing { inner } => {
                            for (i, (d, s)) in ga.iter_mut().zip(g).enumerate() {
                                *d += s * bv[i / inner];
                            }
                        }
                    }
                }
                if let Some(gb) = buf(self, grads, b) {
                    match bc {
                        Broadcast::Same => {
                            for ((d, s), x) in gb.iter_mut().zip(g).zip(av) {
                                *d += s * x;
                            }
                        }
                        Broadcast::Trailing { inner } => {
                            for (j, d) in gb.iter_mut().enumerate() {
                                let r = j * inner..(j + 1) * inner;
                                *d += g[r.clone()].iter().zip(&av[r]).map(|(s, x)| s * x).sum::<f64>();
                            }
                        }
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(gx) = buf(self, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = buf(self, grads, bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            &Op::Abs(x) => {
                let xv = self.value(x).data();
                if let Some(gx) = buf(self, grads, x) {
                    for ((d, s), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += s;
                        } else if v < 0.0 {
                            *d -= s;
                        }
                    }
                }
            }
            &Op::Neg(x) => {
                if let Some(gx) = buf(self, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            &Op::Scale(x, c) => {
                if let Some(gx) = buf(self, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
                }
            }
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = buf(self, grads, x) {
                    for ((d, s), &a) in gx.iter_mut().zip(g).zip(y) {
                        *d += s * a * (1.0 - a);
                    }
                }
            }
            &Op::Relu(x) => {
                let xv = self.value(x).data();
                if let Some(gx) = buf(self, grads, x) {
                    for ((d, s), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            &Op::Gap { x, spatial } => {
                if let Some(gx) = buf(self, grads, x) {
                    let inv = 1.0 / spatial as f64;
                    for (c, &s) in g.iter().enumerate() {
                        gx[c * spatial..(c + 1) * spatial]
                            .iter_mut()
                            .for_each(|d| *d += s * inv);
                    }
                }
            }
            &Op::SoftThreshold { x, tau, spatial } => {
                let xv = self.value(x).data();
                let tv = self.value(tau).data();
                if let Some(gx) = buf(self, grads, x) {
                    for (i, (d, s)) in gx.iter_mut().zip(g).enumerate() {
                        if xv[i].abs() > tv[i / spatial] {
                            *d += s;
                        }
                    }
                }
                if let Some(gt) = buf(self, grads, tau) {
                    for (c, d) in gt.iter_mut().enumerate() {
                        let t = tv[c];
                        let mut acc = 0.0;
                        for i in c * spatial..(c + 1) * spatial {
                            if xv[i] > t {
                                acc -= g[i];
                            } else if xv[i] < -t {
                                acc += g[i];
                            }
                        }
                        *d += acc;
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = buf(self, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            &Op::SliceLast { x, start, width } => {
                let n = *self.shape(x).last().unwrap();
                if let Some(gx) = buf(self, grads, x) {
                    for (r, row) in g.chunks(width).enumerate() {
                        gx[r * n + start..r * n + start + width]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            &Op::SmoothL1(x) => {
                let xv = self.value(x).data();
                if let Some(gx) = buf(self, grads, x) {
                    for ((d, s), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let dv = if v.abs() < 1.0 { v } else { v.signum() };
                        *d += s * dv;
                    }
                }
            }
            &Op::SumLast(x) => {
                let n = *self.shape(x).last().unwrap();
                if let Some(gx) = buf(self, grads, x) {
                    for (i, d) in gx.iter_mut().enumerate() {
                        *d += g[i / n];
                    }
                }
            }
            &Op::SumAll(x) => {
                if let Some(gx) = buf(self, grads, x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let m = probs.len() / labels.len();
                if let Some(gl) = buf(self, grads, *logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..m {
                            let ind = if j == label { 1.0 } else { 0.0 };
                            gl[r * m + j] += g[r] * (probs[r * m + j] - ind);
                        }
                    }
                }
            }
            &Op::CornerSort(x) => {
                let xv = self.value(x).data();
                if let Some(gx) = buf(self, grads, x) {
                    for (r, (row, grow)) in xv.chunks(4).zip(g.chunks(4)).enumerate() {
                        let o = r * 4;
                        // Ties route the min to the first coordinate and the
                        // max to the second.
                        let (lo_x, hi_x) = if row[0] <= row[2] { (0, 2) } else { (2, 0) };
                        let (lo_y, hi_y) = if row[1] <= row[3] { (1, 3) } else { (3, 1) };
                        gx[o + lo_x] += grow[0];
                        gx[o + lo_y] += grow[1];
                        gx[o + hi_x] += grow[2];
                        gx[o + hi_y] += grow[3];
                    }
                }
            }
        }
    }
}

use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for reporting and for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    AddColBias,
    MulRows,
    Tanh,
    Sigmoid,
    Gelu,
    Relu,
    MaskedSoftmax,
    DepthwiseConv,
    PointwiseConv,
    GatherRows,
    ConcatRows,
    ConcatCols,
    SliceCols,
    Reshape,
    Sum,
    BceWithLogits,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddColBias => "add_col_bias",
            OpKind::MulRows => "mul_rows",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::MaskedSoftmax => "masked_softmax",
            OpKind::DepthwiseConv => "depthwise_causal_conv1d",
            OpKind::PointwiseConv => "pointwise_conv",
            OpKind::GatherRows => "gather_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceCols => "slice_cols",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::BceWithLogits => "bce_with_logits",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        use OpKind::*;
        [
            Leaf, MatMul, Transpose, Add, Sub, Mul, Scale, AddColBias, MulRows, Tanh, Sigmoid, Gelu,
            Relu, MaskedSoftmax, DepthwiseConv, PointwiseConv, GatherRows, ConcatRows, ConcatCols,
            SliceCols, Reshape, Sum, BceWithLogits,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddColBias { x: Var, bias: Var },
    MulRows { x: Var, gate: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Gelu { x: Var },
    Relu { x: Var },
    MaskedSoftmax { x: Var, mask: Vec<bool> },
    DepthwiseConv { x: Var, kernels: Var, dilation: usize },
    PointwiseConv { x: Var, w: Var, b: Var },
    GatherRows { table: Var, indices: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    Reshape { x: Var },
    Sum { x: Var },
    BceWithLogits { logit: Var, target: f64 },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddColBias { .. } => OpKind::AddColBias,
            Op::MulRows { .. } => OpKind::MulRows,
            Op::Tanh { .. } => OpKind::Tanh,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Relu { .. } => OpKind::Relu,
            Op::MaskedSoftmax { .. } => OpKind::MaskedSoftmax,
            Op::DepthwiseConv { .. } => OpKind::DepthwiseConv,
            Op::PointwiseConv { .. } => OpKind::PointwiseConv,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ConcatRows { .. } => OpKind::ConcatRows,
            Op::ConcatCols { .. } => OpKind::ConcatCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Sum { .. } => OpKind::Sum,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::AddColBias { x, bias } => vec![*x, *bias],
            Op::MulRows { x, gate } => vec![*x, *gate],
            Op::DepthwiseConv { x, kernels, .. } => vec![*x, *kernels],
            Op::PointwiseConv { x, w, b } => vec![*x, *w, *b],
            Op::GatherRows { table, .. } => vec![*table],
            Op::ConcatRows { parts } | Op::ConcatCols { parts } => parts.clone(),
            Op::Transpose { x }
            | Op::Scale { x, .. }
            | Op::Tanh { x }
            | Op::Sigmoid { x }
            | Op::Gelu { x }
            | Op::Relu { x }
            | Op::MaskedSoftmax { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Reshape { x }
            | Op::Sum { x } => vec![*x],
            Op::BceWithLogits { logit, .. } => vec![*logit],
        }
    }
}

/// Pointwise nonlinearities available through [`Tape::activation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Gelu,
    Relu,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Eager recording of differentiable operations.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it and a single reverse sweep computes all gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients of a scalar loss with respect to every gradient-tracking leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU, tanh approximation.
pub(crate) fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupt the backward rule of one operation kind (its input gradients
    /// are scaled by 1.5). Used to confirm the gradient checker catches a
    /// broken derivative.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient-tracking input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        if cfg!(debug_assertions) && !value.is_finite() {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].value.is_finite());
            debug_assert!(
                !inputs_finite,
                "{} produced non-finite output from finite inputs",
                op.kind().name()
            );
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    /// `a [m×k] · b [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul")?;
        let (k2, n) = bv.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bval) in row.iter_mut().zip(brow) {
                    *o += s * bval;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("transpose")?;
        let value = Tensor::new(vec![c, r], transpose_data(xv.data(), r, c))?;
        Ok(self.push(value, Op::Transpose { x }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av, bv));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { x, factor })
    }

    /// `out[i, j] = x[i, j] + bias[i]` for `x [r×c]`, `bias` of length `r`.
    pub fn add_col_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (r, c) = xv.dims2("add_col_bias")?;
        if bv.len() != r {
            return Err(shape_err("add_col_bias", xv, bv));
        }
        let mut data = xv.data().to_vec();
        for (row, &b) in data.chunks_mut(c.max(1)).zip(bv.data()) {
            row.iter_mut().for_each(|v| *v += b);
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(value, Op::AddColBias { x, bias }))
    }

    /// `out[i, j] = x[i, j] · gate[i]`; per-channel scaling of a `[d×L]` map.
    pub fn mul_rows(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gate));
        let (r, c) = xv.dims2("mul_rows")?;
        if gv.len() != r {
            return Err(shape_err("mul_rows", xv, gv));
        }
        let mut data = xv.data().to_vec();
        for (row, &g) in data.chunks_mut(c.max(1)).zip(gv.data()) {
            row.iter_mut().for_each(|v| *v *= g);
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(value, Op::MulRows { x, gate }))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Activation::Tanh => f64::tanh,
            Activation::Sigmoid => sigmoid,
            Activation::Gelu => gelu,
            Activation::Relu => |v| v.max(0.0),
        };
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let op = match kind {
            Activation::Tanh => Op::Tanh { x },
            Activation::Sigmoid => Op::Sigmoid { x },
            Activation::Gelu => Op::Gelu { x },
            Activation::Relu => Op::Relu { x },
        };
        self.push(value, op)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(Activation::Gelu, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    /// Softmax over the last axis, restricted to positions where `mask` is
    /// true. Masked positions get exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let last = *xv.shape().last().unwrap_or(&1);
        if mask.len() != last {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: xv.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(TensorError::AllMasked { op: "masked_softmax" });
        }
        let mut data = vec![0.0; xv.len()];
        for (row_in, row_out) in xv.data().chunks(last).zip(data.chunks_mut(last)) {
            softmax_row(row_in, mask, row_out);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Per-channel causal convolution of `x [d×L]` with `kernels [d×K]`.
    ///
    /// `out[c, t] = Σ_i kernels[c, i] · x[c, t − i·dilation]`, with inputs
    /// before the start of the sequence treated as zero. Tap `i` therefore
    /// looks `i·dilation` steps into the past and the output at `t` never
    /// depends on inputs after `t`.
    pub fn depthwise_causal_conv1d(&mut self, x: Var, kernels: Var, dilation: usize) -> Result<Var> {
        if dilation == 0 {
            return Err(TensorError::Invalid("depthwise_causal_conv1d: dilation must be ≥ 1".into()));
        }
        let (xv, kv) = (self.value(x), self.value(kernels));
        let (d, len) = xv.dims2("depthwise_causal_conv1d")?;
        let (d2, k) = kv.dims2("depthwise_causal_conv1d")?;
        if d != d2 || k == 0 {
            return Err(shape_err("depthwise_causal_conv1d", xv, kv));
        }
        let mut out = vec![0.0; d * len];
        let (xd, kd) = (xv.data(), kv.data());
        for c in 0..d {
            let xrow = &xd[c * len..(c + 1) * len];
            let orow = &mut out[c * len..(c + 1) * len];
            let krow = &kd[c * k..(c + 1) * k];
            for (t, o) in orow.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (i, &w) in krow.iter().enumerate() {
                    let lag = i * dilation;
                    if lag > t {
                        break;
                    }
                    acc += w * xrow[t - lag];
                }
                *o = acc;
            }
        }
        let value = Tensor::new(vec![d, len], out)?;
        Ok(self.push(value, Op::DepthwiseConv { x, kernels, dilation }))
    }

    /// Position-wise affine map: `out = w · x + b` for `x [d_in×L]`,
    /// `w [d_out×d_in]`, `b [d_out]`.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (d_in, len) = xv.dims2("pointwise_conv")?;
        let (d_out, d_in2) = wv.dims2("pointwise_conv")?;
        if d_in != d_in2 {
            return Err(shape_err("pointwise_conv", wv, xv));
        }
        if bv.len() != d_out {
            return Err(shape_err("pointwise_conv", wv, bv));
        }
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = vec![0.0; d_out * len];
        for o in 0..d_out {
            let row = &mut out[o * len..(o + 1) * len];
            for i in 0..d_in {
                let s = wd[o * d_in + i];
                for (r, &xval) in row.iter_mut().zip(&xd[i * len..(i + 1) * len]) {
                    *r += s * xval;
                }
            }
            row.iter_mut().for_each(|r| *r += bd[o]);
        }
        let value = Tensor::new(vec![d_out, len], out)?;
        Ok(self.push(value, Op::PointwiseConv { x, w, b }))
    }

    /// Row lookup `table [V×e]` at `indices` → `[L×e]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, e) = tv.dims2("gather_rows")?;
        let mut out = Vec::with_capacity(indices.len() * e);
        for &idx in indices {
            if idx >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: idx,
                    size: v,
                });
            }
            out.extend_from_slice(&tv.data()[idx * e..(idx + 1) * e]);
        }
        let value = Tensor::new(vec![indices.len(), e], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Stack 2-D parts with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows: no inputs".into()))?;
        let (_, c) = self.value(first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            let (r, c2) = pv.dims2("concat_rows")?;
            if c2 != c {
                return Err(shape_err("concat_rows", self.value(first), pv));
            }
            rows += r;
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Place 2-D parts with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols: no inputs".into()))?;
        let (r, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            let (r2, c) = pv.dims2("concat_cols")?;
            if r2 != r {
                return Err(shape_err("concat_cols", self.value(first), pv));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("slice_cols")?;
        if start + len > c || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                size: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.data()[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    /// Binary cross entropy of `sigmoid(logit)` against `target ∈ {0, 1}`,
    /// evaluated in logit space: `max(z, 0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Result<Var> {
        let z = self.value(logit).item().ok_or_else(|| {
            TensorError::Invalid(format!(
                "bce_with_logits expects one logit, got shape {:?}",
                self.value(logit).shape()
            ))
        })?;
        let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logit, target }))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every gradient-tracking leaf recorded before `loss` receives a
    /// gradient; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.backprop_node(node, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                if !node.requires_grad || !matches!(node.op, Op::Leaf) {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                Some(Tensor::new(node.value.shape().to_vec(), data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Accumulate into the gradient buffer of `v` if it tracks gradients.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let target = &nodes[v.0];
            if !target.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; target.value.len()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for (x, y) in grow.iter().zip(brow) {
                                s += x * y;
                            }
                            da[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = ad[i * k + p];
                            for (o, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += s * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose { x } => {
                let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                // g is [c×r]
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for ((o, gv), bv) in da.iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                });
                acc(*b, &mut |db| {
                    for ((o, gv), av) in db.iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale { x, factor } => {
                acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(o, v)| *o += factor * v));
            }
            Op::AddColBias { x, bias } => {
                let c = nodes[x.0].value.shape()[1];
                acc(*x, &mut |dx| add_into(dx, g));
                acc(*bias, &mut |db| {
                    for (o, row) in db.iter_mut().zip(g.chunks(c.max(1))) {
                        *o += row.iter().sum::<f64>();
                    }
                });
            }
            Op::MulRows { x, gate } => {
                let c = nodes[x.0].value.shape()[1].max(1);
                let (xd, gd) = (val(*x), val(*gate));
                acc(*x, &mut |dx| {
                    for ((drow, grow), &s) in dx.chunks_mut(c).zip(g.chunks(c)).zip(gd) {
                        drow.iter_mut().zip(grow).for_each(|(o, v)| *o += v * s);
                    }
                });
                acc(*gate, &mut |dg| {
                    for ((o, grow), xrow) in dg.iter_mut().zip(g.chunks(c)).zip(xd.chunks(c)) {
                        let mut s = 0.0;
                        for (a, b) in grow.iter().zip(xrow) {
                            s += a * b;
                        }
                        *o += s;
                    }
                });
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for ((o, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                        *o += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for ((o, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Gelu { x } => {
                let xd = val(*x);
                acc(*x, &mut |dx| {
                    for ((o, gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        *o += gv * gelu_grad(xv);
                    }
                });
            }
            Op::Relu { x } => {
                let xd = val(*x);
                acc(*x, &mut |dx| {
                    for ((o, gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        if xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x, mask } => {
                let last = mask.len();
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for ((drow, grow), yrow) in
                        dx.chunks_mut(last).zip(g.chunks(last)).zip(y.chunks(last))
                    {
                        let mut dot = 0.0;
                        for j in 0..last {
                            if mask[j] {
                                dot += yrow[j] * grow[j];
                            }
                        }
                        for j in 0..last {
                            if mask[j] {
                                drow[j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::DepthwiseConv {
                x,
                kernels,
                dilation,
            } => {
                let (d, len) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let k = nodes[kernels.0].value.shape()[1];
                let (xd, kd) = (val(*x), val(*kernels));
                acc(*x, &mut |dx| {
                    for c in 0..d {
                        for t in 0..len {
                            let gv = g[c * len + t];
                            for i in 0..k {
                                let lag = i * dilation;
                                if lag > t {
                                    break;
                                }
                                dx[c * len + t - lag] += kd[c * k + i] * gv;
                            }
                        }
                    }
                });
                acc(*kernels, &mut |dk| {
                    for c in 0..d {
                        for t in 0..len {
                            let gv = g[c * len + t];
                            for i in 0..k {
                                let lag = i * dilation;
                                if lag > t {
                                    break;
                                }
                                dk[c * k + i] += xd[c * len + t - lag] * gv;
                            }
                        }
                    }
                });
            }
            Op::PointwiseConv { x, w, b } => {
                let (d_in, len) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let d_out = nodes[w.0].value.shape()[0];
                let (xd, wd) = (val(*x), val(*w));
                acc(*x, &mut |dx| {
                    for o in 0..d_out {
                        let grow = &g[o * len..(o + 1) * len];
                        for i in 0..d_in {
                            let s = wd[o * d_in + i];
                            for (dv, &gv) in dx[i * len..(i + 1) * len].iter_mut().zip(grow) {
                                *dv += s * gv;
                            }
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for o in 0..d_out {
                        let grow = &g[o * len..(o + 1) * len];
                        for i in 0..d_in {
                            let mut s = 0.0;
                            for (a, bv) in grow.iter().zip(&xd[i * len..(i + 1) * len]) {
                                s += a * bv;
                            }
                            dw[o * d_in + i] += s;
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for (o, row) in db.iter_mut().zip(g.chunks(len.max(1))) {
                        *o += row.iter().sum::<f64>();
                    }
                });
            }
            Op::GatherRows { table, indices } => {
                let e = nodes[table.0].value.shape()[1];
                acc(*table, &mut |dt| {
                    for (r, &idx) in indices.iter().enumerate() {
                        add_into(&mut dt[idx * e..(idx + 1) * e], &g[r * e..(r + 1) * e]);
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    acc(p, &mut |dp| add_into(dp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut col = 0;
                for &p in parts {
                    let c = nodes[p.0].value.shape()[1];
                    acc(p, &mut |dp| {
                        for i in 0..rows {
                            add_into(
                                &mut dp[i * c..(i + 1) * c],
                                &g[i * total + col..i * total + col + c],
                            );
                        }
                    });
                    col += c;
                }
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].value.shape()[1];
                let len = node.value.shape()[1];
                acc(*x, &mut |dx| {
                    for (i, grow) in g.chunks(len).enumerate() {
                        add_into(&mut dx[i * c + start..i * c + start + len], grow);
                    }
                });
            }
            Op::Reshape { x } => acc(*x, &mut |dx| add_into(dx, g)),
            Op::Sum { x } => {
                let gv = g[0];
                acc(*x, &mut |dx| dx.iter_mut().for_each(|o| *o += gv));
            }
            Op::BceWithLogits { logit, target } => {
                let z = nodes[logit.0].value.data()[0];
                let gv = g[0];
                acc(*logit, &mut |dz| dz[0] += gv * (sigmoid(z) - target));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
}

fn transpose_data(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

fn softmax_row(row: &[f64], mask: &[bool], out: &mut [f64]) {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for ((o, &v), &m) in out.iter_mut().zip(row).zip(mask) {
        if m {
            *o = (v - max).exp();
            total += *o;
        } else {
            *o = 0.0;
        }
    }
    for (o, &m) in out.iter_mut().zip(mask) {
        if m {
            *o /= total;
        }
    }
}

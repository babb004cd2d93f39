//! Define-by-run tape. Every primitive evaluates eagerly, stores its output on
//! the tape and remembers what it needs for the backward sweep.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{invalid, mismatch, Error, Result};
use crate::kernels::{self, Conv1dGeom, Conv2dGeom};
use crate::tensor::{split_at_axis, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Backward rule for an operation implemented outside this crate.
///
/// The caller computes the forward value itself and hands it to
/// [`Graph::custom`] together with the inputs it was computed from.
pub trait Function: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order. `None` means
    /// the input does not receive a gradient from this op.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Silu,
    Softplus,
    Exp,
    Log,
    Tanh,
    Relu,
    Abs,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Silu => "silu",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Relu => "relu",
            Unary::Abs => "abs",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Abs => x.abs(),
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Padding mode of [`Graph::conv1d`]. Output length always equals input length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conv1dPadding {
    /// `kernel - 1` zeros on the left: output `t` sees inputs `t-k+1 ..= t`.
    Causal,
    /// Centered zero padding (left gets the smaller half).
    Same,
}

/// Batch-normalization mode.
#[derive(Clone, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with statistics of the current batch.
    Train,
    /// Normalize with supplied running statistics.
    Infer { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddAlong { x: usize, v: usize, axis: usize },
    MulAlong { x: usize, v: usize, axis: usize },
    MatMul(usize, usize),
    Conv1d { x: usize, w: usize, bias: Option<usize>, geom: Conv1dGeom },
    Conv2d { x: usize, w: usize, bias: Option<usize>, batch: usize, geom: Conv2dGeom },
    AvgPool2d { x: usize, kh: usize, kw: usize },
    Unary(usize, Unary),
    Clamp { x: usize, lo: f64, hi: f64 },
    SumAll(usize),
    SumAxis { x: usize, axis: usize },
    Reshape(usize),
    Permute { x: usize, axes: Vec<usize> },
    Flip { x: usize, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    MinAxis { x: usize, axis: usize, argmin: Vec<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, inv_std: Vec<f64>, normalized: Tensor, train: bool },
    Custom { inputs: Vec<usize>, f: Box<dyn Function> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddAlong { .. } => "add_along",
            Op::MulAlong { .. } => "mul_along",
            Op::MatMul(..) => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::Unary(_, u) => u.name(),
            Op::Clamp { .. } => "clamp",
            Op::SumAll(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Flip { .. } => "flip",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::MinAxis { .. } => "min_axis",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Custom { f, .. } => f.name(),
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode differentiation tape.
///
/// Single-writer: build and differentiate one graph from one thread. Leaf
/// tensors are shared via `Arc`, so parameter snapshots are not copied.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
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
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn needs(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: impl Into<Arc<Tensor>>) -> Var {
        self.push_arc(t.into(), Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: impl Into<Arc<Tensor>>) -> Var {
        self.push_arc(t.into(), Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: impl Into<Arc<Tensor>>, requires_grad: bool) -> Var {
        self.push_arc(t.into(), Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.idx(v).expect("var from another graph");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Accumulated gradient of a leaf (summed over all backward passes since
    /// the last [`Graph::zero_grad`]).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        let i = self.idx(v).ok()?;
        self.grads[i].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        let out = if ta.shape() == tb.shape() {
            ta.zip_map(tb, f)?
        } else if tb.is_scalar() {
            let s = tb.item();
            ta.map(|x| f(x, s))
        } else if ta.is_scalar() {
            let s = ta.item();
            tb.map(|y| f(s, y))
        } else {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        };
        Ok((ia, ib, out))
    }

    /// Elementwise sum; one operand may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(out, Op::Add(ia, ib), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(out, Op::Sub(ia, ib), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(out, Op::Mul(ia, ib), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let i = self.idx(x)?;
        let out = self.val(i).scale(c);
        let rg = self.needs(&[i]);
        Ok(self.push(out, Op::Scale(i, c), rg))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let i = self.idx(x)?;
        let out = self.val(i).map(|v| v + c);
        let rg = self.needs(&[i]);
        Ok(self.push(out, Op::AddScalar(i), rg))
    }

    fn along(&self, name: &'static str, x: usize, v: usize, axis: usize) -> Result<(usize, usize, usize)> {
        let (tx, tv) = (self.val(x), self.val(v));
        if axis >= tx.rank() {
            return Err(invalid(name, format!("axis {axis} for shape {:?}", tx.shape())));
        }
        if tv.rank() != 1 || tv.shape()[0] != tx.shape()[axis] {
            return Err(mismatch(name, tx.shape(), tv.shape()));
        }
        Ok(split_at_axis(tx.shape(), axis))
    }

    /// `x + v` where the vector `v` runs along `axis` of `x`.
    pub fn add_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let (ix, iv) = (self.idx(x)?, self.idx(v)?);
        let (outer, n, inner) = self.along("add_along", ix, iv, axis)?;
        let mut out = self.val(ix).clone();
        let vv = self.val(iv).data();
        for (chunk_i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let add = vv[chunk_i % n];
            chunk.iter_mut().for_each(|c| *c += add);
        }
        debug_assert_eq!(outer * n * inner, out.numel());
        let rg = self.needs(&[ix, iv]);
        Ok(self.push(out, Op::AddAlong { x: ix, v: iv, axis }, rg))
    }

    /// `x * v` where the vector `v` runs along `axis` of `x`.
    pub fn mul_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let (ix, iv) = (self.idx(x)?, self.idx(v)?);
        let (_, n, inner) = self.along("mul_along", ix, iv, axis)?;
        let mut out = self.val(ix).clone();
        let vv = self.val(iv).data();
        for (chunk_i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let m = vv[chunk_i % n];
            chunk.iter_mut().for_each(|c| *c *= m);
        }
        let rg = self.needs(&[ix, iv]);
        Ok(self.push(out, Op::MulAlong { x: ix, v: iv, axis }, rg))
    }

    pub fn unary(&mut self, x: Var, u: Unary) -> Result<Var> {
        let i = self.idx(x)?;
        let out = self.val(i).map(|v| u.apply(v));
        let rg = self.needs(&[i]);
        Ok(self.push(out, Op::Unary(i, u), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    /// Clamps into `[lo, hi]`; the gradient passes only where the input lies
    /// inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        let i = self.idx(x)?;
        let out = self.val(i).map(|v| v.clamp(lo, hi));
        let rg = self.needs(&[i]);
        Ok(self.push(out, Op::Clamp { x: i, lo, hi }, rg))
    }

    // ---- linear algebra / convolution ------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let out = Tensor::new(&[m, n], out)?;
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    /// 1-D convolution over `[batch, channels, len]` with weight
    /// `[out_channels, channels / groups, kernel]`. Stride 1, output length
    /// equals input length.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        groups: usize,
        padding: Conv1dPadding,
    ) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let ib = bias.map(|b| self.idx(b)).transpose()?;
        let (tx, tw) = (self.val(ix), self.val(iw));
        if tx.rank() != 3 || tw.rank() != 3 {
            return Err(mismatch("conv1d", tx.shape(), tw.shape()));
        }
        let (batch, cin, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, cin_g, kernel) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(mismatch("conv1d", tx.shape(), tw.shape()));
        }
        if let Some(ib) = ib {
            let tb = self.val(ib);
            if tb.shape() != [cout] {
                return Err(mismatch("conv1d", tw.shape(), tb.shape()));
            }
        }
        let pad_left = match padding {
            Conv1dPadding::Causal => kernel - 1,
            Conv1dPadding::Same => (kernel - 1) / 2,
        };
        let geom = Conv1dGeom {
            batch,
            in_channels: cin,
            out_channels: cout,
            len,
            kernel,
            groups,
            pad_left,
        };
        let out = kernels::conv1d_forward(tx.data(), tw.data(), ib.map(|i| self.val(i).data()), geom);
        let out = Tensor::new(&[batch, cout, len], out)?;
        let mut deps = vec![ix, iw];
        deps.extend(ib);
        let rg = self.needs(&deps);
        Ok(self.push(out, Op::Conv1d { x: ix, w: iw, bias: ib, geom }, rg))
    }

    /// 2-D convolution over `[batch, channels, h, w]` with weight
    /// `[out, channels, kh, kw]` (odd kernel sizes), stride 1, zero "same"
    /// padding (`k / 2` on each side).
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let ib = bias.map(|b| self.idx(b)).transpose()?;
        let (tx, tw) = (self.val(ix), self.val(iw));
        if tx.rank() != 4 || tw.rank() != 4 || tx.shape()[1] != tw.shape()[1] {
            return Err(mismatch("conv2d", tx.shape(), tw.shape()));
        }
        let (kh, kw) = (tw.shape()[2], tw.shape()[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel {kh}x{kw} must be odd")));
        }
        let cout = tw.shape()[0];
        if let Some(ib) = ib {
            if self.val(ib).shape() != [cout] {
                return Err(mismatch("conv2d", tw.shape(), self.val(ib).shape()));
            }
        }
        let batch = tx.shape()[0];
        let geom = Conv2dGeom {
            channels: tx.shape()[1],
            height: tx.shape()[2],
            width: tx.shape()[3],
            kh,
            kw,
        };
        let (rows, pos) = (geom.col_rows(), geom.positions());
        let mut col = vec![0.0; rows * pos];
        let mut out = vec![0.0; batch * cout * pos];
        let img = geom.channels * pos;
        for b in 0..batch {
            kernels::im2col(&tx.data()[b * img..(b + 1) * img], geom, &mut col);
            let dst = &mut out[b * cout * pos..(b + 1) * cout * pos];
            kernels::gemm(cout, rows, pos, tw.data(), false, &col, false, dst, false);
            if let Some(ib) = ib {
                let bias = self.val(ib).data();
                for (o, plane) in dst.chunks_mut(pos).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bias[o]);
                }
            }
        }
        let out = Tensor::new(&[batch, cout, geom.height, geom.width], out)?;
        let mut deps = vec![ix, iw];
        deps.extend(ib);
        let rg = self.needs(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                x: ix,
                w: iw,
                bias: ib,
                batch,
                geom,
            },
            rg,
        ))
    }

    /// Non-overlapping `kh x kw` average pooling over the last two axes.
    pub fn avg_pool2d(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let t = self.val(i);
        let r = t.rank();
        if r < 2 || kh == 0 || kw == 0 {
            return Err(invalid("avg_pool2d", format!("pool {kh}x{kw} on {:?}", t.shape())));
        }
        let (h, w) = (t.shape()[r - 2], t.shape()[r - 1]);
        if h % kh != 0 || w % kw != 0 {
            return Err(invalid(
                "avg_pool2d",
                format!("spatial dims {h}x{w} not divisible by pool {kh}x{kw}"),
            ));
        }
        let planes = t.numel() / (h * w);
        let out = kernels::avg_pool_forward(t.data(), planes, h, w, kh, kw);
        let mut shape = t.shape().to_vec();
        shape[r - 2] = h / kh;
        shape[r - 1] = w / kw;
        let out = Tensor::new(&shape, out)?;
        let rg = self.needs(&[i]);
        Ok(self.push(out, Op::AvgPool2d { x: i, kh, kw }, rg))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let out = Tensor::scalar(self.val(i).sum());
        let rg = self.needs(&[i]);
        Ok(self.push(out, Op::SumAll(i), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`; a rank-1 input reduces to shape `[1]`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let t = self.val(i);
        if axis >= t.rank() {
            return Err(invalid("sum_axis", format!("axis {axis} for shape {:?}", t.shape())));
        }
        let (outer, n, inner) = split_at_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &t.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(&shape, out)?;
        let rg = self.needs(&[i]);
        Ok(self.push(out, Op::SumAxis { x: i, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(invalid("mean_axis", format!("axis {axis} for shape {:?}", t.shape())));
        }
        let n = t.shape()[axis] as f64;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n)
    }

    /// Minimum along `axis` (axis removed). Returns the flat argmin index
    /// along `axis` for each output position, in output order.
    pub fn min_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let i = self.idx(x)?;
        let t = self.val(i);
        if axis >= t.rank() {
            return Err(invalid("min_axis", format!("axis {axis} for shape {:?}", t.shape())));
        }
        let (outer, n, inner) = split_at_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let mut argmin = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let mut best = (0usize, f64::INFINITY);
                for k in 0..n {
                    let v = t.data()[(o * n + k) * inner + j];
                    // first minimum wins on ties
                    if v < best.1 {
                        best = (k, v);
                    }
                }
                out[o * inner + j] = best.1;
                argmin[o * inner + j] = best.0;
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(&shape, out)?;
        let rg = self.needs(&[i]);
        let v = self.push(
            out,
            Op::MinAxis {
                x: i,
                axis,
                argmin: argmin.clone(),
            },
            rg,
        );
        Ok((v, argmin))
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.idx(x)?;
        let out = self.val(i).reshape(shape)?;
        let rg = self.needs(&[i]);
        Ok(self.push(out, Op::Reshape(i), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let i = self.idx(x)?;
        let out = self.val(i).permute(axes)?;
        let rg = self.needs(&[i]);
        Ok(self.push(
            out,
            Op::Permute {
                x: i,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let out = self.val(i).flip(axis)?;
        let rg = self.needs(&[i]);
        Ok(self.push(out, Op::Flip { x: i, axis }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let out = self.val(i).slice(axis, start, end)?;
        let rg = self.needs(&[i]);
        Ok(self.push(out, Op::Slice { x: i, axis, start }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = xs.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let parts: Vec<&Tensor> = idx.iter().map(|&i| self.val(i)).collect();
        let out = Tensor::concat(&parts, axis)?;
        let rg = self.needs(&idx);
        Ok(self.push(out, Op::Concat { xs: idx, axis }, rg))
    }

    // ---- normalization ----------------------------------------------------

    /// Batch normalization over axis 1 of `x` (`[batch, channels, ...]`).
    /// In `Train` mode returns the batch statistics for running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let tx = self.val(ix);
        if tx.rank() < 2 {
            return Err(invalid("batch_norm", format!("input shape {:?}", tx.shape())));
        }
        let c = tx.shape()[1];
        for t in [self.val(ig), self.val(ib)] {
            if t.shape() != [c] {
                return Err(mismatch("batch_norm", tx.shape(), t.shape()));
            }
        }
        let (outer, _, inner) = split_at_axis(tx.shape(), 1);
        let count = outer * inner;
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let s = &tx.data()[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                        mean[ch] += s.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for o in 0..outer {
                    for ch in 0..c {
                        let s = &tx.data()[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                        var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Infer { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(invalid("batch_norm", "running statistics length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.val(ig).data(), self.val(ib).data());
        let mut xhat = tx.clone();
        let mut out = tx.clone();
        for o in 0..outer {
            for ch in 0..c {
                let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
                for (xh, y) in xhat.data_mut()[r.clone()].iter_mut().zip(&mut out.data_mut()[r]) {
                    *xh = (*xh - mean[ch]) * inv_std[ch];
                    *y = g[ch] * *xh + b[ch];
                }
            }
        }
        let train = stats.is_some();
        let rg = self.needs(&[ix, ig, ib]);
        let v = self.push(
            out,
            Op::BatchNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                inv_std,
                normalized: xhat,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    // ---- extension point ----------------------------------------------------

    /// Records an externally computed value with a user-supplied backward rule.
    pub fn custom(&mut self, f: Box<dyn Function>, inputs: &[Var], output: Tensor) -> Result<Var> {
        let idx: Vec<usize> = inputs.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let rg = self.needs(&idx);
        Ok(self.push(output, Op::Custom { inputs: idx, f }, rg))
    }

    // ---- backward -----------------------------------------------------------

    /// Propagates `seed` (d loss / d output) back through the tape and adds
    /// the result into the gradient buffers of every trainable leaf.
    pub fn backward(&mut self, output: Var, seed: &Tensor) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("graph has no recorded forward pass".into()));
        }
        let out = self.idx(output)?;
        if seed.shape() != self.val(out).shape() {
            return Err(Error::Backward(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.val(out).shape()
            )));
        }
        if !self.nodes[out].requires_grad {
            return Ok(());
        }
        let mut pass: Vec<Option<Tensor>> = (0..=out).map(|_| None).collect();
        pass[out] = Some(seed.clone());
        for i in (0..=out).rev() {
            let Some(g) = pass[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (j, gj) in self.op_backward(i, &g)? {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                if gj.shape() != self.val(j).shape() {
                    return Err(Error::Backward(format!(
                        "{} produced gradient {:?} for input of shape {:?}",
                        self.nodes[i].op.name(),
                        gj.shape(),
                        self.val(j).shape()
                    )));
                }
                match &mut pass[j] {
                    Some(acc) => acc.add_assign(&gj)?,
                    slot => *slot = Some(gj),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions `(input node, grad)` of node `i` given its
    /// output gradient.
    fn op_backward(&self, i: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let reduce_to = |t: Tensor, target: usize| -> Tensor {
            let tv = self.val(target);
            if tv.shape() == t.shape() {
                t
            } else {
                // scalar operand broadcast over the other input
                Tensor::scalar(t.sum())
            }
        };
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, reduce_to(g.clone(), *a)), (*b, reduce_to(g.clone(), *b))],
            Op::Sub(a, b) => vec![(*a, reduce_to(g.clone(), *a)), (*b, reduce_to(g.scale(-1.0), *b))],
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let ga = mul_bcast(g, tb);
                let gb = mul_bcast(g, ta);
                vec![(*a, reduce_to(ga, *a)), (*b, reduce_to(gb, *b))]
            }
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::AddAlong { x, v, axis } => {
                let (_, n, inner) = split_at_axis(self.val(*x).shape(), *axis);
                let mut gv = vec![0.0; n];
                for (ci, chunk) in g.data().chunks(inner).enumerate() {
                    gv[ci % n] += chunk.iter().sum::<f64>();
                }
                vec![(*x, g.clone()), (*v, Tensor::new(&[n], gv)?)]
            }
            Op::MulAlong { x, v, axis } => {
                let tx = self.val(*x);
                let vv = self.val(*v).data();
                let (_, n, inner) = split_at_axis(tx.shape(), *axis);
                let mut gx = g.clone();
                let mut gv = vec![0.0; n];
                for (ci, (gc, xc)) in gx.data_mut().chunks_mut(inner).zip(tx.data().chunks(inner)).enumerate() {
                    let k = ci % n;
                    gv[k] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                    gc.iter_mut().for_each(|e| *e *= vv[k]);
                }
                vec![(*x, gx), (*v, Tensor::new(&[n], gv)?)]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                vec![(*a, Tensor::new(&[m, k], ga)?), (*b, Tensor::new(&[k, n], gb)?)]
            }
            Op::Conv1d { x, w, bias, geom } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let (gx, gw, gb) = kernels::conv1d_backward(tx.data(), tw.data(), g.data(), *geom);
                let mut v = vec![
                    (*x, Tensor::new(tx.shape(), gx)?),
                    (*w, Tensor::new(tw.shape(), gw)?),
                ];
                if let Some(b) = bias {
                    v.push((*b, Tensor::new(&[geom.out_channels], gb)?));
                }
                v
            }
            Op::Conv2d { x, w, bias, batch, geom } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let cout = tw.shape()[0];
                let (rows, pos) = (geom.col_rows(), geom.positions());
                let img = geom.channels * pos;
                let need_x = self.nodes[*x].requires_grad;
                let mut col = vec![0.0; rows * pos];
                let mut gcol = vec![0.0; rows * pos];
                let mut gx = vec![0.0; if need_x { tx.numel() } else { 0 }];
                let mut gw = vec![0.0; tw.numel()];
                let mut gb = vec![0.0; cout];
                for b in 0..*batch {
                    let gout = &g.data()[b * cout * pos..(b + 1) * cout * pos];
                    kernels::im2col(&tx.data()[b * img..(b + 1) * img], *geom, &mut col);
                    // dW += dY * col^T
                    kernels::gemm(cout, pos, rows, gout, false, &col, true, &mut gw, true);
                    if need_x {
                        // dcol = W^T * dY
                        kernels::gemm(rows, cout, pos, tw.data(), true, gout, false, &mut gcol, false);
                        kernels::col2im(&gcol, *geom, &mut gx[b * img..(b + 1) * img]);
                    }
                    if bias.is_some() {
                        for (o, plane) in gout.chunks(pos).enumerate() {
                            gb[o] += plane.iter().sum::<f64>();
                        }
                    }
                }
                let mut v = vec![(*w, Tensor::new(tw.shape(), gw)?)];
                if need_x {
                    v.push((*x, Tensor::new(tx.shape(), gx)?));
                }
                if let Some(bi) = bias {
                    v.push((*bi, Tensor::new(&[cout], gb)?));
                }
                v
            }
            Op::AvgPool2d { x, kh, kw } => {
                let tx = self.val(*x);
                let r = tx.rank();
                let (h, w) = (tx.shape()[r - 2], tx.shape()[r - 1]);
                let planes = tx.numel() / (h * w);
                let gx = kernels::avg_pool_backward(g.data(), planes, h, w, *kh, *kw);
                vec![(*x, Tensor::new(tx.shape(), gx)?)]
            }
            Op::Unary(x, u) => {
                let tx = self.val(*x);
                let mut gx = g.clone();
                for ((ge, &xv), &yv) in gx.data_mut().iter_mut().zip(tx.data()).zip(y.data()) {
                    *ge *= u.derivative(xv, yv);
                }
                vec![(*x, gx)]
            }
            Op::Clamp { x, lo, hi } => {
                let tx = self.val(*x);
                let mut gx = g.clone();
                for (ge, &xv) in gx.data_mut().iter_mut().zip(tx.data()) {
                    if xv < *lo || xv > *hi {
                        *ge = 0.0;
                    }
                }
                vec![(*x, gx)]
            }
            Op::SumAll(x) => {
                let s = g.item();
                vec![(*x, Tensor::full(self.val(*x).shape(), s))]
            }
            Op::SumAxis { x, axis } => {
                let tx = self.val(*x);
                let (outer, n, inner) = split_at_axis(tx.shape(), *axis);
                let mut gx = vec![0.0; tx.numel()];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for k in 0..n {
                        gx[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(src);
                    }
                }
                vec![(*x, Tensor::new(tx.shape(), gx)?)]
            }
            Op::MinAxis { x, axis, argmin } => {
                let tx = self.val(*x);
                let (outer, n, inner) = split_at_axis(tx.shape(), *axis);
                let mut gx = vec![0.0; tx.numel()];
                for o in 0..outer {
                    for j in 0..inner {
                        let k = argmin[o * inner + j];
                        gx[(o * n + k) * inner + j] = g.data()[o * inner + j];
                    }
                }
                vec![(*x, Tensor::new(tx.shape(), gx)?)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(self.val(*x).shape())?)],
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                vec![(*x, g.permute(&inv)?)]
            }
            Op::Flip { x, axis } => vec![(*x, g.flip(*axis)?)],
            Op::Slice { x, axis, start } => {
                let tx = self.val(*x);
                let (outer, n, inner) = split_at_axis(tx.shape(), *axis);
                let w = g.shape()[*axis];
                let mut gx = vec![0.0; tx.numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + w * inner].copy_from_slice(&g.data()[o * w * inner..(o + 1) * w * inner]);
                }
                vec![(*x, Tensor::new(tx.shape(), gx)?)]
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                let mut v = Vec::with_capacity(xs.len());
                for &xi in xs {
                    let w = self.val(xi).shape()[*axis];
                    v.push((xi, g.slice(*axis, start, start + w)?));
                    start += w;
                }
                v
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                inv_std,
                normalized: xhat,
                train,
            } => {
                let tx = self.val(*x);
                let gam = self.val(*gamma).data();
                let c = gam.len();
                let (outer, _, inner) = split_at_axis(tx.shape(), 1);
                let count = (outer * inner) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
                        for (gv, xh) in g.data()[r.clone()].iter().zip(&xhat.data()[r]) {
                            sum_g[ch] += gv;
                            sum_gx[ch] += gv * xh;
                        }
                    }
                }
                // batch statistics depend on x only in training mode
                let mut gx = g.clone();
                for o in 0..outer {
                    for ch in 0..c {
                        let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
                        let k = gam[ch] * inv_std[ch];
                        for (ge, xh) in gx.data_mut()[r.clone()].iter_mut().zip(&xhat.data()[r]) {
                            *ge = if *train {
                                k * (*ge - sum_g[ch] / count - xh * sum_gx[ch] / count)
                            } else {
                                k * *ge
                            };
                        }
                    }
                }
                vec![
                    (*x, gx),
                    (*gamma, Tensor::new(&[c], sum_gx)?),
                    (*beta, Tensor::new(&[c], sum_g)?),
                ]
            }
            Op::Custom { inputs, f } => {
                let tin: Vec<&Tensor> = inputs.iter().map(|&j| self.val(j)).collect();
                let grads = f.backward(&tin, y, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::Backward(format!(
                        "{} returned {} gradients for {} inputs",
                        f.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(&j, gj)| gj.map(|t| (j, t)))
                    .collect()
            }
        })
    }
}

/// `g * other`, where `other` may be a one-element tensor.
fn mul_bcast(g: &Tensor, other: &Tensor) -> Tensor {
    if other.shape() == g.shape() {
        g.zip_map(other, |a, b| a * b).expect("shapes checked")
    } else if other.is_scalar() {
        g.scale(other.item())
    } else {
        // `g` is the scalar side's output gradient broadcast against a full
        // tensor: product is reduced by the caller.
        other.scale(g.item())
    }
}

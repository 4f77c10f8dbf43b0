use super::kernels::{self, Conv2dSpec, ConvDims};
use super::Tensor;
use crate::error::TensorError;

/// Logits are clamped to `±LOGIT_CLAMP` before any `exp`/`log` in the losses.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Pow(Var, f64),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    SelectRows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    },
    Resize(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of recorded operations.
///
/// Topological order equals recording order, so [`Graph::backward`] is a single
/// reverse sweep. After backward, gradients are kept for leaves only and the
/// tape cannot be differentiated again.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let ea = if i + a.len() >= n {
            a[i + a.len() - n]
        } else {
            1
        };
        let eb = if i + b.len() >= n {
            b[i + b.len() - n]
        } else {
            1
        };
        out[i] = match (ea, eb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Accumulator adding `f(k)` to element `k`.
fn ew<'a>(f: &'a dyn Fn(usize) -> f64) -> impl FnMut(&mut [f64]) + 'a {
    move |buf: &mut [f64]| buf.iter_mut().enumerate().for_each(|(k, b)| *b += f(k))
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(!self.consumed, "recording on a consumed graph");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A detached leaf; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Gradient of the last backward pass with respect to leaf `v`; `None` for
    /// detached leaves or leaves unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var, TensorError> {
        let (a, b) = if self.shape(a) == self.shape(b) {
            (a, b)
        } else {
            let shape = broadcast_shape(self.shape(a), self.shape(b))
                .ok_or_else(|| mismatch(op, self.value(a), self.value(b)))?;
            (self.broadcast_to(a, &shape)?, self.broadcast_to(b, &shape)?)
        };
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, make(a, b), rg))
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `c - x`.
    pub fn rsub_scalar(&mut self, c: f64, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Natural log with the argument floored at `f64::MIN_POSITIVE`.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(f64::MIN_POSITIVE).ln(), Op::Log(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Clamps logits to `±LOGIT_CLAMP`.
    pub fn clamp_logits(&mut self, x: Var) -> Var {
        self.clamp(x, -LOGIT_CLAMP, LOGIT_CLAMP)
    }

    pub fn pow(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |v| v.powf(p), Op::Pow(x, p))
    }

    // ---- linear algebra & layout ------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(mismatch("matmul", va, vb));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(va.data(), vb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        if self.value(x).rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: self.shape(x).to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(x);
        let mut seen = vec![false; v.rank()];
        if perm.len() != v.rank()
            || perm
                .iter()
                .any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: format!(
                    "{perm:?} is not a permutation of the axes of {:?}",
                    v.shape()
                ),
            });
        }
        let map = kernels::permute_map(v.shape(), perm);
        let data = map.iter().map(|&i| v.data()[i]).collect();
        let shape = perm.iter().map(|&p| v.shape()[p]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Permute(x, perm.to_vec()),
            rg,
        ))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(x);
        if v.shape() == shape {
            return Ok(x);
        }
        if broadcast_shape(v.shape(), shape).as_deref() != Some(shape) {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let map = kernels::broadcast_map(v.shape(), shape);
        let data = map.iter().map(|&i| v.data()[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::BroadcastTo(x),
            rg,
        ))
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::MeanAll(x), rg)
    }

    /// Sums out `axis`; a rank-1 input reduces to shape `[1]`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(TensorError::InvalidArgument {
                op: "sum_axis",
                reason: format!("axis {axis} out of range for {:?}", v.shape()),
            });
        }
        let (outer, len, inner) = kernels::split_axis(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &v.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape: Vec<usize> = v.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis(x, axis), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                reason: format!("axis {axis} out of range for {:?}", v.shape()),
            });
        }
        let (outer, len, inner) = kernels::split_axis(v.shape(), axis);
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let max = (0..len)
                    .map(|a| out[idx(a)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (out[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[idx(a)] /= z;
                }
            }
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x, axis), rg))
    }

    // ---- structural ---------------------------------------------------------

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = xs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.value(*first).clone();
        if axis >= base.rank() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range for {:?}", base.shape()),
            });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.rank()
                && s.iter()
                    .zip(base.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, self.value(x)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(base.shape(), axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base.shape().to_vec();
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat(xs.to_vec(), axis),
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let v = self.value(x);
        if axis >= v.rank() || len == 0 || start + len > v.shape()[axis] {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                reason: format!(
                    "[{start}, {}) on axis {axis} of {:?}",
                    start + len,
                    v.shape()
                ),
            });
        }
        let (outer, full, inner) = kernels::split_axis(v.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Narrow(x, axis, start),
            rg,
        ))
    }

    /// Gathers rows of the leading axis; indices may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(x);
        let n = v.shape()[0];
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(TensorError::InvalidArgument {
                op: "select_rows",
                reason: format!("indices {rows:?} for leading extent {n}"),
            });
        }
        let mut out = Vec::with_capacity(rows.len() * v.len() / n);
        for &r in rows {
            out.extend_from_slice(v.row(r));
        }
        let mut shape = v.shape().to_vec();
        shape[0] = rows.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::SelectRows(x, rows.to_vec()),
            rg,
        ))
    }

    // ---- fused layers -------------------------------------------------------

    /// Normalizes over the last axis, then applies `gamma * x̂ + beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let v = self.value(x);
        let d = *v.shape().last().unwrap_or(&0);
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(mismatch("layer_norm", v, self.value(p)));
            }
        }
        let rows = v.len() / d;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; v.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            inv_std[r] = rstd;
            for i in 0..d {
                let xh = (row[i] - mean) * rstd;
                xhat[r * d + i] = xh;
                out[r * d + i] = g[i] * xh + b[i];
            }
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Cross-correlation of `x[C,H,W]` with `w[K,C,s,s]`, plus optional `bias[K]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    ) -> Result<Var, TensorError> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 3
            || vw.rank() != 4
            || vw.shape()[1] != vx.shape()[0]
            || vw.shape()[2] != vw.shape()[3]
        {
            return Err(mismatch("conv2d", vx, vw));
        }
        let (c, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (k, s) = (vw.shape()[0], vw.shape()[2]);
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(mismatch("conv2d", vw, self.value(b)));
            }
        }
        let extent = |n| {
            spec.output_extent(n, s)
                .ok_or_else(|| TensorError::InvalidShape {
                    op: "conv2d",
                    shape: vx.shape().to_vec(),
                    reason: format!("non-integral output extent for kernel {s} and {spec:?}"),
                })
        };
        let (ho, wo) = (extent(h)?, extent(wd)?);
        let dims = ConvDims {
            c,
            h,
            w: wd,
            k,
            s,
            ho,
            wo,
        };
        let mut out = vec![0.0; k * ho * wo];
        let bias_data = bias.map(|b| self.value(b).data());
        kernels::conv2d_forward(vx.data(), vw.data(), bias_data, &mut out, dims, &spec);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        Ok(self.push(
            Tensor::from_parts(vec![k, ho, wo], out),
            Op::Conv2d { x, w, bias, spec },
            rg,
        ))
    }

    /// Align-corners-false bilinear resize of `x[C,H,W]`.
    pub fn resize(&mut self, x: Var, height: usize, width: usize) -> Result<Var, TensorError> {
        let v = self.value(x);
        if v.rank() != 3 || height == 0 || width == 0 {
            return Err(TensorError::InvalidArgument {
                op: "resize",
                reason: format!("{:?} to {height}x{width}", v.shape()),
            });
        }
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let value = if (h, w) == (height, width) {
            v.clone()
        } else {
            let mut out = vec![0.0; c * height * width];
            kernels::resize_forward(v.data(), &mut out, c, (h, w), (height, width));
            Tensor::from_parts(vec![c, height, width], out)
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Resize(x), rg))
    }

    // ---- composites ---------------------------------------------------------

    /// `x[n, in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`, leaving `dloss/dleaf` on every
    /// differentiable leaf reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        if self.consumed {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                reason: "graph already consumed by a previous backward".into(),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let y = nodes[i].value.data();
        // Calls `f` with the gradient buffer of `v`, allocating it on first use.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut ew(&|k| g[k]));
                acc(*b, &mut ew(&|k| g[k]));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut ew(&|k| g[k]));
                acc(*b, &mut ew(&|k| -g[k]));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut ew(&|k| g[k] * vb[k]));
                acc(*b, &mut ew(&|k| g[k] * va[k]));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut ew(&|k| g[k] / vb[k]));
                acc(*b, &mut ew(&|k| -g[k] * va[k] / (vb[k] * vb[k])));
            }
            Op::Scale(a, c) => acc(*a, &mut ew(&|k| g[k] * c)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut ew(&|k| g[k])),
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut ew(&|k| if va[k] > 0.0 { g[k] } else { 0.0 }));
            }
            Op::Sigmoid(a) => acc(*a, &mut ew(&|k| g[k] * y[k] * (1.0 - y[k]))),
            Op::LogSigmoid(a) => {
                let va = val(*a);
                acc(*a, &mut ew(&|k| g[k] * sigmoid(-va[k])));
            }
            Op::Exp(a) => acc(*a, &mut ew(&|k| g[k] * y[k])),
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut ew(&|k| g[k] / va[k].max(f64::MIN_POSITIVE)));
            }
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                acc(
                    *a,
                    &mut ew(&|k| {
                        if va[k] > *lo && va[k] < *hi {
                            g[k]
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Pow(a, p) => {
                let va = val(*a);
                acc(*a, &mut ew(&|k| g[k] * p * va[k].powf(p - 1.0)));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, kk, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |buf| {
                    kernels::matmul_grad_lhs(g, tb.data(), buf, m, kk, n)
                });
                acc(*b, &mut |buf| {
                    kernels::matmul_grad_rhs(ta.data(), g, buf, m, kk, n)
                });
            }
            Op::Permute(a, perm) => {
                let map = kernels::permute_map(nodes[a.0].value.shape(), perm);
                acc(*a, &mut |buf| {
                    map.iter().zip(g).for_each(|(&s, gv)| buf[s] += gv)
                });
            }
            Op::BroadcastTo(a) => {
                let map = kernels::broadcast_map(nodes[a.0].value.shape(), nodes[i].value.shape());
                acc(*a, &mut |buf| {
                    map.iter().zip(g).for_each(|(&s, gv)| buf[s] += gv)
                });
            }
            Op::SumAll(a) => acc(*a, &mut ew(&|_| g[0])),
            Op::MeanAll(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut ew(&|_| g[0] / n));
            }
            Op::SumAxis(a, axis) => {
                let (_, len, inner) = kernels::split_axis(nodes[a.0].value.shape(), *axis);
                acc(
                    *a,
                    &mut ew(&|k| {
                        let o = k / (len * inner);
                        g[o * inner + k % inner]
                    }),
                );
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = kernels::split_axis(nodes[i].value.shape(), *axis);
                let mut dot = vec![0.0; outer * inner];
                for o in 0..outer {
                    for ax in 0..len {
                        for n in 0..inner {
                            let k = (o * len + ax) * inner + n;
                            dot[o * inner + n] += g[k] * y[k];
                        }
                    }
                }
                acc(
                    *a,
                    &mut ew(&|k| {
                        let o = k / (len * inner);
                        y[k] * (g[k] - dot[o * inner + k % inner])
                    }),
                );
            }
            Op::Concat(xs, axis) => {
                let out_shape = nodes[i].value.shape();
                let (outer, total, inner) = kernels::split_axis(out_shape, *axis);
                let mut offset = 0;
                for x in xs {
                    let len = nodes[x.0].value.shape()[*axis];
                    acc(*x, &mut |buf| {
                        for o in 0..outer {
                            let src = &g
                                [(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (b, s) in buf[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                            {
                                *b += s;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow(a, axis, start) => {
                let (outer, full, inner) = kernels::split_axis(nodes[a.0].value.shape(), *axis);
                let len = nodes[i].value.shape()[*axis];
                acc(*a, &mut |buf| {
                    for o in 0..outer {
                        let dst =
                            &mut buf[(o * full + start) * inner..(o * full + start + len) * inner];
                        for (b, s) in dst
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *b += s;
                        }
                    }
                });
            }
            Op::SelectRows(a, rows) => {
                let stride = nodes[i].value.len() / rows.len();
                acc(*a, &mut |buf| {
                    for (j, &r) in rows.iter().enumerate() {
                        for (b, s) in buf[r * stride..(r + 1) * stride]
                            .iter_mut()
                            .zip(&g[j * stride..(j + 1) * stride])
                        {
                            *b += s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = nodes[gamma.0].value.len();
                let rows = xhat.len() / d;
                let gm = val(*gamma);
                acc(*gamma, &mut |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*beta, &mut |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                });
                acc(*x, &mut |buf| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dx = 0.0;
                        let mut sum_dx_x = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            sum_dx += dxh;
                            sum_dx_x += dxh * xr[j];
                        }
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            buf[r * d + j] += scale * (d as f64 * dxh - sum_dx - xr[j] * sum_dx_x);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, bias, spec } => {
                let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                let out = nodes[i].value.shape();
                let dims = ConvDims {
                    c: tx.shape()[0],
                    h: tx.shape()[1],
                    w: tx.shape()[2],
                    k: tw.shape()[0],
                    s: tw.shape()[2],
                    ho: out[1],
                    wo: out[2],
                };
                acc(*x, &mut |buf| {
                    kernels::conv2d_grad_input(tw.data(), g, buf, dims, spec)
                });
                acc(*w, &mut |buf| {
                    kernels::conv2d_grad_weight(tx.data(), g, buf, dims, spec)
                });
                if let Some(b) = bias {
                    acc(*b, &mut |buf| kernels::conv2d_grad_bias(g, buf, dims));
                }
            }
            Op::Resize(a) => {
                let src = nodes[a.0].value.shape();
                let out = nodes[i].value.shape();
                let (c, h, w) = (src[0], src[1], src[2]);
                let (ho, wo) = (out[1], out[2]);
                if (h, w) == (ho, wo) {
                    acc(*a, &mut ew(&|k| g[k]));
                } else {
                    acc(*a, &mut |buf| {
                        kernels::resize_backward(g, buf, c, (h, w), (ho, wo))
                    });
                }
            }
        }
    }
}

use std::fmt;
use std::str::FromStr;

use super::conv::{self, ConvCtx, PoolCtx};
use super::{Node, Var};
use crate::linalg::{gemm, Op as Trans};
use crate::tensor::{Result, TensorError};

/// Elementwise nonlinearity used between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    /// No-op; used for linear trunks.
    Identity,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

pub(crate) enum Op {
    Leaf,
    Affine {
        x: usize,
        w: usize,
        b: Option<usize>,
        batch: usize,
        d_in: usize,
        d_out: usize,
    },
    Act {
        x: usize,
        kind: Activation,
    },
    Sigmoid {
        x: usize,
    },
    Softmax {
        x: usize,
        width: usize,
    },
    Reshape {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    AddBias {
        x: usize,
        b: usize,
    },
    RowDot {
        w: usize,
        x: usize,
        rows: usize,
        m: usize,
    },
    Sum {
        x: usize,
    },
    SoftmaxXent {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SigmoidBce {
        logits: usize,
        labels: Vec<usize>,
    },
    Conv2d(ConvCtx),
    MaxPool(PoolCtx),
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Affine { x, w, b, .. } => {
                let mut p = vec![*x, *w];
                p.extend(b);
                p
            }
            Op::Act { x, .. }
            | Op::Sigmoid { x }
            | Op::Softmax { x, .. }
            | Op::Reshape { x }
            | Op::Scale { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddBias { x, b } => vec![*x, *b],
            Op::RowDot { w, x, .. } => vec![*w, *x],
            Op::SoftmaxXent { logits, .. } | Op::SigmoidBce { logits, .. } => vec![*logits],
            Op::Conv2d(ctx) => ctx.parents(),
            Op::MaxPool(ctx) => vec![ctx.x],
        }
    }
}

/// Logistic function, split on the sign of `z` so neither branch overflows.
pub(crate) fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Softplus `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Max-subtracted softmax of one row, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<'t> Var<'t> {
    fn check_tape(&self, other: &Var<'_>) {
        assert!(self.same_tape(other), "variables recorded on different tapes");
    }

    /// `W·x + b` for `x` of shape `[d_in]` or `[batch, d_in]`, with `W` of
    /// shape `[d_out, d_in]` and optional `b` of shape `[d_out]`.
    pub fn affine(&self, w: &Var<'t>, b: Option<&Var<'t>>) -> Result<Var<'t>> {
        self.check_tape(w);
        let xv = self.value();
        let wv = w.value();
        let (batch, d_in) = match xv.shape() {
            [d] => (1, *d),
            [n, d] => (*n, *d),
            s => return Err(shape_err("affine", s, wv.shape())),
        };
        let &[d_out, w_in] = wv.shape() else {
            return Err(shape_err("affine", xv.shape(), wv.shape()));
        };
        if w_in != d_in {
            return Err(shape_err("affine", xv.shape(), wv.shape()));
        }
        let mut out = vec![0.0; batch * d_out];
        if let Some(b) = b {
            self.check_tape(b);
            let bv = b.value();
            if bv.shape() != [d_out] {
                return Err(shape_err("affine", wv.shape(), bv.shape()));
            }
            for row in out.chunks_exact_mut(d_out) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(batch, d_in, d_out, 1.0, xv.data(), Trans::N, wv.data(), Trans::T, beta, &mut out);
        let shape = if xv.rank() == 1 { vec![d_out] } else { vec![batch, d_out] };
        self.tape.record(
            "affine",
            shape,
            out,
            Op::Affine {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                batch,
                d_in,
                d_out,
            },
        )
    }

    pub fn activation(&self, kind: Activation) -> Result<Var<'t>> {
        let xv = self.value();
        let data = match kind {
            Activation::Relu => xv.data().iter().map(|&v| v.max(0.0)).collect(),
            Activation::Tanh => xv.data().iter().map(|v| v.tanh()).collect(),
            Activation::Identity => xv.to_vec(),
        };
        self.tape
            .record("activation", xv.shape().to_vec(), data, Op::Act { x: self.id, kind })
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.activation(Activation::Relu)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.activation(Activation::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        let xv = self.value();
        let data = xv.data().iter().map(|&z| sigmoid_scalar(z)).collect();
        self.tape
            .record("sigmoid", xv.shape().to_vec(), data, Op::Sigmoid { x: self.id })
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let xv = self.value();
        let width = *xv.shape().last().expect("tensors have rank >= 1");
        if width < 2 {
            return Err(TensorError::Invalid {
                op: "softmax",
                reason: "needs at least two classes".into(),
            });
        }
        let mut data = xv.to_vec();
        data.chunks_exact_mut(width).for_each(softmax_in_place);
        self.tape.record(
            "softmax",
            xv.shape().to_vec(),
            data,
            Op::Softmax { x: self.id, width },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let xv = self.value().reshape(shape)?;
        self.tape
            .record("reshape", shape.to_vec(), xv.to_vec(), Op::Reshape { x: self.id })
    }

    /// Row-major linearization to one axis.
    pub fn flatten(&self) -> Result<Var<'t>> {
        let n = self.value().len();
        self.reshape(&[n])
    }

    /// Flattens everything but the leading batch axis.
    pub fn flatten_batch(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        let batch = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(&[batch, rest])
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.check_tape(other);
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(shape_err(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.tape.record(name, a.shape().to_vec(), data, op)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let op = Op::Add { a: self.id, b: other.id };
        self.binary(other, "add", |x, y| x + y, op)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let op = Op::Sub { a: self.id, b: other.id };
        self.binary(other, "sub", |x, y| x - y, op)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let op = Op::Mul { a: self.id, b: other.id };
        self.binary(other, "mul", |x, y| x * y, op)
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        let xv = self.value();
        let data = xv.data().iter().map(|v| v * factor).collect();
        self.tape.record(
            "scale",
            xv.shape().to_vec(),
            data,
            Op::Scale { x: self.id, factor },
        )
    }

    /// Adds `b` (shape `[k]`) to every trailing row of length `k`.
    pub fn add_bias(&self, b: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(b);
        let xv = self.value();
        let bv = b.value();
        let k = *xv.shape().last().unwrap();
        if bv.shape() != [k] {
            return Err(shape_err("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.to_vec();
        for row in data.chunks_exact_mut(k) {
            for (v, bias) in row.iter_mut().zip(bv.data()) {
                *v += bias;
            }
        }
        self.tape.record(
            "add_bias",
            xv.shape().to_vec(),
            data,
            Op::AddBias { x: self.id, b: b.id },
        )
    }

    /// Per-sample matrix-vector product: `out[n, j] = Σ_i self[n, j, i] · x[n, i]`.
    ///
    /// `self` is `[batch, rows, m]` (or `[rows, m]`) and `x` is `[batch, m]`
    /// (or `[m]`). Each sum runs over `i` in ascending order.
    pub fn rowwise_dot(&self, x: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(x);
        let wv = self.value();
        let xv = x.value();
        let (batch, rows, m, out_shape) = match (wv.shape(), xv.shape()) {
            (&[n, r, m], &[n2, m2]) if n == n2 && m == m2 => (n, r, m, vec![n, r]),
            (&[r, m], &[m2]) if m == m2 => (1, r, m, vec![r]),
            (s, t) => return Err(shape_err("rowwise_dot", s, t)),
        };
        let mut out = vec![0.0; batch * rows];
        for n in 0..batch {
            let xs = &xv.data()[n * m..(n + 1) * m];
            for j in 0..rows {
                let ws = &wv.data()[(n * rows + j) * m..(n * rows + j + 1) * m];
                out[n * rows + j] = dot(ws, xs);
            }
        }
        self.tape.record(
            "rowwise_dot",
            out_shape,
            out,
            Op::RowDot {
                w: self.id,
                x: x.id,
                rows,
                m,
            },
        )
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let total = self.value().data().iter().sum();
        self.tape.record("sum", vec![1], vec![total], Op::Sum { x: self.id })
    }

    /// Mean softmax cross-entropy of `[batch, c]` (or `[c]`) logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let zv = self.value();
        let c = *zv.shape().last().unwrap();
        let batch = zv.len() / c;
        if labels.len() != batch {
            return Err(shape_err("cross_entropy", zv.shape(), &[labels.len()]));
        }
        if c < 2 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                reason: "needs at least two classes".into(),
            });
        }
        let mut probs = zv.to_vec();
        let mut loss = 0.0;
        for (row, (logits, &y)) in probs
            .chunks_exact_mut(c)
            .zip(zv.data().chunks_exact(c).zip(labels))
        {
            if y >= c {
                return Err(TensorError::Label { label: y, classes: c });
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - (logits[y] - max);
            softmax_in_place(row);
        }
        self.tape.record(
            "cross_entropy",
            vec![1],
            vec![loss / batch as f64],
            Op::SoftmaxXent {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean binary cross-entropy of logits for the positive class (label 1).
    pub fn binary_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let zv = self.value();
        if labels.len() != zv.len() {
            return Err(shape_err("binary_cross_entropy", zv.shape(), &[labels.len()]));
        }
        let mut loss = 0.0;
        for (&z, &y) in zv.data().iter().zip(labels) {
            if y > 1 {
                return Err(TensorError::Label { label: y, classes: 2 });
            }
            loss += softplus(z) - y as f64 * z;
        }
        self.tape.record(
            "binary_cross_entropy",
            vec![1],
            vec![loss / labels.len() as f64],
            Op::SigmoidBce {
                logits: self.id,
                labels: labels.to_vec(),
            },
        )
    }

    /// Cross-correlation of `[ch, h, w]` or `[batch, ch, h, w]` input with
    /// `[k, ch, kh, kw]` kernels.
    pub fn conv2d(
        &self,
        kernels: &Var<'t>,
        bias: Option<&Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        self.check_tape(kernels);
        let (ctx, shape, data) = conv::conv2d_forward(
            self.id,
            &self.value(),
            kernels.id,
            &kernels.value(),
            bias.map(|b| (b.id, b.value())),
            stride,
            padding,
        )?;
        self.tape.record("conv2d", shape, data, Op::Conv2d(ctx))
    }

    /// Windowed maximum over the two trailing axes.
    pub fn maxpool2d(&self, window: usize, stride: usize) -> Result<Var<'t>> {
        let (ctx, shape, data) = conv::maxpool_forward(self.id, &self.value(), window, stride)?;
        self.tape.record("maxpool2d", shape, data, Op::MaxPool(ctx))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn wants(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

/// Propagates `upstream` (gradient of node `id`) into its parents.
pub(crate) fn backprop(
    nodes: &[Node],
    id: usize,
    upstream: &[f64],
    grads: &mut [Option<Vec<f64>>],
) -> Result<()> {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        &Op::Affine {
            x,
            w,
            b,
            batch,
            d_in,
            d_out,
        } => {
            if wants(nodes, x) {
                let mut gx = vec![0.0; batch * d_in];
                let wv = nodes[w].value.data();
                gemm(batch, d_out, d_in, 1.0, upstream, Trans::N, wv, Trans::N, 0.0, &mut gx);
                accumulate(grads, nodes, x, gx);
            }
            if wants(nodes, w) {
                let mut gw = vec![0.0; d_out * d_in];
                let xv = nodes[x].value.data();
                gemm(d_out, batch, d_in, 1.0, upstream, Trans::T, xv, Trans::N, 0.0, &mut gw);
                accumulate(grads, nodes, w, gw);
            }
            if let Some(b) = b.filter(|&b| wants(nodes, b)) {
                let mut gb = vec![0.0; d_out];
                for row in upstream.chunks_exact(d_out) {
                    gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
                accumulate(grads, nodes, b, gb);
            }
        }
        &Op::Act { x, kind } => {
            let g = match kind {
                Activation::Relu => nodes[x]
                    .value
                    .data()
                    .iter()
                    .zip(upstream)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
                Activation::Tanh => node
                    .value
                    .data()
                    .iter()
                    .zip(upstream)
                    .map(|(&t, &g)| g * (1.0 - t * t))
                    .collect(),
                Activation::Identity => upstream.to_vec(),
            };
            accumulate(grads, nodes, x, g);
        }
        &Op::Sigmoid { x } => {
            let g = node
                .value
                .data()
                .iter()
                .zip(upstream)
                .map(|(&s, &g)| g * s * (1.0 - s))
                .collect();
            accumulate(grads, nodes, x, g);
        }
        &Op::Softmax { x, width } => {
            let mut g = vec![0.0; upstream.len()];
            for ((gr, p), u) in g
                .chunks_exact_mut(width)
                .zip(node.value.data().chunks_exact(width))
                .zip(upstream.chunks_exact(width))
            {
                let inner = dot(p, u);
                for i in 0..width {
                    gr[i] = p[i] * (u[i] - inner);
                }
            }
            accumulate(grads, nodes, x, g);
        }
        &Op::Reshape { x } => accumulate(grads, nodes, x, upstream.to_vec()),
        &Op::Add { a, b } => {
            accumulate(grads, nodes, a, upstream.to_vec());
            accumulate(grads, nodes, b, upstream.to_vec());
        }
        &Op::Sub { a, b } => {
            accumulate(grads, nodes, a, upstream.to_vec());
            accumulate(grads, nodes, b, upstream.iter().map(|g| -g).collect());
        }
        &Op::Mul { a, b } => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            if wants(nodes, a) {
                accumulate(grads, nodes, a, upstream.iter().zip(bv).map(|(g, y)| g * y).collect());
            }
            if wants(nodes, b) {
                accumulate(grads, nodes, b, upstream.iter().zip(av).map(|(g, x)| g * x).collect());
            }
        }
        &Op::Scale { x, factor } => {
            accumulate(grads, nodes, x, upstream.iter().map(|g| g * factor).collect());
        }
        &Op::AddBias { x, b } => {
            accumulate(grads, nodes, x, upstream.to_vec());
            if wants(nodes, b) {
                let k = nodes[b].value.len();
                let mut gb = vec![0.0; k];
                for row in upstream.chunks_exact(k) {
                    gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
                accumulate(grads, nodes, b, gb);
            }
        }
        &Op::RowDot { w, x, rows, m } => {
            let wv = nodes[w].value.data();
            let xv = nodes[x].value.data();
            let batch = upstream.len() / rows;
            if wants(nodes, w) {
                let mut gw = vec![0.0; wv.len()];
                for n in 0..batch {
                    let xs = &xv[n * m..(n + 1) * m];
                    for j in 0..rows {
                        let g = upstream[n * rows + j];
                        let dst = &mut gw[(n * rows + j) * m..(n * rows + j + 1) * m];
                        dst.iter_mut().zip(xs).for_each(|(d, xi)| *d = g * xi);
                    }
                }
                accumulate(grads, nodes, w, gw);
            }
            if wants(nodes, x) {
                let mut gx = vec![0.0; xv.len()];
                for n in 0..batch {
                    let dst = &mut gx[n * m..(n + 1) * m];
                    for j in 0..rows {
                        let g = upstream[n * rows + j];
                        let ws = &wv[(n * rows + j) * m..(n * rows + j + 1) * m];
                        dst.iter_mut().zip(ws).for_each(|(d, wi)| *d += g * wi);
                    }
                }
                accumulate(grads, nodes, x, gx);
            }
        }
        &Op::Sum { x } => {
            let n = nodes[x].value.len();
            accumulate(grads, nodes, x, vec![upstream[0]; n]);
        }
        Op::SoftmaxXent {
            logits,
            labels,
            probs,
        } => {
            let c = probs.len() / labels.len();
            let scale = upstream[0] / labels.len() as f64;
            let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (n, &y) in labels.iter().enumerate() {
                g[n * c + y] -= scale;
            }
            accumulate(grads, nodes, *logits, g);
        }
        Op::SigmoidBce { logits, labels } => {
            let scale = upstream[0] / labels.len() as f64;
            let g = nodes[*logits]
                .value
                .data()
                .iter()
                .zip(labels)
                .map(|(&z, &y)| (sigmoid_scalar(z) - y as f64) * scale)
                .collect();
            accumulate(grads, nodes, *logits, g);
        }
        Op::Conv2d(ctx) => {
            let wants_x = wants(nodes, ctx.x);
            let wants_k = wants(nodes, ctx.kernels);
            let (gx, gk, gb) = conv::conv2d_backward(
                ctx,
                nodes[ctx.x].value.data(),
                nodes[ctx.kernels].value.data(),
                upstream,
                wants_x,
                wants_k,
            );
            if let Some(gx) = gx {
                accumulate(grads, nodes, ctx.x, gx);
            }
            if let Some(gk) = gk {
                accumulate(grads, nodes, ctx.kernels, gk);
            }
            if let Some(b) = ctx.bias {
                accumulate(grads, nodes, b, gb);
            }
        }
        Op::MaxPool(ctx) => {
            let gx = conv::maxpool_backward(ctx, nodes[ctx.x].value.len(), upstream);
            accumulate(grads, nodes, ctx.x, gx);
        }
    }
    Ok(())
}

//! Differentiable operations. Each op has a forward (a method on [`Tensor`])
//! and a vector-Jacobian product written with the same methods, so the
//! backward pass can itself be recorded.

use super::kernels::{self, ConvGeom};
use super::{record, Array, Tensor};
use crate::error::{shape_err, Result};

/// Recorded operation kinds.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Neg,
    Relu,
    LeakyRelu(f64),
    ClampAbsMin(f64),
    Sqrt,
    Sum,
    Mean,
    /// Broadcast of a single element to the output shape.
    Expand,
    SumPerSample,
    ExpandPerSample,
    SumBatch,
    ExpandBatch,
    SumChannels,
    ExpandChannels,
    L2Norm(f64),
    Conv,
    ConvGradInput,
    ConvGradWeight(Vec<usize>),
    MatMul { ta: bool, tb: bool },
    ChannelConcat,
    ChannelSlice { start: usize, len: usize },
    ChannelPad { start: usize, total: usize },
    Subsample2,
    Upsample2,
    Reshape,
    LayerNorm(f64),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Neg => "neg",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leakyrelu",
            Op::ClampAbsMin(_) => "clamp_abs_min",
            Op::Sqrt => "sqrt",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Expand => "expand",
            Op::SumPerSample => "sum_per_sample",
            Op::ExpandPerSample => "expand_per_sample",
            Op::SumBatch => "sum_batch",
            Op::ExpandBatch => "expand_batch",
            Op::SumChannels => "sum_channels",
            Op::ExpandChannels => "expand_channels",
            Op::L2Norm(_) => "l2norm",
            Op::Conv => "conv",
            Op::ConvGradInput => "conv_grad_input",
            Op::ConvGradWeight(_) => "conv_grad_weight",
            Op::MatMul { .. } => "matmul",
            Op::ChannelConcat => "channel_concat",
            Op::ChannelSlice { .. } => "channel_slice",
            Op::ChannelPad { .. } => "channel_pad",
            Op::Subsample2 => "subsample2",
            Op::Upsample2 => "upsample2",
            Op::Reshape => "reshape",
            Op::LayerNorm(_) => "layernorm",
        }
    }

    /// Gradient contributions for each input, `None` where `needs` is false.
    pub(super) fn vjp(
        &self,
        inputs: &[Tensor],
        out: &Tensor,
        g: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let need = |i: usize| needs.get(i).copied().unwrap_or(false);
        let one = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };
        match self {
            Op::Leaf => Ok(vec![]),
            Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
            Op::Sub => Ok(vec![Some(g.clone()), need(1).then(|| g.neg()).transpose()?]),
            Op::Mul => Ok(vec![
                need(0).then(|| g.mul(&inputs[1])).transpose()?,
                need(1).then(|| g.mul(&inputs[0])).transpose()?,
            ]),
            Op::Div => Ok(vec![
                need(0).then(|| g.div(&inputs[1])).transpose()?,
                need(1)
                    .then(|| g.mul(out)?.div(&inputs[1])?.neg())
                    .transpose()?,
            ]),
            Op::Scale(c) => one(g.scale(*c)),
            Op::AddScalar(_) => Ok(vec![Some(g.clone())]),
            Op::Neg => one(g.neg()),
            Op::Relu => one(g.mul(&mask(&inputs[0], |v| if v > 0.0 { 1.0 } else { 0.0 }))),
            Op::LeakyRelu(s) => {
                let s = *s;
                one(g.mul(&mask(&inputs[0], |v| if v > 0.0 { 1.0 } else { s })))
            }
            Op::ClampAbsMin(m) => {
                let m = *m;
                one(g.mul(&mask(&inputs[0], |v| if v.abs() >= m { 1.0 } else { 0.0 })))
            }
            Op::Sqrt => one(g.scale(0.5)?.div(out)),
            Op::Sum => one(g.expand(inputs[0].shape())),
            Op::Mean => {
                let n = inputs[0].numel() as f64;
                one(g.expand(inputs[0].shape())?.scale(1.0 / n))
            }
            Op::Expand => one(g.sum()?.reshape(inputs[0].shape())),
            Op::SumPerSample => one(g.expand_per_sample(inputs[0].shape())),
            Op::ExpandPerSample => one(g.sum_per_sample()),
            Op::SumBatch => one(g.expand_batch(inputs[0].shape()[0])),
            Op::ExpandBatch => one(g.sum_batch()),
            Op::SumChannels => one(g.expand_channels(inputs[0].shape())),
            Op::ExpandChannels => one(g.sum_channels()),
            Op::L2Norm(_) => {
                let x = &inputs[0];
                one(x.mul(&g.div(out)?.expand_per_sample(x.shape())?))
            }
            Op::Conv => {
                let (x, w) = (&inputs[0], &inputs[1]);
                Ok(vec![
                    need(0).then(|| g.conv_grad_input(w)).transpose()?,
                    need(1)
                        .then(|| x.conv_grad_weight(g, &w.shape()[2..]))
                        .transpose()?,
                ])
            }
            Op::ConvGradInput => {
                let (dy, w) = (&inputs[0], &inputs[1]);
                Ok(vec![
                    need(0).then(|| g.conv(w)).transpose()?,
                    need(1)
                        .then(|| g.conv_grad_weight(dy, &w.shape()[2..]))
                        .transpose()?,
                ])
            }
            Op::ConvGradWeight(_) => {
                let (x, dy) = (&inputs[0], &inputs[1]);
                Ok(vec![
                    need(0).then(|| dy.conv_grad_input(g)).transpose()?,
                    need(1).then(|| x.conv(g)).transpose()?,
                ])
            }
            Op::MatMul { ta, tb } => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let (ta, tb) = (*ta, *tb);
                let da = need(0)
                    .then(|| {
                        if ta {
                            b.matmul(g, tb, true)
                        } else {
                            g.matmul(b, false, !tb)
                        }
                    })
                    .transpose()?;
                let db = need(1)
                    .then(|| {
                        if tb {
                            g.matmul(a, true, ta)
                        } else {
                            a.matmul(g, !ta, false)
                        }
                    })
                    .transpose()?;
                Ok(vec![da, db])
            }
            Op::ChannelConcat => {
                let mut start = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for (i, t) in inputs.iter().enumerate() {
                    let len = t.shape()[1];
                    res.push(need(i).then(|| g.channel_slice(start, len)).transpose()?);
                    start += len;
                }
                Ok(res)
            }
            Op::ChannelSlice { start, .. } => one(g.channel_pad(*start, inputs[0].shape()[1])),
            Op::ChannelPad { start, .. } => one(g.channel_slice(*start, inputs[0].shape()[1])),
            Op::Subsample2 => {
                let k = (1usize << (inputs[0].shape().len() - 2)) as f64;
                one(g.upsample2()?.scale(1.0 / k))
            }
            Op::Upsample2 => {
                let k = (1usize << (inputs[0].shape().len() - 2)) as f64;
                one(g.subsample2()?.scale(k))
            }
            Op::Reshape => one(g.reshape(inputs[0].shape())),
            Op::LayerNorm(eps) => layer_norm_vjp(inputs, g, *eps, needs),
        }
    }
}

fn mask(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::constant(Array::from_parts(x.shape().to_vec(), data))
}

/// Recomputes the normalisation from `x` with recorded primitives so the
/// result stays differentiable, then applies the usual layer-norm adjoint.
fn layer_norm_vjp(
    inputs: &[Tensor],
    g: &Tensor,
    eps: f64,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let (x, gamma) = (&inputs[0], &inputs[1]);
    let shape = x.shape();
    let batch = shape[0];
    let f = (x.numel() / batch) as f64;
    let mean_ps = |t: &Tensor| t.sum_per_sample().and_then(|s| s.scale(1.0 / f));

    let mu = mean_ps(x)?.expand_per_sample(shape)?;
    let xc = x.sub(&mu)?;
    let std = mean_ps(&xc.mul(&xc)?)?.add_scalar(eps)?.sqrt()?;
    let std_b = std.expand_per_sample(shape)?;
    let xhat = xc.div(&std_b)?;

    let dx = if needs[0] {
        let dxhat = g.mul(&gamma.expand_batch(batch)?)?;
        let m1 = mean_ps(&dxhat)?.expand_per_sample(shape)?;
        let m2 = mean_ps(&dxhat.mul(&xhat)?)?.expand_per_sample(shape)?;
        Some(dxhat.sub(&m1)?.sub(&xhat.mul(&m2)?)?.div(&std_b)?)
    } else {
        None
    };
    let dgamma = needs[1]
        .then(|| g.mul(&xhat).and_then(|t| t.sum_batch()))
        .transpose()?;
    let dbeta = needs[2].then(|| g.sum_batch()).transpose()?;
    Ok(vec![dx, dgamma, dbeta])
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_with(op: Op, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(op.name(), a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    record(op, &[a, b], Array::from_parts(a.shape().to_vec(), data))
}

fn map(op: Op, a: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    let data = a.data().iter().map(|&x| f(x)).collect();
    record(op, &[a], Array::from_parts(a.shape().to_vec(), data))
}

fn need_rank(op: &'static str, t: &Tensor, min: usize) -> Result<()> {
    if t.shape().len() < min {
        return Err(shape_err(
            op,
            format!("needs rank >= {min}, got {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Spatial axes as (h, w); one-dimensional signals map to h = 1.
fn spatial_hw(op: &'static str, spatial: &[usize]) -> Result<(usize, usize)> {
    match *spatial {
        [l] => Ok((1, l)),
        [h, w] => Ok((h, w)),
        _ => Err(shape_err(
            op,
            format!("expected 1 or 2 spatial axes, got {spatial:?}"),
        )),
    }
}

fn conv_geom(
    op: &'static str,
    x_shape: &[usize],
    cout: usize,
    kernel: &[usize],
) -> Result<ConvGeom> {
    if x_shape.len() < 3 {
        return Err(shape_err(op, format!("input {x_shape:?} lacks spatial axes")));
    }
    if kernel.len() != x_shape.len() - 2 {
        return Err(shape_err(
            op,
            format!("kernel extents {kernel:?} do not match input {x_shape:?}"),
        ));
    }
    if kernel.iter().any(|k| k % 2 == 0) {
        return Err(shape_err(op, format!("kernel extents {kernel:?} must be odd")));
    }
    let (h, w) = spatial_hw(op, &x_shape[2..])?;
    let (kh, kw) = spatial_hw(op, kernel)?;
    Ok(ConvGeom {
        batch: x_shape[0],
        cin: x_shape[1],
        cout,
        h,
        w,
        kh,
        kw,
    })
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        zip_with(Op::Add, self, other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        zip_with(Op::Sub, self, other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        zip_with(Op::Mul, self, other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        zip_with(Op::Div, self, other, |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        map(Op::Scale(c), self, |a| a * c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        map(Op::AddScalar(c), self, |a| a + c)
    }

    pub fn neg(&self) -> Result<Tensor> {
        map(Op::Neg, self, |a| -a)
    }

    pub fn relu(&self) -> Result<Tensor> {
        map(Op::Relu, self, |a| if a <= 0.0 { 0.0 } else { a })
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        map(Op::LeakyRelu(slope), self, |a| if a > 0.0 { a } else { slope * a })
    }

    /// Pushes entries with |x| < m out to ±m; zero goes to +m.
    pub fn clamp_abs_min(&self, m: f64) -> Result<Tensor> {
        map(Op::ClampAbsMin(m), self, |a| {
            if a.abs() >= m {
                a
            } else if a < 0.0 {
                -m
            } else {
                m
            }
        })
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        map(Op::Sqrt, self, f64::sqrt)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s = self.data().iter().sum();
        record(Op::Sum, &[self], Array::scalar(s))
    }

    pub fn mean(&self) -> Result<Tensor> {
        let s = self.data().iter().sum::<f64>() / self.numel() as f64;
        record(Op::Mean, &[self], Array::scalar(s))
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if self.numel() != 1 {
            return Err(shape_err("expand", format!("source {:?} is not a scalar", self.shape())));
        }
        record(Op::Expand, &[self], Array::full(shape, self.data()[0]))
    }

    /// `[B, ...] -> [B]`
    pub fn sum_per_sample(&self) -> Result<Tensor> {
        need_rank("sum_per_sample", self, 1)?;
        let b = self.shape()[0];
        let f = self.numel() / b;
        let data = self.data().chunks(f).map(|c| c.iter().sum()).collect();
        record(Op::SumPerSample, &[self], Array::from_parts(vec![b], data))
    }

    /// `[B] -> shape` where `shape[0] == B`.
    pub fn expand_per_sample(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape().len() != 1 || shape.first() != Some(&self.shape()[0]) {
            return Err(shape_err(
                "expand_per_sample",
                format!("{:?} -> {shape:?}", self.shape()),
            ));
        }
        let f: usize = shape[1..].iter().product();
        let data = self.data().iter().flat_map(|&v| std::iter::repeat_n(v, f)).collect();
        record(Op::ExpandPerSample, &[self], Array::from_parts(shape.to_vec(), data))
    }

    /// `[B, F...] -> [F...]`
    pub fn sum_batch(&self) -> Result<Tensor> {
        need_rank("sum_batch", self, 1)?;
        let b = self.shape()[0];
        let f = self.numel() / b;
        let mut data = vec![0.0; f];
        for c in self.data().chunks(f) {
            for (d, v) in data.iter_mut().zip(c) {
                *d += v;
            }
        }
        record(Op::SumBatch, &[self], Array::from_parts(self.shape()[1..].to_vec(), data))
    }

    /// `[F...] -> [batch, F...]`
    pub fn expand_batch(&self, batch: usize) -> Result<Tensor> {
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape());
        let mut data = Vec::with_capacity(batch * self.numel());
        for _ in 0..batch {
            data.extend_from_slice(self.data());
        }
        record(Op::ExpandBatch, &[self], Array::from_parts(shape, data))
    }

    /// `[B, C, S...] -> [C]`
    pub fn sum_channels(&self) -> Result<Tensor> {
        need_rank("sum_channels", self, 2)?;
        let (b, c) = (self.shape()[0], self.shape()[1]);
        let s = self.numel() / (b * c);
        let mut data = vec![0.0; c];
        for (i, chunk) in self.data().chunks(s).enumerate() {
            data[i % c] += chunk.iter().sum::<f64>();
        }
        record(Op::SumChannels, &[self], Array::from_parts(vec![c], data))
    }

    /// `[C] -> shape` where `shape[1] == C`.
    pub fn expand_channels(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape().len() != 1 || shape.len() < 2 || shape[1] != self.shape()[0] {
            return Err(shape_err(
                "expand_channels",
                format!("{:?} -> {shape:?}", self.shape()),
            ));
        }
        let s: usize = shape[2..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for _ in 0..shape[0] {
            for &v in self.data() {
                data.extend(std::iter::repeat_n(v, s));
            }
        }
        record(Op::ExpandChannels, &[self], Array::from_parts(shape.to_vec(), data))
    }

    /// Adds a per-channel bias `[C]` to `[B, C, S...]`.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        self.add(&bias.expand_channels(self.shape())?)
    }

    /// Euclidean norm over all non-batch axes: `[B, ...] -> [B]`, with `eps`
    /// under the square root.
    pub fn l2norm(&self, eps: f64) -> Result<Tensor> {
        need_rank("l2norm", self, 1)?;
        let b = self.shape()[0];
        let f = self.numel() / b;
        let data = self
            .data()
            .chunks(f)
            .map(|c| (c.iter().map(|v| v * v).sum::<f64>() + eps).sqrt())
            .collect();
        record(Op::L2Norm(eps), &[self], Array::from_parts(vec![b], data))
    }

    /// Stride-1 zero-padded "same" convolution (cross-correlation).
    /// `self: [B, I, L]` with `w: [O, I, K]`, or `[B, I, H, W]` with `[O, I, KH, KW]`.
    pub fn conv(&self, w: &Tensor) -> Result<Tensor> {
        let ws = w.shape();
        if ws.len() < 3 || ws[1] != self.shape().get(1).copied().unwrap_or(0) {
            return Err(shape_err(
                "conv",
                format!("input {:?} incompatible with kernel {ws:?}", self.shape()),
            ));
        }
        let g = conv_geom("conv", self.shape(), ws[0], &ws[2..])?;
        let y = kernels::conv_forward(self.data(), w.data(), &g);
        let mut shape = self.shape().to_vec();
        shape[1] = ws[0];
        record(Op::Conv, &[self, w], Array::from_parts(shape, y))
    }

    /// Adjoint of [`Tensor::conv`] in its input; `self` is the output gradient.
    pub fn conv_grad_input(&self, w: &Tensor) -> Result<Tensor> {
        let ws = w.shape();
        if ws.len() < 3 || ws[0] != self.shape().get(1).copied().unwrap_or(0) {
            return Err(shape_err(
                "conv_grad_input",
                format!("gradient {:?} incompatible with kernel {ws:?}", self.shape()),
            ));
        }
        let mut x_shape = self.shape().to_vec();
        x_shape[1] = ws[1];
        let g = conv_geom("conv_grad_input", &x_shape, ws[0], &ws[2..])?;
        let dx = kernels::conv_grad_input(self.data(), w.data(), &g);
        record(Op::ConvGradInput, &[self, w], Array::from_parts(x_shape, dx))
    }

    /// Adjoint of [`Tensor::conv`] in its kernel; `self` is the conv input.
    pub fn conv_grad_weight(&self, dy: &Tensor, kernel: &[usize]) -> Result<Tensor> {
        let (xs, ys) = (self.shape(), dy.shape());
        if xs.len() != ys.len() || xs.len() < 3 || xs[0] != ys[0] || xs[2..] != ys[2..] {
            return Err(shape_err(
                "conv_grad_weight",
                format!("input {xs:?} vs output gradient {ys:?}"),
            ));
        }
        let g = conv_geom("conv_grad_weight", xs, ys[1], kernel)?;
        let dw = kernels::conv_grad_weight(self.data(), dy.data(), &g);
        let mut shape = vec![ys[1], xs[1]];
        shape.extend_from_slice(kernel);
        record(
            Op::ConvGradWeight(kernel.to_vec()),
            &[self, dy],
            Array::from_parts(shape, dw),
        )
    }

    /// `op(self) @ op(other)` for matrices, `op` transposing when the flag is set.
    pub fn matmul(&self, other: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 {
            return Err(shape_err("matmul", format!("{a:?} x {b:?} not matrices")));
        }
        let ka = if ta { a[0] } else { a[1] };
        let kb = if tb { b[1] } else { b[0] };
        if ka != kb {
            return Err(shape_err(
                "matmul",
                format!("inner dims differ: {a:?}{} x {b:?}{}", if ta { "^T" } else { "" }, if tb { "^T" } else { "" }),
            ));
        }
        let (c, m, n) = kernels::matmul(self.data(), (a[0], a[1]), ta, other.data(), (b[0], b[1]), tb);
        record(Op::MatMul { ta, tb }, &[self, other], Array::from_parts(vec![m, n], c))
    }

    /// Affine map `[B, I] -> [B, O]` with `w: [O, I]` and optional bias `[O]`.
    pub fn dense(&self, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let y = self.matmul(w, false, true)?;
        match bias {
            Some(b) => y.add(&b.expand_batch(y.shape()[0])?),
            None => Ok(y),
        }
    }

    /// Concatenates `[B, Ci, S...]` tensors along the channel axis.
    pub fn channel_concat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("channel_concat", "no inputs"))?;
        need_rank("channel_concat", first, 2)?;
        let (b, s) = (first.shape()[0], &first.shape()[2..]);
        for p in parts {
            if p.shape().len() != first.shape().len() || p.shape()[0] != b || &p.shape()[2..] != s {
                return Err(shape_err(
                    "channel_concat",
                    format!("{:?} vs {:?}", first.shape(), p.shape()),
                ));
            }
        }
        let plane: usize = s.iter().product();
        let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for p in parts {
                let n = p.shape()[1] * plane;
                data.extend_from_slice(&p.data()[bi * n..][..n]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[1] = total;
        record(Op::ChannelConcat, parts, Array::from_parts(shape, data))
    }

    /// Channels `start..start+len` of `[B, C, S...]`.
    pub fn channel_slice(&self, start: usize, len: usize) -> Result<Tensor> {
        need_rank("channel_slice", self, 2)?;
        let (b, c) = (self.shape()[0], self.shape()[1]);
        if len == 0 || start + len > c {
            return Err(shape_err("channel_slice", format!("{start}+{len} of {c} channels")));
        }
        let plane: usize = self.shape()[2..].iter().product();
        let mut data = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            data.extend_from_slice(&self.data()[(bi * c + start) * plane..][..len * plane]);
        }
        let mut shape = self.shape().to_vec();
        shape[1] = len;
        record(Op::ChannelSlice { start, len }, &[self], Array::from_parts(shape, data))
    }

    /// Zero-pads channels so `self` occupies `start..` of `total` channels.
    pub fn channel_pad(&self, start: usize, total: usize) -> Result<Tensor> {
        need_rank("channel_pad", self, 2)?;
        let (b, c) = (self.shape()[0], self.shape()[1]);
        if start + c > total {
            return Err(shape_err("channel_pad", format!("{start}+{c} exceeds {total}")));
        }
        let plane: usize = self.shape()[2..].iter().product();
        let mut data = vec![0.0; b * total * plane];
        for bi in 0..b {
            data[(bi * total + start) * plane..][..c * plane]
                .copy_from_slice(&self.data()[bi * c * plane..][..c * plane]);
        }
        let mut shape = self.shape().to_vec();
        shape[1] = total;
        record(Op::ChannelPad { start, total }, &[self], Array::from_parts(shape, data))
    }

    /// 2x average pooling over every spatial axis of `[B, C, S...]`.
    pub fn subsample2(&self) -> Result<Tensor> {
        need_rank("subsample2", self, 3)?;
        let spatial = &self.shape()[2..];
        spatial_hw("subsample2", spatial)?;
        if spatial.iter().any(|s| s % 2 != 0) {
            return Err(shape_err("subsample2", format!("odd spatial extent in {:?}", self.shape())));
        }
        let planes = self.shape()[0] * self.shape()[1];
        let y = kernels::pool2(self.data(), planes, spatial);
        let mut shape = self.shape().to_vec();
        for s in &mut shape[2..] {
            *s /= 2;
        }
        record(Op::Subsample2, &[self], Array::from_parts(shape, y))
    }

    /// Nearest-neighbour 2x upsampling over every spatial axis.
    pub fn upsample2(&self) -> Result<Tensor> {
        need_rank("upsample2", self, 3)?;
        let spatial = &self.shape()[2..];
        spatial_hw("upsample2", spatial)?;
        let planes = self.shape()[0] * self.shape()[1];
        let y = kernels::upsample2(self.data(), planes, spatial);
        let mut shape = self.shape().to_vec();
        for s in &mut shape[2..] {
            *s *= 2;
        }
        record(Op::Upsample2, &[self], Array::from_parts(shape, y))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let v = self.value.reshaped(shape.to_vec())?;
        record(Op::Reshape, &[self], v)
    }

    /// Normalises each sample over all its non-batch elements, then applies
    /// `gamma * x + beta` elementwise (`gamma`, `beta` shaped like one sample).
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        need_rank("layernorm", self, 2)?;
        let feat = &self.shape()[1..];
        if gamma.shape() != feat || beta.shape() != feat {
            return Err(shape_err(
                "layernorm",
                format!(
                    "affine {:?}/{:?} must match sample shape {feat:?}",
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let y = kernels::layer_norm(self.data(), self.shape()[0], gamma.data(), beta.data(), eps);
        record(
            Op::LayerNorm(eps),
            &[self, gamma, beta],
            Array::from_parts(self.shape().to_vec(), y),
        )
    }
}

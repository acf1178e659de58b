//! Differentiable operations and their backward rules.
//!
//! The backward rule of every operation is expressed with other operations
//! from this file, closing the set under differentiation. The convolution
//! family is the interesting case: forward, input-adjoint and weight-adjoint
//! are bilinear and each one's derivatives are the other two.

use std::rc::Rc;

use super::Var;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{numel, Scalar, Tensor};

#[derive(Clone)]
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(T),
    AddScalar,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(T),
    Sqrt,
    Recip,
    MulConst(Rc<Tensor<T>>),
    Reshape,
    Conv2d { stride: usize, padding: usize },
    ConvInputGrad { stride: usize, padding: usize },
    ConvWeightGrad { stride: usize, padding: usize },
    BroadcastChannel,
    ChannelSum,
    SumAll,
    ExpandScalar,
    SumPerSample,
    ExpandPerSample,
    Concat { split: usize },
    SliceChannels { start: usize },
    EmbedChannels { start: usize },
    Resize,
    ResizeAdjoint,
    MatMul,
    Transpose,
    AvgPool2,
    AvgPool2Adjoint,
    SoftmaxCrossEntropy { residual: Rc<Tensor<T>> },
}

fn lazy<T: Scalar>(want: bool, f: impl FnOnce() -> Result<Var<T>>) -> Result<Option<Var<T>>> {
    if want {
        f().map(Some)
    } else {
        Ok(None)
    }
}

fn hw(shape: &[usize]) -> (usize, usize) {
    (shape[shape.len() - 2], shape[shape.len() - 1])
}

impl<T: Scalar> Op<T> {
    pub(crate) fn backward(
        &self,
        p: &[Var<T>],
        out: &Var<T>,
        g: &Var<T>,
        want: &[bool],
    ) -> Result<Vec<Option<Var<T>>>> {
        use Op::*;
        let one = |f: &dyn Fn() -> Result<Var<T>>| -> Result<Vec<Option<Var<T>>>> {
            Ok(vec![lazy(want[0], f)?])
        };
        match self {
            Leaf => Ok(Vec::new()),
            Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
            Sub => Ok(vec![Some(g.clone()), lazy(want[1], || Ok(g.neg()))?]),
            Mul => Ok(vec![lazy(want[0], || g.mul(&p[1]))?, lazy(want[1], || g.mul(&p[0]))?]),
            Neg => one(&|| Ok(g.neg())),
            Scale(c) => one(&|| Ok(g.scale_by(*c))),
            AddScalar => Ok(vec![Some(g.clone())]),
            Sigmoid => one(&|| g.mul(&out.sub(&out.mul(out)?)?)),
            Tanh => one(&|| g.mul(&out.mul(out)?.neg().add_scalar(1.0))),
            Relu => one(&|| {
                let mask = p[0].value().map(|v| if v > T::zero() { T::one() } else { T::zero() });
                g.mul_const(&mask)
            }),
            LeakyRelu(slope) => one(&|| {
                let mask = p[0].value().map(|v| if v > T::zero() { T::one() } else { *slope });
                g.mul_const(&mask)
            }),
            Sqrt => one(&|| g.mul(&out.recip().scale(0.5))),
            Recip => one(&|| g.mul(&out.mul(out)?.neg())),
            MulConst(c) => one(&|| g.mul_const_shared(Rc::clone(c))),
            Reshape => one(&|| g.reshape(&p[0].shape())),
            Conv2d { stride, padding } => Ok(vec![
                lazy(want[0], || g.conv2d_input_grad(&p[1], *stride, *padding, &p[0].shape()))?,
                lazy(want[1], || p[0].conv2d_weight_grad(g, *stride, *padding, &p[1].shape()))?,
            ]),
            // parents (dy, kernel), output shaped like the conv input
            ConvInputGrad { stride, padding } => Ok(vec![
                lazy(want[0], || g.conv2d(&p[1], *stride, *padding))?,
                lazy(want[1], || g.conv2d_weight_grad(&p[0], *stride, *padding, &p[1].shape()))?,
            ]),
            // parents (x, dy), output shaped like the kernel
            ConvWeightGrad { stride, padding } => Ok(vec![
                lazy(want[0], || p[1].conv2d_input_grad(g, *stride, *padding, &p[0].shape()))?,
                lazy(want[1], || p[0].conv2d(g, *stride, *padding))?,
            ]),
            BroadcastChannel => one(&|| g.channel_sum()),
            ChannelSum => one(&|| g.broadcast_channel(&p[0].shape())),
            SumAll => one(&|| g.expand_scalar(&p[0].shape())),
            ExpandScalar => one(&|| Ok(g.sum())),
            SumPerSample => one(&|| g.expand_per_sample(&p[0].shape())),
            ExpandPerSample => one(&|| g.sum_per_sample()),
            Concat { split } => {
                let total = out.shape()[1];
                Ok(vec![
                    lazy(want[0], || g.slice_channels(0, *split))?,
                    lazy(want[1], || g.slice_channels(*split, total - split))?,
                ])
            }
            SliceChannels { start } => one(&|| g.embed_channels(*start, p[0].shape()[1])),
            EmbedChannels { start } => one(&|| g.slice_channels(*start, p[0].shape()[1])),
            Resize => one(&|| g.resize_adjoint(hw(&p[0].shape()))),
            ResizeAdjoint => one(&|| {
                let (h, w) = hw(&p[0].shape());
                g.resize_bilinear(h, w)
            }),
            MatMul => Ok(vec![
                lazy(want[0], || g.matmul(&p[1].transpose()?))?,
                lazy(want[1], || p[0].transpose()?.matmul(g))?,
            ]),
            Transpose => one(&|| g.transpose()),
            AvgPool2 => one(&|| g.avg_pool2_adjoint()),
            AvgPool2Adjoint => one(&|| g.avg_pool2()),
            SoftmaxCrossEntropy { residual } => one(&|| {
                if g.tape().is_recording() {
                    return Err(Error::invalid(
                        "softmax_cross_entropy",
                        "second-order differentiation is not supported",
                    ));
                }
                g.expand_scalar(residual.shape())?.mul_const_shared(Rc::clone(residual))
            }),
        }
    }
}

impl<T: Scalar> super::Tape<T> {
    pub(crate) fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }
}

fn conv_geometry(
    op: &'static str,
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let [n, ci, h, w] = *input else {
        return Err(Error::invalid(op, format!("input must be [N,C,H,W], got {input:?}")));
    };
    let [co, kci, kh, kw] = *kernel else {
        return Err(Error::invalid(op, format!("kernel must be [Cout,Cin,kh,kw], got {kernel:?}")));
    };
    if kci != ci {
        return Err(Error::invalid(
            op,
            format!("input has {ci} channels but kernel expects {kci}"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be positive"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::invalid(
            op,
            format!("non-positive output extent for {h}x{w} input, {kh}x{kw} kernel, padding {padding}"),
        ));
    }
    Ok(ConvGeometry {
        batch: n,
        in_channels: ci,
        out_channels: co,
        in_h: h,
        in_w: w,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
        out_h: (h + 2 * padding - kh) / stride + 1,
        out_w: (w + 2 * padding - kw) / stride + 1,
    })
}

impl<T: Scalar> Var<T> {
    fn unary(&self, op: Op<T>, value: Tensor<T>) -> Var<T> {
        self.tape.push(op, &[self], value)
    }

    fn binary(&self, other: &Var<T>, op: Op<T>, value: Tensor<T>) -> Var<T> {
        self.tape.push(op, &[self, other], value)
    }

    fn elementwise(
        &self,
        other: &Var<T>,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<T>> {
        self.same_tape(other)?;
        let value = self.value().zip_map(&other.value(), name, f)?;
        Ok(self.binary(other, op, value))
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.elementwise(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.elementwise(other, "sub", Op::Sub, |a, b| a - b)
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.elementwise(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn square(&self) -> Var<T> {
        self.mul(self).expect("same shape")
    }

    pub fn neg(&self) -> Var<T> {
        self.unary(Op::Neg, self.value().map(|v| -v))
    }

    pub fn scale(&self, c: f64) -> Var<T> {
        self.scale_by(T::from_f64_lossy(c))
    }

    fn scale_by(&self, c: T) -> Var<T> {
        self.unary(Op::Scale(c), self.value().map(|v| v * c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<T> {
        let c = T::from_f64_lossy(c);
        self.unary(Op::AddScalar, self.value().map(|v| v + c))
    }

    pub fn sigmoid(&self) -> Var<T> {
        let one = T::one();
        self.unary(Op::Sigmoid, self.value().map(|v| one / (one + (-v).exp())))
    }

    pub fn tanh(&self) -> Var<T> {
        self.unary(Op::Tanh, self.value().map(|v| v.tanh()))
    }

    pub fn relu(&self) -> Var<T> {
        self.unary(Op::Relu, self.value().map(|v| v.max(T::zero())))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<T> {
        let s = T::from_f64_lossy(slope);
        self.unary(
            Op::LeakyRelu(s),
            self.value().map(|v| if v > T::zero() { v } else { v * s }),
        )
    }

    pub fn sqrt(&self) -> Var<T> {
        self.unary(Op::Sqrt, self.value().map(|v| v.sqrt()))
    }

    pub fn recip(&self) -> Var<T> {
        self.unary(Op::Recip, self.value().map(|v| v.recip()))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, c: &Tensor<T>) -> Result<Var<T>> {
        self.mul_const_shared(Rc::new(c.clone()))
    }

    pub(crate) fn mul_const_shared(&self, c: Rc<Tensor<T>>) -> Result<Var<T>> {
        let value = self.value().zip_map(&c, "mul_const", |a, b| a * b)?;
        Ok(self.unary(Op::MulConst(c), value))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let value = self.value().reshape(shape)?;
        Ok(self.unary(Op::Reshape, value))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&self) -> Result<Var<T>> {
        let shape = self.shape();
        let n = *shape
            .first()
            .ok_or_else(|| Error::invalid("flatten", "scalar has no batch axis"))?;
        self.reshape(&[n, numel(&shape[1..])])
    }

    /// 2-D convolution without bias; `kernel` is `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&self, kernel: &Var<T>, stride: usize, padding: usize) -> Result<Var<T>> {
        self.same_tape(kernel)?;
        let g = conv_geometry("conv2d", &self.shape(), &kernel.shape(), stride, padding)?;
        let data = kernels::conv2d_forward(&g, self.value().data(), kernel.value().data());
        let value = Tensor::from_parts(vec![g.batch, g.out_channels, g.out_h, g.out_w], data);
        Ok(self.binary(kernel, Op::Conv2d { stride, padding }, value))
    }

    /// Input-side adjoint of `conv2d`; `self` is the output-shaped gradient.
    pub(crate) fn conv2d_input_grad(
        &self,
        kernel: &Var<T>,
        stride: usize,
        padding: usize,
        input_shape: &[usize],
    ) -> Result<Var<T>> {
        let g = conv_geometry("conv2d_input_grad", input_shape, &kernel.shape(), stride, padding)?;
        let data = kernels::conv2d_input_grad(&g, self.value().data(), kernel.value().data());
        let value = Tensor::from_parts(input_shape.to_vec(), data);
        Ok(self.binary(kernel, Op::ConvInputGrad { stride, padding }, value))
    }

    /// Kernel-side adjoint of `conv2d`; `self` is the conv input.
    pub(crate) fn conv2d_weight_grad(
        &self,
        grad_out: &Var<T>,
        stride: usize,
        padding: usize,
        kernel_shape: &[usize],
    ) -> Result<Var<T>> {
        let g = conv_geometry("conv2d_weight_grad", &self.shape(), kernel_shape, stride, padding)?;
        let data = kernels::conv2d_weight_grad(&g, self.value().data(), grad_out.value().data());
        let value = Tensor::from_parts(kernel_shape.to_vec(), data);
        Ok(self.binary(grad_out, Op::ConvWeightGrad { stride, padding }, value))
    }

    /// Broadcast a `[C]` vector along axis 1 of `shape`.
    pub fn broadcast_channel(&self, shape: &[usize]) -> Result<Var<T>> {
        let src = self.value();
        if src.rank() != 1 || shape.len() < 2 || shape[1] != src.len() {
            return Err(Error::shape("broadcast_channel", &shape[1.min(shape.len())..], src.shape()));
        }
        let c = shape[1];
        let inner = numel(&shape[2..]);
        let mut data = Vec::with_capacity(numel(shape));
        for _ in 0..shape[0] {
            for ch in 0..c {
                data.extend(std::iter::repeat_n(src.data()[ch], inner));
            }
        }
        Ok(self.unary(Op::BroadcastChannel, Tensor::from_parts(shape.to_vec(), data)))
    }

    /// Sum over every axis except axis 1.
    pub fn channel_sum(&self) -> Result<Var<T>> {
        let src = self.value();
        let shape = src.shape();
        if shape.len() < 2 {
            return Err(Error::invalid("channel_sum", format!("rank {} < 2", shape.len())));
        }
        let c = shape[1];
        let inner = numel(&shape[2..]);
        let mut out = vec![T::zero(); c];
        for n in 0..shape[0] {
            for (ch, o) in out.iter_mut().enumerate() {
                let base = (n * c + ch) * inner;
                *o += src.data()[base..base + inner].iter().copied().sum::<T>();
            }
        }
        Ok(self.unary(Op::ChannelSum, Tensor::from_parts(vec![c], out)))
    }

    /// Adds a per-channel bias `[C]`.
    pub fn add_channel_bias(&self, bias: &Var<T>) -> Result<Var<T>> {
        self.add(&bias.broadcast_channel(&self.shape())?)
    }

    pub fn sum(&self) -> Var<T> {
        let v = self.value().sum();
        self.unary(Op::SumAll, Tensor::scalar(v))
    }

    pub fn mean(&self) -> Var<T> {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn expand_scalar(&self, shape: &[usize]) -> Result<Var<T>> {
        let src = self.value();
        if src.len() != 1 {
            return Err(Error::shape("expand_scalar", &[], src.shape()));
        }
        Ok(self.unary(Op::ExpandScalar, Tensor::full(shape, src.data()[0])))
    }

    /// `[N, ...] -> [N]`.
    pub fn sum_per_sample(&self) -> Result<Var<T>> {
        let src = self.value();
        let shape = src.shape();
        if shape.len() < 2 {
            return Err(Error::invalid("sum_per_sample", "needs at least one non-batch axis"));
        }
        let n = shape[0];
        let per = src.len() / n;
        let data = src.data().chunks(per).map(|c| c.iter().copied().sum()).collect();
        Ok(self.unary(Op::SumPerSample, Tensor::from_parts(vec![n], data)))
    }

    /// `[N] -> shape` with `shape[0] == N`.
    pub fn expand_per_sample(&self, shape: &[usize]) -> Result<Var<T>> {
        let src = self.value();
        if src.rank() != 1 || shape.first() != Some(&src.len()) {
            return Err(Error::shape("expand_per_sample", &shape[..1.min(shape.len())], src.shape()));
        }
        let per = numel(&shape[1..]);
        let data = src
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, per))
            .collect();
        Ok(self.unary(Op::ExpandPerSample, Tensor::from_parts(shape.to_vec(), data)))
    }

    /// Concatenation along the channel axis of two `[N,C,H,W]` tensors.
    pub fn concat_channels(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let (n, ca, h, w) = a.dims4("concat_channels")?;
        let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat_channels", &[n, cb, h, w], b.shape()));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::from_parts(vec![n, ca + cb, h, w], data);
        Ok(self.binary(other, Op::Concat { split: ca }, value))
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Var<T>> {
        let src = self.value();
        let (n, c, h, w) = src.dims4("slice_channels")?;
        if len == 0 || start + len > c {
            return Err(Error::invalid(
                "slice_channels",
                format!("channels {start}..{} out of range for {c}", start + len),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for i in 0..n {
            let base = (i * c + start) * plane;
            data.extend_from_slice(&src.data()[base..base + len * plane]);
        }
        let value = Tensor::from_parts(vec![n, len, h, w], data);
        Ok(self.unary(Op::SliceChannels { start }, value))
    }

    /// Places this tensor at channels `start..` of a zero tensor with
    /// `total` channels.
    pub(crate) fn embed_channels(&self, start: usize, total: usize) -> Result<Var<T>> {
        let src = self.value();
        let (n, c, h, w) = src.dims4("embed_channels")?;
        if start + c > total {
            return Err(Error::invalid("embed_channels", "channel range out of bounds"));
        }
        let plane = h * w;
        let mut data = vec![T::zero(); n * total * plane];
        for i in 0..n {
            let dst = (i * total + start) * plane;
            data[dst..dst + c * plane].copy_from_slice(&src.data()[i * c * plane..(i + 1) * c * plane]);
        }
        let value = Tensor::from_parts(vec![n, total, h, w], data);
        Ok(self.unary(Op::EmbedChannels { start }, value))
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Var<T>> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize_bilinear", "output extents must be >= 1"));
        }
        let src = self.value();
        let (n, c, h, w) = src.dims4("resize_bilinear")?;
        let data = kernels::resize_bilinear_forward(src.data(), n * c, (h, w), (out_h, out_w));
        let value = Tensor::from_parts(vec![n, c, out_h, out_w], data);
        Ok(self.unary(Op::Resize, value))
    }

    pub(crate) fn resize_adjoint(&self, (in_h, in_w): (usize, usize)) -> Result<Var<T>> {
        let src = self.value();
        let (n, c, h, w) = src.dims4("resize_adjoint")?;
        let data = kernels::resize_bilinear_adjoint(src.data(), n * c, (in_h, in_w), (h, w));
        let value = Tensor::from_parts(vec![n, c, in_h, in_w], data);
        Ok(self.unary(Op::ResizeAdjoint, value))
    }

    /// `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let (&[n, k], &[kb, m]) = (a.shape(), b.shape()) else {
            return Err(Error::invalid("matmul", "operands must be rank 2"));
        };
        if k != kb {
            return Err(Error::shape("matmul", &[k, m], b.shape()));
        }
        let value = Tensor::from_parts(vec![n, m], kernels::matmul(a.data(), b.data(), n, k, m));
        Ok(self.binary(other, Op::MatMul, value))
    }

    pub fn transpose(&self) -> Result<Var<T>> {
        let src = self.value();
        let &[r, c] = src.shape() else {
            return Err(Error::invalid("transpose", "operand must be rank 2"));
        };
        let value = Tensor::from_parts(vec![c, r], kernels::transpose2(src.data(), r, c));
        Ok(self.unary(Op::Transpose, value))
    }

    /// 2x2 average pooling, stride 2.
    pub fn avg_pool2(&self) -> Result<Var<T>> {
        let src = self.value();
        let (n, c, h, w) = src.dims4("avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("avg_pool2", format!("spatial extents {h}x{w} must be even")));
        }
        let data = kernels::avg_pool2(src.data(), n * c, h, w);
        Ok(self.unary(Op::AvgPool2, Tensor::from_parts(vec![n, c, h / 2, w / 2], data)))
    }

    pub(crate) fn avg_pool2_adjoint(&self) -> Result<Var<T>> {
        let src = self.value();
        let (n, c, h, w) = src.dims4("avg_pool2_adjoint")?;
        let data = kernels::avg_pool2_adjoint(src.data(), n * c, 2 * h, 2 * w);
        Ok(self.unary(Op::AvgPool2Adjoint, Tensor::from_parts(vec![n, c, 2 * h, 2 * w], data)))
    }

    /// Affine map `[N,D] -> [N,M]` with `weight: [M,D]` and `bias: [M]`.
    /// No output activation.
    pub fn fully_connected(&self, weight: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        let (x, w) = (self.shape(), weight.shape());
        if x.len() != 2 || w.len() != 2 || x[1] != w[1] {
            return Err(Error::invalid(
                "fully_connected",
                format!("input {x:?} does not match weight {w:?}"),
            ));
        }
        self.matmul(&weight.transpose()?)?.add_channel_bias(bias)
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against class labels.
    /// First-order only.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<T>> {
        let logits = self.value();
        let &[n, k] = logits.shape() else {
            return Err(Error::invalid("softmax_cross_entropy", "logits must be [N,K]"));
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::invalid("softmax_cross_entropy", "labels do not match logits"));
        }
        let inv_n = T::one() / T::from_usize(n).unwrap();
        let mut residual = Vec::with_capacity(n * k);
        let mut loss = T::zero();
        for (row, &label) in logits.data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            loss += (z.ln() + max - row[label]) * inv_n;
            for (j, e) in exps.iter().enumerate() {
                let target = if j == label { T::one() } else { T::zero() };
                residual.push((*e / z - target) * inv_n);
            }
        }
        let residual = Rc::new(Tensor::from_parts(vec![n, k], residual));
        Ok(self.unary(Op::SoftmaxCrossEntropy { residual }, Tensor::scalar(loss)))
    }

    /// Per-sample Euclidean norm over all non-batch axes, `[N, ...] -> [N]`.
    /// Computed as `s / sqrt(s + 1e-24)` with `s` the squared norm, so the
    /// derivative stays finite at zero and a zero input gives exactly 0.
    pub fn l2_norm_per_sample(&self) -> Result<Var<T>> {
        let sq = self.square().sum_per_sample()?;
        sq.mul(&sq.add_scalar(1e-24).sqrt().recip())
    }
}

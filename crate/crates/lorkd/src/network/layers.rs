//! Layer primitives shared by the student, teacher, and fused builders:
//! dense layers, plain convolutions, and the activation / resampling pieces.

use crate::error::{Error, Result};
use crate::rng::{randn_tensor, rng_from};
use crate::tensor::{conv2d, conv2d_backward, ConvGeometry, Scalar, Tensor};

/// Fully connected layer, weight stored [out, in].
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init(in_dim: usize, out_dim: usize, std: f64, seed: u64) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("linear", format!("degenerate dims {in_dim}x{out_dim}")));
        }
        Ok(Linear {
            weight: randn_tensor(&[out_dim, in_dim], 0.0, std, &mut rng_from(seed))?,
            bias: Tensor::zeros(&[out_dim])?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Batched forward: [B, in] -> [B, out].
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_dim() {
            return Err(Error::shape(
                "linear",
                format!("input {:?} does not feed a {}x{} layer", x.shape(), self.out_dim(), self.in_dim()),
            ));
        }
        let mut y = x.matmul(&self.weight.transpose2d()?)?;
        let (b, o) = (y.shape()[0], y.shape()[1]);
        for bi in 0..b {
            for oi in 0..o {
                let v = y.at(&[bi, oi]) + self.bias.data()[oi];
                y.set(&[bi, oi], v);
            }
        }
        Ok(y)
    }

    /// Single-vector forward: [in] -> [out].
    pub fn forward_vec(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != [self.in_dim()] {
            return Err(Error::shape(
                "linear",
                format!("input {:?} does not feed a {}x{} layer", x.shape(), self.out_dim(), self.in_dim()),
            ));
        }
        let mut y = self.bias.clone();
        for o in 0..self.out_dim() {
            let mut acc = y.data()[o];
            for i in 0..self.in_dim() {
                acc = acc + self.weight.at(&[o, i]) * x.data()[i];
            }
            y.data_mut()[o] = acc;
        }
        Ok(y)
    }

    /// Returns (grad_input, grad_weight, grad_bias) for a batched pass.
    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        if grad_out.shape() != [x.shape()[0], self.out_dim()] {
            return Err(Error::shape(
                "linear_backward",
                format!("grad {:?} for input {:?}", grad_out.shape(), x.shape()),
            ));
        }
        let grad_x = grad_out.matmul(&self.weight)?;
        let grad_w = grad_out.transpose2d()?.matmul(x)?;
        let mut grad_b = Tensor::zeros(&[self.out_dim()])?;
        for bi in 0..grad_out.shape()[0] {
            for oi in 0..self.out_dim() {
                grad_b.data_mut()[oi] = grad_b.data()[oi] + grad_out.at(&[bi, oi]);
            }
        }
        Ok((grad_x, grad_w, grad_b))
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear { weight: self.weight.cast(), bias: self.bias.cast() }
    }
}

/// Convolution without experts, used by teachers and fused nets.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainConvLayer<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub geometry: ConvGeometry,
}

impl<T: Scalar> PlainConvLayer<T> {
    pub fn init(geometry: &ConvGeometry, seed: u64) -> Result<Self> {
        geometry.validate()?;
        let g = *geometry;
        let fan_in = (g.in_channels * g.kernel_size * g.kernel_size) as f64;
        let weight = randn_tensor(
            &[g.out_channels, g.in_channels, g.kernel_size, g.kernel_size],
            0.0,
            (2.0 / fan_in).sqrt(),
            &mut rng_from(seed),
        )?;
        Ok(PlainConvLayer { weight, bias: Tensor::zeros(&[g.out_channels])?, geometry: g })
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>, geometry: ConvGeometry) -> Result<Self> {
        geometry.validate()?;
        let g = geometry;
        let expect = [g.out_channels, g.in_channels, g.kernel_size, g.kernel_size];
        if weight.shape() != expect {
            return Err(Error::shape("plain_conv", format!("weight {:?}, geometry wants {expect:?}", weight.shape())));
        }
        if bias.shape() != [g.out_channels] {
            return Err(Error::shape("plain_conv", format!("bias {:?} for {} channels", bias.shape(), g.out_channels)));
        }
        Ok(PlainConvLayer { weight, bias, geometry })
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = conv2d(input, &self.weight, &self.geometry)?;
        add_channel_bias(&mut out, &self.bias);
        Ok(out)
    }

    /// Returns (grad_input, grad_weight, grad_bias).
    pub fn backward(&self, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (grad_in, grad_w) = conv2d_backward(grad_out, input, &self.weight, &self.geometry)?;
        Ok((grad_in, grad_w, channel_bias_grad(grad_out)))
    }

    pub fn cast<U: Scalar>(&self) -> PlainConvLayer<U> {
        PlainConvLayer { weight: self.weight.cast(), bias: self.bias.cast(), geometry: self.geometry }
    }
}

pub(crate) fn add_channel_bias<T: Scalar>(out: &mut Tensor<T>, bias: &Tensor<T>) {
    let (b, c) = (out.shape()[0], out.shape()[1]);
    let hw = out.len() / (b * c);
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let add = bias.data()[ci];
            for v in &mut out.data_mut()[base..base + hw] {
                *v = *v + add;
            }
        }
    }
}

pub(crate) fn channel_bias_grad<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (grad_out.shape()[0], grad_out.shape()[1]);
    let hw = grad_out.len() / (b * c);
    let mut g = Tensor::zeros(&[c]).expect("channel axis is non-empty");
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let sum = grad_out.data()[base..base + hw]
                .iter()
                .fold(T::zero(), |acc, v| acc + *v);
            g.data_mut()[ci] = g.data()[ci] + sum;
        }
    }
    g
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward through relu using the cached output (y > 0 iff x > 0).
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, grad_y: &Tensor<T>) -> Tensor<T> {
    y.zip_map(grad_y, "relu_backward", |yv, g| if yv > T::zero() { g } else { T::zero() })
        .expect("relu cache and gradient share a shape")
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Backward through sigmoid using the cached output: grad * y * (1 - y).
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, grad_y: &Tensor<T>) -> Tensor<T> {
    y.zip_map(grad_y, "sigmoid_backward", |yv, g| g * yv * (T::one() - yv))
        .expect("sigmoid cache and gradient share a shape")
}

/// [B, C, H, W] -> [B, C] by spatial mean.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 4 {
        return Err(Error::shape("global_avg_pool", format!("want [B,C,H,W], got {:?}", x.shape())));
    }
    x.reduce(crate::tensor::ReduceOp::Mean, &[2, 3])
}

pub fn global_avg_pool_backward<T: Scalar>(grad: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (b, c) = (grad.shape()[0], grad.shape()[1]);
    let scale = T::fr(1.0 / (h * w) as f64);
    let mut out = Tensor::zeros(&[b, c, h, w])?;
    for bi in 0..b {
        for ci in 0..c {
            let g = grad.at(&[bi, ci]) * scale;
            let base = (bi * c + ci) * h * w;
            for v in &mut out.data_mut()[base..base + h * w] {
                *v = g;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor doubling: each pixel fills its 2x2 block.
pub fn upsample_nearest2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 4 {
        return Err(Error::shape("upsample", format!("want [B,C,H,W], got {:?}", x.shape())));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Tensor::zeros(&[b, c, 2 * h, 2 * w])?;
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x.at(&[bi, ci, y, xx]);
                    out.set(&[bi, ci, 2 * y, 2 * xx], v);
                    out.set(&[bi, ci, 2 * y, 2 * xx + 1], v);
                    out.set(&[bi, ci, 2 * y + 1, 2 * xx], v);
                    out.set(&[bi, ci, 2 * y + 1, 2 * xx + 1], v);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of nearest-neighbor doubling: each 2x2 block sums back.
pub fn upsample_nearest2_backward<T: Scalar>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    let s = grad.shape();
    if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
        return Err(Error::shape("upsample_backward", format!("want even [B,C,H,W], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2] / 2, s[3] / 2);
    let mut out = Tensor::zeros(&[b, c, h, w])?;
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let sum = grad.at(&[bi, ci, 2 * y, 2 * xx])
                        + grad.at(&[bi, ci, 2 * y, 2 * xx + 1])
                        + grad.at(&[bi, ci, 2 * y + 1, 2 * xx])
                        + grad.at(&[bi, ci, 2 * y + 1, 2 * xx + 1]);
                    out.set(&[bi, ci, y, xx], sum);
                }
            }
        }
    }
    Ok(out)
}

/// Copy row b of a [B, D] tensor as a rank-1 [D] tensor.
pub fn row<T: Scalar>(x: &Tensor<T>, b: usize) -> Result<Tensor<T>> {
    if x.shape().len() != 2 || b >= x.shape()[0] {
        return Err(Error::shape("row", format!("row {b} of {:?}", x.shape())));
    }
    let d = x.shape()[1];
    Tensor::new(&[d], x.data()[b * d..(b + 1) * d].to_vec())
}

//! 2D convolution, forward and backward, with grouping, stride and zero
//! padding. These are the only compute-heavy kernels in the engine; the
//! forward may fan out over the batch when LORKD_THREADS allows it.

use super::{counters, thread_count, Scalar, Tensor};
use crate::error::{Error, Result};

/// Static description of one conv layer's arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    /// Ungrouped geometry with the conventions the networks use.
    pub fn simple(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry { in_channels, out_channels, kernel_size, stride, padding, groups: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(Error::invalid(
                "conv_geometry",
                format!("counts must be positive: {self:?}"),
            ));
        }
        if !self.in_channels.is_multiple_of(self.groups) {
            return Err(Error::invalid(
                "conv_geometry",
                format!("in_channels {} not divisible by groups {}", self.in_channels, self.groups),
            ));
        }
        if !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::invalid(
                "conv_geometry",
                format!("out_channels {} not divisible by groups {}", self.out_channels, self.groups),
            ));
        }
        Ok(())
    }

    /// Spatial output size for an input of `h` x `w`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel_size;
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return Err(Error::shape(
                "conv2d",
                format!("padded input {hp}x{wp} is smaller than kernel {k}x{k}"),
            ));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    /// Element count of a dense weight tensor for this geometry.
    pub fn dense_param_count(&self) -> usize {
        self.out_channels * (self.in_channels / self.groups) * self.kernel_size * self.kernel_size
    }
}

fn check_shapes<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<(usize, usize, usize, usize, usize)> {
    geom.validate()?;
    let ishape = input.shape();
    if ishape.len() != 4 {
        return Err(Error::shape("conv2d", format!("input must be rank 4 [B,C,H,W], got {ishape:?}")));
    }
    let (b, c_in, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    if c_in != geom.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c_in} channels, geometry expects {}", geom.in_channels),
        ));
    }
    let k = geom.kernel_size;
    let cg_in = geom.in_channels / geom.groups;
    let expect = [geom.out_channels, cg_in, k, k];
    if weight.shape() != expect {
        return Err(Error::shape(
            "conv2d",
            format!("weight shape {:?} does not match expected {:?}", weight.shape(), expect),
        ));
    }
    let (oh, ow) = geom.output_hw(h, w)?;
    Ok((b, h, w, oh, ow))
}

fn conv_flops(b: usize, geom: &ConvGeometry, oh: usize, ow: usize) -> u64 {
    let cg_in = geom.in_channels / geom.groups;
    2 * (b * geom.out_channels * cg_in * geom.kernel_size * geom.kernel_size * oh * ow) as u64
}

/// Sliding-window convolution of a [B,C_in,H,W] input with a
/// [C_out,C_in/groups,k,k] weight. One kernel launch per call.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    let (b, h, w, oh, ow) = check_shapes(input, weight, geom)?;
    counters::record_conv(conv_flops(b, geom, oh, ow));

    let mut out = Tensor::zeros(&[b, geom.out_channels, oh, ow])?;
    let in_sample = geom.in_channels * h * w;
    let out_sample = geom.out_channels * oh * ow;
    let inp = input.data();
    let wt = weight.data();

    let threads = thread_count().min(b);
    if threads <= 1 {
        for (bi, dst) in out.data_mut().chunks_mut(out_sample).enumerate() {
            conv_sample(&inp[bi * in_sample..(bi + 1) * in_sample], wt, dst, geom, h, w, oh, ow);
        }
    } else {
        // Samples are independent and each is computed by exactly one thread
        // with the same sequential inner order, so the result is bit-identical
        // at any thread count.
        let per = b.div_ceil(threads);
        std::thread::scope(|scope| {
            for (ti, chunk) in out.data_mut().chunks_mut(per * out_sample).enumerate() {
                let start = ti * per;
                scope.spawn(move || {
                    for (j, dst) in chunk.chunks_mut(out_sample).enumerate() {
                        let bi = start + j;
                        conv_sample(&inp[bi * in_sample..(bi + 1) * in_sample], wt, dst, geom, h, w, oh, ow);
                    }
                });
            }
        });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)] // inner kernel, all scalars are hot-loop bounds
fn conv_sample<T: Scalar>(
    inp: &[T],
    wt: &[T],
    dst: &mut [T],
    geom: &ConvGeometry,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) {
    let k = geom.kernel_size;
    let cg_in = geom.in_channels / geom.groups;
    let cg_out = geom.out_channels / geom.groups;
    let pad = geom.padding as isize;
    for grp in 0..geom.groups {
        for ocg in 0..cg_out {
            let oc = grp * cg_out + ocg;
            let wbase = oc * cg_in * k * k;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for icg in 0..cg_in {
                        let ic = grp * cg_in + icg;
                        let ibase = ic * h * w;
                        let wbase_c = wbase + icg * k * k;
                        for ky in 0..k {
                            let iy = (oy * geom.stride + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = ibase + iy as usize * w;
                            let wrow = wbase_c + ky * k;
                            for kx in 0..k {
                                let ix = (ox * geom.stride + kx) as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc = acc + inp[irow + ix as usize] * wt[wrow + kx];
                            }
                        }
                    }
                    dst[oc * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
    }
}

/// Gradients of a scalar loss through [`conv2d`] with respect to the input
/// and the weight, given the gradient at the output.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, h, w, oh, ow) = check_shapes(input, weight, geom)?;
    let expect = [b, geom.out_channels, oh, ow];
    if grad_out.shape() != expect {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out shape {:?} does not match forward output {:?}", grad_out.shape(), expect),
        ));
    }
    counters::record_conv_backward(2 * conv_flops(b, geom, oh, ow));

    let k = geom.kernel_size;
    let cg_in = geom.in_channels / geom.groups;
    let cg_out = geom.out_channels / geom.groups;
    let pad = geom.padding as isize;
    let mut grad_in = Tensor::zeros(input.shape())?;
    let mut grad_wt = Tensor::zeros(weight.shape())?;
    let (gi, gw) = (grad_in.data_mut(), grad_wt.data_mut());
    let (inp, wt, go) = (input.data(), weight.data(), grad_out.data());

    let in_sample = geom.in_channels * h * w;
    let out_sample = geom.out_channels * oh * ow;
    for bi in 0..b {
        let ibase_s = bi * in_sample;
        let obase_s = bi * out_sample;
        for grp in 0..geom.groups {
            for ocg in 0..cg_out {
                let oc = grp * cg_out + ocg;
                let wbase = oc * cg_in * k * k;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = go[obase_s + oc * oh * ow + oy * ow + ox];
                        if g == T::zero() {
                            continue;
                        }
                        for icg in 0..cg_in {
                            let ic = grp * cg_in + icg;
                            let ibase = ibase_s + ic * h * w;
                            let wbase_c = wbase + icg * k * k;
                            for ky in 0..k {
                                let iy = (oy * geom.stride + ky) as isize - pad;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let irow = ibase + iy as usize * w;
                                let wrow = wbase_c + ky * k;
                                for kx in 0..k {
                                    let ix = (ox * geom.stride + kx) as isize - pad;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    gi[irow + ix as usize] = gi[irow + ix as usize] + g * wt[wrow + kx];
                                    gw[wrow + kx] = gw[wrow + kx] + g * inp[irow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_wt))
}

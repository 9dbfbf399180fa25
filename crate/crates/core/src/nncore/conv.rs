//! Convolution and transposed convolution via im2col + GEMM.
//!
//! Weights of a convolution are `out x in x k x k`. A transposed convolution
//! with the same weight tensor maps `out` channels back to `in` channels and
//! is exactly the adjoint of the forward convolution.

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Op};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::exec;

/// Square-kernel geometry shared by both spatial axes.
///
/// Padding may be asymmetric: `pad_begin` zeros before the first row/column
/// and `pad_end` after the last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_begin: usize,
    pub pad_end: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, dilation: usize, pad: usize) -> Self {
        ConvGeometry {
            kernel,
            stride,
            dilation,
            pad_begin: pad,
            pad_end: pad,
        }
    }

    /// Stride-1 geometry that preserves spatial size. For even effective
    /// spans the extra padding row/column goes on the trailing edge.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        let total = dilation * (kernel - 1);
        ConvGeometry {
            kernel,
            stride: 1,
            dilation,
            pad_begin: total / 2,
            pad_end: total - total / 2,
        }
    }

    /// Geometry that halves (conv) or doubles (transposed) an even size.
    pub fn resample(kernel: usize) -> Self {
        debug_assert!(kernel >= 2 && kernel.is_multiple_of(2));
        Self::new(kernel, 2, 1, (kernel - 2) / 2)
    }

    /// Receptive extent of one output along an axis.
    pub fn span(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::Config(format!(
                "kernel, stride and dilation must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// `floor((n + pads - span) / stride) + 1`, or `None` when that is below 1.
    pub fn output_len(&self, n: usize) -> Option<usize> {
        let padded = n + self.pad_begin + self.pad_end;
        if padded < self.span() {
            return None;
        }
        Some((padded - self.span()) / self.stride + 1)
    }

    /// `(n - 1) * stride + span - pads`, or `None` when that is below 1.
    pub fn transposed_output_len(&self, n: usize) -> Option<usize> {
        let full = (n - 1) * self.stride + self.span();
        let pads = self.pad_begin + self.pad_end;
        (full > pads).then(|| full - pads)
    }
}

fn check_weight<T: Scalar>(
    op: &'static str,
    w: &Tensor<T>,
    in_channels: usize,
    g: &ConvGeometry,
) -> Result<()> {
    g.validate()?;
    let [_, wi, kh, kw] = w.shape();
    if wi != in_channels || kh != g.kernel || kw != g.kernel {
        return Err(Error::shape(
            op,
            &w.shape(),
            &[w.shape()[0], in_channels, g.kernel, g.kernel],
        ));
    }
    Ok(())
}

fn out_hw(op: &'static str, x: [usize; 4], g: &ConvGeometry) -> Result<(usize, usize)> {
    match (g.output_len(x[2]), g.output_len(x[3])) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(Error::Config(format!(
            "{op}: input {x:?} too small for geometry {g:?}"
        ))),
    }
}

fn is_pointwise(g: &ConvGeometry) -> bool {
    g.kernel == 1 && g.stride == 1 && g.pad_begin == 0 && g.pad_end == 0
}

/// Unfolds one `c x h x w` item into a `(c*k*k) x (oh*ow)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let k = g.kernel;
    let plane = oh * ow;
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad_begin as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad_begin as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back into an item, summing overlapping taps.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let k = g.kernel;
    let plane = oh * ow;
    x.iter_mut().for_each(|v| *v = T::zero());
    for ch in 0..c {
        let dst = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad_begin as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad_begin as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] = drow[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut Tensor<T>, bias: Option<&[T]>) -> Result<()> {
    let Some(bias) = bias else { return Ok(()) };
    let c = out.channels();
    if bias.len() != c {
        return Err(Error::shape("bias", &[bias.len()], &[c]));
    }
    let plane = out.plane_len();
    exec::for_each_chunk_mut(out.data_mut(), plane, |i, p| {
        let b = bias[i % c];
        p.iter_mut().for_each(|v| *v = *v + b);
    });
    Ok(())
}

/// Forward convolution. `weight` is `out x in x k x k`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = input.shape();
    check_weight("conv2d", weight, c, g)?;
    let (oh, ow) = out_hw("conv2d", input.shape(), g)?;
    let co = weight.shape()[0];
    let ckk = c * g.kernel * g.kernel;
    let mut out = Tensor::zeros([b, co, oh, ow]);
    let wdata = weight.data();
    exec::for_each_chunk_mut(out.data_mut(), co * oh * ow, |n, out_item| {
        let x = input.item(n);
        if is_pointwise(g) {
            gemm(co, ckk, oh * ow, wdata, Op::N, x, Op::N, out_item, false);
        } else {
            let mut cols = vec![T::zero(); ckk * oh * ow];
            im2col(x, c, h, w, g, oh, ow, &mut cols);
            gemm(co, ckk, oh * ow, wdata, Op::N, &cols, Op::N, out_item, false);
        }
    });
    add_bias(&mut out, bias)?;
    Ok(out)
}

/// Gradient of [`conv2d`] with respect to its input, for an input of
/// spatial size `in_hw`. This is also the transposed convolution.
pub fn conv2d_backward_input<T: Scalar>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeometry,
    in_hw: (usize, usize),
) -> Result<Tensor<T>> {
    g.validate()?;
    let [b, co, oh, ow] = grad_out.shape();
    let [wo, c, kh, kw] = weight.shape();
    if wo != co || kh != g.kernel || kw != g.kernel {
        return Err(Error::shape(
            "conv2d_transpose",
            &weight.shape(),
            &[co, c, g.kernel, g.kernel],
        ));
    }
    let (h, w) = in_hw;
    if h == 0 || w == 0 || g.output_len(h) != Some(oh) || g.output_len(w) != Some(ow) {
        return Err(Error::Config(format!(
            "conv2d_transpose: target size {h}x{w} does not map onto {oh}x{ow} under {g:?}"
        )));
    }
    let ckk = c * g.kernel * g.kernel;
    let mut dx = Tensor::zeros([b, c, h, w]);
    let wdata = weight.data();
    exec::for_each_chunk_mut(dx.data_mut(), c * h * w, |n, dx_item| {
        let dy = grad_out.item(n);
        if is_pointwise(g) {
            gemm(ckk, co, oh * ow, wdata, Op::T, dy, Op::N, dx_item, false);
        } else {
            let mut cols = vec![T::zero(); ckk * oh * ow];
            gemm(ckk, co, oh * ow, wdata, Op::T, dy, Op::N, &mut cols, false);
            col2im(&cols, c, h, w, g, oh, ow, dx_item);
        }
    });
    Ok(dx)
}

/// Accumulates the gradient of [`conv2d`] with respect to its weight into
/// `grad_weight` (`out x in x k x k`, flattened).
pub fn conv2d_backward_weight<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeometry,
    grad_weight: &mut [T],
) -> Result<()> {
    let [b, c, h, w] = input.shape();
    let [gb, co, oh, ow] = grad_out.shape();
    if gb != b || out_hw("conv2d_backward_weight", input.shape(), g)? != (oh, ow) {
        return Err(Error::shape(
            "conv2d_backward_weight",
            &input.shape(),
            &grad_out.shape(),
        ));
    }
    let ckk = c * g.kernel * g.kernel;
    if grad_weight.len() != co * ckk {
        return Err(Error::shape(
            "conv2d_backward_weight",
            &[grad_weight.len()],
            &[co * ckk],
        ));
    }
    let cols: Vec<Vec<T>> = if is_pointwise(g) {
        Vec::new()
    } else {
        exec::map(b, |n| {
            let mut cols = vec![T::zero(); ckk * oh * ow];
            im2col(input.item(n), c, h, w, g, oh, ow, &mut cols);
            cols
        })
    };
    // Samples are accumulated in index order so the sum is schedule-independent.
    for n in 0..b {
        let x = if is_pointwise(g) { input.item(n) } else { &cols[n] };
        gemm(co, oh * ow, ckk, grad_out.item(n), Op::N, x, Op::T, grad_weight, true);
    }
    Ok(())
}

/// Accumulates per-channel sums of `grad_out` into `grad_bias`.
pub fn bias_backward<T: Scalar>(grad_out: &Tensor<T>, grad_bias: &mut [T]) {
    let [b, c, _, _] = grad_out.shape();
    let plane = grad_out.plane_len();
    let sums = exec::map(c, |ch| {
        let mut s = T::zero();
        for n in 0..b {
            let off = (n * c + ch) * plane;
            s = s + grad_out.data()[off..off + plane].iter().copied().sum::<T>();
        }
        s
    });
    for (gb, s) in grad_bias.iter_mut().zip(sums) {
        *gb = *gb + s;
    }
}

/// Transposed convolution. `weight` is `in x out x k x k`, i.e. the weight of
/// the convolution this operator is the adjoint of.
pub fn conv2d_transpose<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let [_, _, h, w] = input.shape();
    let size = |n| {
        g.transposed_output_len(n).ok_or_else(|| {
            Error::Config(format!(
                "conv2d_transpose: input {:?} too small for {g:?}",
                input.shape()
            ))
        })
    };
    let out = (size(h)?, size(w)?);
    conv2d_transpose_to(input, weight, bias, g, out)
}

/// Transposed convolution with an explicit output size (needed when the
/// forward convolution's floor division dropped trailing pixels).
pub fn conv2d_transpose_to<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    g: &ConvGeometry,
    out_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let mut out = conv2d_backward_input(input, weight, g, out_hw)?;
    add_bias(&mut out, bias)?;
    Ok(out)
}

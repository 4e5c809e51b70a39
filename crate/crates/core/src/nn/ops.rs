//! Differentiable NHWC building blocks on top of candle.
//!
//! Convolutions go through an explicit im2col / col2im pair so both the
//! forward and backward passes reduce to dense matrix products.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType, D};

use crate::error::Result;

/// Same-padded, stride-1 patch extraction for a square `kernel`.
struct Im2Col {
    kernel: usize,
}

struct Col2Im {
    kernel: usize,
    height: usize,
    width: usize,
    channels: usize,
}

/// For output pixel `(y, x)` and kernel row `ky`: the source row and the
/// valid kernel-column range `[kx_lo, kx_hi)` together with the first source
/// column. Rows falling in the padding yield `None`.
fn tap_span(kernel: usize, y: usize, x: usize, ky: usize, h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
    let pad = (kernel / 2) as isize;
    let sy = y as isize + ky as isize - pad;
    if sy < 0 || sy >= h as isize {
        return None;
    }
    let x0 = x as isize - pad;
    let kx_lo = (-x0).max(0) as usize;
    let kx_hi = ((w as isize - x0).min(kernel as isize)).max(0) as usize;
    (kx_lo < kx_hi).then_some((sy as usize, kx_lo, kx_hi, (x0 + kx_lo as isize) as usize))
}

fn im2col<T: WithDType>(src: &[T], b: usize, h: usize, w: usize, c: usize, kernel: usize) -> Vec<T> {
    let cols = kernel * kernel * c;
    let mut out = vec![T::zero(); b * h * w * cols];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let row = ((bi * h + y) * w + x) * cols;
                for ky in 0..kernel {
                    let Some((sy, lo, hi, sx)) = tap_span(kernel, y, x, ky, h, w) else { continue };
                    let len = (hi - lo) * c;
                    let s = ((bi * h + sy) * w + sx) * c;
                    let d = row + (ky * kernel + lo) * c;
                    out[d..d + len].copy_from_slice(&src[s..s + len]);
                }
            }
        }
    }
    out
}

fn col2im<T: WithDType>(src: &[T], b: usize, h: usize, w: usize, c: usize, kernel: usize) -> Vec<T> {
    let cols = kernel * kernel * c;
    let mut out = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let row = ((bi * h + y) * w + x) * cols;
                for ky in 0..kernel {
                    let Some((sy, lo, hi, sx)) = tap_span(kernel, y, x, ky, h, w) else { continue };
                    let len = (hi - lo) * c;
                    let d = ((bi * h + sy) * w + sx) * c;
                    let s = row + (ky * kernel + lo) * c;
                    for (o, g) in out[d..d + len].iter_mut().zip(&src[s..s + len]) {
                        *o += *g;
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, c) = layout.shape().dims4()?;
        let k = self.kernel;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, layout)?, b, h, w, c, k)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, layout)?, b, h, w, c, k)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, Shape::from((b * h * w, k * k * c))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, height, width, channels) = arg.dims4()?;
        let op = Col2Im { kernel: self.kernel, height, width, channels };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (rows, _) = layout.shape().dims2()?;
        let (h, w, c, k) = (self.height, self.width, self.channels, self.kernel);
        let b = rows / (h * w);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous_slice(v, layout)?, b, h, w, c, k)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous_slice(v, layout)?, b, h, w, c, k)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from((b, h, w, c))))
    }
}

/// Stride-1 same-padded convolution. `x` is `(b, h, w, cin)`, `weight` is
/// `(k*k*cin, cout)` with taps ordered `(ky, kx, cin)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, kernel: usize) -> Result<Tensor> {
    let (b, h, w, cin) = x.dims4()?;
    let cout = weight.dim(1)?;
    let cols = if kernel == 1 { x.reshape((b * h * w, cin))? } else { x.contiguous()?.apply_op1(Im2Col { kernel })? };
    let mut y = cols.matmul(weight)?;
    if let Some(bias) = bias {
        y = y.broadcast_add(bias)?;
    }
    Ok(y.reshape((b, h, w, cout))?)
}

/// Affine map `x @ weight + bias` for `x` of shape `(b, in)`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.matmul(weight)?.broadcast_add(bias)?)
}

/// Nearest-neighbour 2x upsampling of an NHWC tensor.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h, 1, w, 1, c))?.broadcast_as((b, h, 2, w, 2, c))?.reshape((b, 2 * h, 2 * w, c))?)
}

/// 2x2 average pooling of an NHWC tensor with even spatial size.
pub fn avg_pool2x(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h / 2, 2, w / 2, 2, c))?.mean(4)?.mean(2)?)
}

/// Numerically safe logistic function.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Mean over every axis except the batch axis, giving shape `(b,)`.
pub fn per_sample_mean(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(x.reshape((b, ()))?.mean(D::Minus1)?)
}

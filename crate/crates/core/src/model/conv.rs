//! 2-D cross-correlation via im2col, with the matching backward pass.
//!
//! Inputs are `(B, C, H, W)`, kernels `(F, C, kh, kw)`, outputs
//! `(B, F, Ho, Wo)` with `Ho = (H + 2p - kh) / s + 1`.

use crate::tensor::{DenseTensor, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub h: usize,
    pub w: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) fn conv_dims(
    x: &DenseTensor,
    kernel_shape: &[usize],
    p: ConvParams,
) -> Result<ConvDims> {
    if x.order() != 4 || kernel_shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d expects 4-mode input and kernel, got {:?} and {:?}",
            x.shape(),
            kernel_shape
        )));
    }
    let (batch, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (filters, kc, kh, kw) = (
        kernel_shape[0],
        kernel_shape[1],
        kernel_shape[2],
        kernel_shape[3],
    );
    if kc != cin {
        return Err(Error::ShapeMismatch(format!(
            "kernel expects {kc} input channels, input has {cin}"
        )));
    }
    if p.stride == 0 {
        return Err(Error::Config("conv stride must be positive".into()));
    }
    let padded_h = h + 2 * p.padding;
    let padded_w = w + 2 * p.padding;
    if padded_h < kh || padded_w < kw {
        return Err(Error::ShapeMismatch(format!(
            "kernel {kh}x{kw} larger than padded input {padded_h}x{padded_w}"
        )));
    }
    Ok(ConvDims {
        batch,
        in_channels: cin,
        h,
        w,
        filters,
        kh,
        kw,
        out_h: (padded_h - kh) / p.stride + 1,
        out_w: (padded_w - kw) / p.stride + 1,
    })
}

/// Patch matrix for one sample: `(C*kh*kw) x (Ho*Wo)`; out-of-bounds taps
/// read as zero.
fn im2col(x: &DenseTensor, sample: usize, dims: &ConvDims, p: ConvParams) -> Matrix {
    let rows = dims.in_channels * dims.kh * dims.kw;
    let cols = dims.out_h * dims.out_w;
    let mut m = Matrix::zeros(rows, cols);
    let xdata = x.data();
    let sample_base = sample * dims.in_channels * dims.h * dims.w;
    for c in 0..dims.in_channels {
        let chan_base = sample_base + c * dims.h * dims.w;
        for ki in 0..dims.kh {
            for kj in 0..dims.kw {
                let row = (c * dims.kh + ki) * dims.kw + kj;
                for oh in 0..dims.out_h {
                    let ih = (oh * p.stride + ki) as isize - p.padding as isize;
                    if ih < 0 || ih >= dims.h as isize {
                        continue;
                    }
                    for ow in 0..dims.out_w {
                        let iw = (ow * p.stride + kj) as isize - p.padding as isize;
                        if iw < 0 || iw >= dims.w as isize {
                            continue;
                        }
                        let v = xdata[chan_base + ih as usize * dims.w + iw as usize];
                        m.set(row, oh * dims.out_w + ow, v);
                    }
                }
            }
        }
    }
    m
}

/// Scatter-add of a patch-gradient matrix back into input layout.
fn col2im(
    cols_grad: &Matrix,
    grad_x: &mut DenseTensor,
    sample: usize,
    dims: &ConvDims,
    p: ConvParams,
) {
    let gdata = grad_x.data_mut();
    let sample_base = sample * dims.in_channels * dims.h * dims.w;
    for c in 0..dims.in_channels {
        let chan_base = sample_base + c * dims.h * dims.w;
        for ki in 0..dims.kh {
            for kj in 0..dims.kw {
                let row = (c * dims.kh + ki) * dims.kw + kj;
                for oh in 0..dims.out_h {
                    let ih = (oh * p.stride + ki) as isize - p.padding as isize;
                    if ih < 0 || ih >= dims.h as isize {
                        continue;
                    }
                    for ow in 0..dims.out_w {
                        let iw = (ow * p.stride + kj) as isize - p.padding as isize;
                        if iw < 0 || iw >= dims.w as isize {
                            continue;
                        }
                        gdata[chan_base + ih as usize * dims.w + iw as usize] +=
                            cols_grad.get(row, oh * dims.out_w + ow);
                    }
                }
            }
        }
    }
}

/// Kernel as an `(F) x (C*kh*kw)` matrix; the C-order flat layout of the
/// kernel tensor is exactly this reshape.
fn kernel_matrix(kernel: &DenseTensor) -> Matrix {
    let f = kernel.shape()[0];
    let rest = kernel.len() / f;
    Matrix::new(f, rest, kernel.data().to_vec()).expect("kernel data is finite")
}

pub(crate) fn conv2d_forward(
    x: &DenseTensor,
    kernel: &DenseTensor,
    bias: Option<&[f64]>,
    p: ConvParams,
) -> Result<DenseTensor> {
    let dims = conv_dims(x, kernel.shape(), p)?;
    if let Some(b) = bias {
        if b.len() != dims.filters {
            return Err(Error::ShapeMismatch(format!(
                "bias length {} vs {} filters",
                b.len(),
                dims.filters
            )));
        }
    }
    let kmat = kernel_matrix(kernel);
    let mut out = DenseTensor::zeros(vec![dims.batch, dims.filters, dims.out_h, dims.out_w]);
    let spatial = dims.out_h * dims.out_w;
    for s in 0..dims.batch {
        let cols = im2col(x, s, &dims, p);
        let y = kmat.matmul(&cols); // F x (Ho*Wo)
        let base = s * dims.filters * spatial;
        let od = out.data_mut();
        for f in 0..dims.filters {
            let b = bias.map(|b| b[f]).unwrap_or(0.0);
            for q in 0..spatial {
                od[base + f * spatial + q] = y.get(f, q) + b;
            }
        }
    }
    Ok(out)
}

pub(crate) struct ConvGrads {
    pub kernel: DenseTensor,
    pub bias: Option<Vec<f64>>,
    pub input: DenseTensor,
}

pub(crate) fn conv2d_backward(
    x: &DenseTensor,
    kernel: &DenseTensor,
    has_bias: bool,
    p: ConvParams,
    grad_out: &DenseTensor,
) -> Result<ConvGrads> {
    let dims = conv_dims(x, kernel.shape(), p)?;
    let expected = [dims.batch, dims.filters, dims.out_h, dims.out_w];
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch(format!(
            "conv grad shape {:?}, expected {:?}",
            grad_out.shape(),
            expected
        )));
    }
    let kmat = kernel_matrix(kernel);
    let spatial = dims.out_h * dims.out_w;
    let mut grad_kmat = Matrix::zeros(dims.filters, kmat.cols());
    let mut grad_bias = vec![0.0; dims.filters];
    let mut grad_x = DenseTensor::zeros(x.shape().to_vec());
    for s in 0..dims.batch {
        let cols = im2col(x, s, &dims, p);
        let gbase = s * dims.filters * spatial;
        let gmat = Matrix::new(
            dims.filters,
            spatial,
            grad_out.data()[gbase..gbase + dims.filters * spatial].to_vec(),
        )?;
        grad_kmat = grad_kmat.add(&gmat.matmul_nt(&cols));
        if has_bias {
            for (f, slot) in grad_bias.iter_mut().enumerate() {
                *slot += gmat.row(f).iter().sum::<f64>();
            }
        }
        let cols_grad = kmat.matmul_tn(&gmat);
        col2im(&cols_grad, &mut grad_x, s, &dims, p);
    }
    let grad_kernel = DenseTensor::new(kernel.shape().to_vec(), grad_kmat.data().to_vec())?;
    Ok(ConvGrads {
        kernel: grad_kernel,
        bias: has_bias.then_some(grad_bias),
        input: grad_x,
    })
}

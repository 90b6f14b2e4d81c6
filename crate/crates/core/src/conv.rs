//! Direct 2-D convolution (cross-correlation) with zero padding.
//!
//! Forward:
//! `Y[n,co,h,w] = sum_{ci,kh,kw} W[co,ci,kh,kw] * Xpad[n,ci,h*s+kh,w*s+kw]`
//!
//! The weight gradient depends only on the input and the output gradient,
//! never on `W`; `conv_backward_weights` does not take the weights at all.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgsError};
use crate::tensor::{Scalar, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(k_h, k_w)`
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    /// "Same" padding for odd kernels at stride 1.
    pub fn same(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Self::new(in_channels, out_channels, kernel).with_padding(kernel.0.max(kernel.1) / 2)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(SgsError::invalid(format!(
                "kernel dims must be >= 1, got {:?}",
                self.kernel
            )));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(SgsError::invalid(format!(
                "stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(SgsError::invalid("channel counts must be >= 1"));
        }
        Ok(())
    }

    /// Output spatial size for an `(h, w)` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let out = |len: usize, k: usize| -> Result<usize> {
            let padded = len + 2 * self.padding;
            if padded < k {
                return Err(SgsError::shape(format!(
                    "input extent {len} with padding {} is smaller than kernel {k}",
                    self.padding
                )));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((out(h, self.kernel.0)?, out(w, self.kernel.1)?))
    }

    fn check_input(&self, x: [usize; 4]) -> Result<(usize, usize)> {
        if x[1] != self.in_channels {
            return Err(SgsError::shape(format!(
                "input has {} channels, conv expects {}",
                x[1], self.in_channels
            )));
        }
        self.output_size(x[2], x[3])
    }

    fn check_weight(&self, w: [usize; 4]) -> Result<()> {
        if w != self.weight_shape() {
            return Err(SgsError::shape(format!(
                "weight shape {:?} does not match spec {:?}",
                w,
                self.weight_shape()
            )));
        }
        Ok(())
    }

    fn check_grad_output(&self, dy: [usize; 4], n: usize, out: (usize, usize)) -> Result<()> {
        let expected = [n, self.out_channels, out.0, out.1];
        if dy != expected {
            return Err(SgsError::shape(format!(
                "output gradient shape {dy:?}, expected {expected:?}"
            )));
        }
        Ok(())
    }
}

/// Range of output indices `o` with `0 <= o*stride + k - pad < input_len`.
#[inline]
fn valid_range(
    k: usize,
    pad: usize,
    stride: usize,
    input_len: usize,
    output_len: usize,
) -> std::ops::Range<usize> {
    let k = k as isize;
    let pad = pad as isize;
    let s = stride as isize;
    // smallest o with o*s >= pad - k
    let lo_num = pad - k;
    let lo = if lo_num <= 0 { 0 } else { (lo_num + s - 1) / s };
    // largest o with o*s <= input_len - 1 + pad - k
    let hi_num = input_len as isize - 1 + pad - k;
    if hi_num < 0 {
        return 0..0;
    }
    let hi = (hi_num / s + 1).min(output_len as isize);
    if lo >= hi {
        0..0
    } else {
        lo as usize..hi as usize
    }
}

pub fn conv_forward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let [n, _, h, wid] = x.shape();
    let (oh, ow) = spec.check_input(x.shape())?;
    spec.check_weight(w.shape())?;
    let (kh, kw) = spec.kernel;
    let (s, pad) = (spec.stride, spec.padding);
    let mut y = Tensor4::zeros([n, spec.out_channels, oh, ow]);

    for b in 0..n {
        for co in 0..spec.out_channels {
            let out = y.plane_mut(b, co);
            for ci in 0..spec.in_channels {
                let xin = x.plane(b, ci);
                let kernel = w.plane(co, ci);
                for ky in 0..kh {
                    let rows = valid_range(ky, pad, s, h, oh);
                    for kx in 0..kw {
                        let weight = kernel[ky * kw + kx];
                        let cols = valid_range(kx, pad, s, wid, ow);
                        for r in rows.clone() {
                            let ir = r * s + ky - pad;
                            let xrow = &xin[ir * wid..(ir + 1) * wid];
                            let orow = &mut out[r * ow..(r + 1) * ow];
                            for c in cols.clone() {
                                orow[c] += weight * xrow[c * s + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// `dW[co,ci,kh,kw] = sum_{n,i,j} dY[n,co,i,j] * Xpad[n,ci,i*s+kh,j*s+kw]`.
pub fn conv_backward_weights<T: Scalar>(
    dy: &Tensor4<T>,
    x: &Tensor4<T>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let [n, _, h, wid] = x.shape();
    let (oh, ow) = spec.check_input(x.shape())?;
    spec.check_grad_output(dy.shape(), n, (oh, ow))?;
    let (kh, kw) = spec.kernel;
    let (s, pad) = (spec.stride, spec.padding);
    let mut dw = Tensor4::zeros(spec.weight_shape());

    for co in 0..spec.out_channels {
        for ci in 0..spec.in_channels {
            let grad = dw.plane_mut(co, ci);
            for ky in 0..kh {
                let rows = valid_range(ky, pad, s, h, oh);
                for kx in 0..kw {
                    let cols = valid_range(kx, pad, s, wid, ow);
                    let mut acc = T::zero();
                    for b in 0..n {
                        let xin = x.plane(b, ci);
                        let g = dy.plane(b, co);
                        for r in rows.clone() {
                            let ir = r * s + ky - pad;
                            let xrow = &xin[ir * wid..(ir + 1) * wid];
                            let grow = &g[r * ow..(r + 1) * ow];
                            for c in cols.clone() {
                                acc += grow[c] * xrow[c * s + kx - pad];
                            }
                        }
                    }
                    grad[ky * kw + kx] = acc;
                }
            }
        }
    }
    Ok(dw)
}

/// Gradient with respect to the (unpadded) input.
pub fn conv_backward_input<T: Scalar>(
    dy: &Tensor4<T>,
    w: &Tensor4<T>,
    spec: &ConvSpec,
    input_hw: (usize, usize),
) -> Result<Tensor4<T>> {
    let (h, wid) = input_hw;
    let n = dy.shape()[0];
    let (oh, ow) = spec.check_input([n, spec.in_channels, h, wid])?;
    spec.check_weight(w.shape())?;
    spec.check_grad_output(dy.shape(), n, (oh, ow))?;
    let (kh, kw) = spec.kernel;
    let (s, pad) = (spec.stride, spec.padding);
    let mut dx = Tensor4::zeros([n, spec.in_channels, h, wid]);

    for b in 0..n {
        for ci in 0..spec.in_channels {
            let out = dx.plane_mut(b, ci);
            for co in 0..spec.out_channels {
                let g = dy.plane(b, co);
                let kernel = w.plane(co, ci);
                for ky in 0..kh {
                    let rows = valid_range(ky, pad, s, h, oh);
                    for kx in 0..kw {
                        let weight = kernel[ky * kw + kx];
                        let cols = valid_range(kx, pad, s, wid, ow);
                        for r in rows.clone() {
                            let ir = r * s + ky - pad;
                            let drow = &mut out[ir * wid..(ir + 1) * wid];
                            let grow = &g[r * ow..(r + 1) * ow];
                            for c in cols.clone() {
                                drow[c * s + kx - pad] += weight * grow[c];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

//! im2col-based convolution kernels shared by the tape ops.
//!
//! Layout conventions: activations are NCHW, conv weights are
//! `[out, in, kh, kw]`, transposed-conv weights are `[in, out, kh, kw]`.
//! Patch matrices ("cols") are `[ci*kh*kw, b*oh*ow]` with the batch index
//! major in the column dimension, so a single gemm covers the whole batch.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution over an `[b, ci, h, w]` input.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        batch: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return None;
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Some(ConvGeom { batch, c_in, h, w, c_out, kh, kw, stride, pad, oh, ow })
    }
}

/// Extracts patches of `x` (`[b, ci, h, w]`) into `[ci*kh*kw, b*oh*ow]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ckk = g.c_in * g.kh * g.kw;
    let cols_w = g.batch * g.oh * g.ow;
    let mut cols = vec![T::zero(); ckk * cols_w];
    let plane = g.h * g.w;
    for ci in 0..g.c_in {
        for kh in 0..g.kh {
            for kw in 0..g.kw {
                let row = (ci * g.kh + kh) * g.kw + kw;
                let out_row = &mut cols[row * cols_w..(row + 1) * cols_w];
                for b in 0..g.batch {
                    let src = &x[(b * g.c_in + ci) * plane..(b * g.c_in + ci + 1) * plane];
                    let dst = &mut out_row[b * g.oh * g.ow..(b + 1) * g.oh * g.ow];
                    for oh in 0..g.oh {
                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        for ow in 0..g.ow {
                            let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.w as isize {
                                continue;
                            }
                            dst[oh * g.ow + ow] = src[ih * g.w + iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a `[ci*kh*kw, b*oh*ow]` patch matrix back into an
/// `[b, ci, h, w]` buffer. Exact adjoint of [`im2col`].
pub fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let cols_w = g.batch * g.oh * g.ow;
    let plane = g.h * g.w;
    for ci in 0..g.c_in {
        for kh in 0..g.kh {
            for kw in 0..g.kw {
                let row = (ci * g.kh + kh) * g.kw + kw;
                let col_row = &cols[row * cols_w..(row + 1) * cols_w];
                for b in 0..g.batch {
                    let dst = &mut x[(b * g.c_in + ci) * plane..(b * g.c_in + ci + 1) * plane];
                    let src = &col_row[b * g.oh * g.ow..(b + 1) * g.oh * g.ow];
                    for oh in 0..g.oh {
                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        for ow in 0..g.ow {
                            let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.w as isize {
                                continue;
                            }
                            dst[ih * g.w + iw as usize] =
                                dst[ih * g.w + iw as usize] + src[oh * g.ow + ow];
                        }
                    }
                }
            }
        }
    }
}

/// `[c, b*span]` channel-major matrix into NCHW `[b, c, span]`.
pub fn cmajor_to_nchw<T: Scalar>(m: &[T], batch: usize, c: usize, span: usize, out: &mut [T]) {
    let cols_w = batch * span;
    for ch in 0..c {
        let row = &m[ch * cols_w..(ch + 1) * cols_w];
        for b in 0..batch {
            out[(b * c + ch) * span..(b * c + ch + 1) * span]
                .copy_from_slice(&row[b * span..(b + 1) * span]);
        }
    }
}

/// NCHW `[b, c, span]` into channel-major `[c, b*span]`.
pub fn nchw_to_cmajor<T: Scalar>(x: &[T], batch: usize, c: usize, span: usize) -> Vec<T> {
    let cols_w = batch * span;
    let mut m = vec![T::zero(); c * cols_w];
    for ch in 0..c {
        let row = &mut m[ch * cols_w..(ch + 1) * cols_w];
        for b in 0..batch {
            row[b * span..(b + 1) * span]
                .copy_from_slice(&x[(b * c + ch) * span..(b * c + ch + 1) * span]);
        }
    }
    m
}

/// Max pooling over `[b, c, h, w]`; records flat argmax indices for backward.
pub fn max_pool<T: Scalar>(
    x: &[T],
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<T>, Vec<u32>, usize, usize) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut y = vec![T::zero(); batch * c * oh * ow];
    let mut arg = vec![0u32; y.len()];
    let plane = h * w;
    for bc in 0..batch * c {
        let src = &x[bc * plane..(bc + 1) * plane];
        let base = bc * oh * ow;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_at = 0usize;
                for di in 0..k {
                    for dj in 0..k {
                        let at = (i * stride + di) * w + (j * stride + dj);
                        if src[at] > best {
                            best = src[at];
                            best_at = at;
                        }
                    }
                }
                y[base + i * ow + j] = best;
                arg[base + i * ow + j] = (bc * plane + best_at) as u32;
            }
        }
    }
    (y, arg, oh, ow)
}

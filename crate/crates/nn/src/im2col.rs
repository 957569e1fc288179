//! Patch extraction for convolution as matrix multiplication.
//!
//! Columns are laid out `[C * kh * kw, N * oh * ow]` so a whole batch is
//! handled by one GEMM.

use crate::scalar::Scalar;

/// Kernel geometry shared by convolution and its transpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        ConvGeom { kh: k, kw: k, stride, pad }
    }

    /// Output extent of a forward convolution, `None` when the kernel does not fit.
    pub fn out_dim(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < kernel || self.stride == 0 {
            None
        } else {
            Some((padded - kernel) / self.stride + 1)
        }
    }
}

/// Spatial description of one side of an im2col transform.
#[derive(Clone, Copy, Debug)]
pub struct Plane {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

/// Output positions `ox` whose input column `ox * stride + j - pad` lies in
/// `0..width`, as a half-open range.
fn valid_range(out: usize, stride: usize, j: usize, pad: usize, width: usize) -> (usize, usize) {
    let lo = if pad > j { (pad - j).div_ceil(stride) } else { 0 };
    let limit = width + pad - j;
    let hi = if width + pad > j { limit.div_ceil(stride).min(out) } else { 0 };
    (lo.min(hi), hi)
}

pub fn im2col<T: Scalar>(src: &[T], p: Plane, g: ConvGeom, oh: usize, ow: usize) -> Vec<T> {
    let l = oh * ow;
    let nl = p.n * l;
    let rows = p.c * g.kh * g.kw;
    let mut cols = vec![T::zero(); rows * nl];
    let s = g.stride;
    for c in 0..p.c {
        for i in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(oh, s, i, g.pad, p.h);
            for j in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(ow, s, j, g.pad, p.w);
                let row = (c * g.kh + i) * g.kw + j;
                let dst_row = &mut cols[row * nl..(row + 1) * nl];
                for n in 0..p.n {
                    let plane = &src[(n * p.c + c) * p.h * p.w..(n * p.c + c + 1) * p.h * p.w];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + i - g.pad;
                        let src_row = &plane[iy * p.w..(iy + 1) * p.w];
                        let base = n * l + oy * ow;
                        let dst = &mut dst_row[base + ox_lo..base + ox_hi];
                        let ix0 = ox_lo * s + j - g.pad;
                        if s == 1 {
                            dst.copy_from_slice(&src_row[ix0..ix0 + dst.len()]);
                        } else {
                            for (k, d) in dst.iter_mut().enumerate() {
                                *d = src_row[ix0 + k * s];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
pub fn col2im<T: Scalar>(cols: &[T], p: Plane, g: ConvGeom, oh: usize, ow: usize) -> Vec<T> {
    let l = oh * ow;
    let nl = p.n * l;
    let mut dst = vec![T::zero(); p.n * p.c * p.h * p.w];
    let s = g.stride;
    for c in 0..p.c {
        for i in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(oh, s, i, g.pad, p.h);
            for j in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(ow, s, j, g.pad, p.w);
                let row = (c * g.kh + i) * g.kw + j;
                let src_row = &cols[row * nl..(row + 1) * nl];
                for n in 0..p.n {
                    let off = (n * p.c + c) * p.h * p.w;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + i - g.pad;
                        let base = n * l + oy * ow;
                        let src = &src_row[base + ox_lo..base + ox_hi];
                        let d0 = off + iy * p.w + ox_lo * s + j - g.pad;
                        if s == 1 {
                            for (d, v) in dst[d0..d0 + src.len()].iter_mut().zip(src) {
                                *d = *d + *v;
                            }
                        } else {
                            for (k, v) in src.iter().enumerate() {
                                let d = &mut dst[d0 + k * s];
                                *d = *d + *v;
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

/// `[N, C, L]` → `[C, N * L]`.
pub fn batch_to_channel_major<T: Scalar>(src: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            let s = &src[(b * c + ch) * l..(b * c + ch + 1) * l];
            out[ch * n * l + b * l..ch * n * l + (b + 1) * l].copy_from_slice(s);
        }
    }
    out
}

/// `[C, N * L]` → `[N, C, L]`.
pub fn channel_major_to_batch<T: Scalar>(src: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for ch in 0..c {
        for b in 0..n {
            let s = &src[ch * n * l + b * l..ch * n * l + (b + 1) * l];
            out[(b * c + ch) * l..(b * c + ch + 1) * l].copy_from_slice(s);
        }
    }
    out
}

//! Convolution geometry and the im2col / col2im lowering used by both the
//! convolution and the transposed convolution.

use crate::tensor::Scalar;

/// Geometry of a 2-D convolution reading a `[c_in, h, w]` input and
/// producing a `[_, h_out, w_out]` output with a square `k×k` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution; `None` if the kernel does not fit.
    pub fn conv(
        c_in: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        Some(ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Rows of the lowered column matrix.
    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Columns of the lowered column matrix.
    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Lower `x` (`[c_in, h, w]`) into a `(c_in·k·k) × (h_out·w_out)` matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    debug_assert_eq!(x.len(), g.c_in * g.h * g.w);
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let n = g.col_cols();
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - pad;
                    let out_row = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    if g.stride == 1 {
                        // valid ow satisfy 0 <= ow + kj - pad < w
                        let off = kj as isize - pad;
                        let lo = (-off).clamp(0, g.w_out as isize) as usize;
                        let hi = (g.w as isize - off).clamp(0, g.w_out as isize) as usize;
                        out_row[..lo].fill(T::zero());
                        if hi > lo {
                            let s = (lo as isize + off) as usize;
                            out_row[lo..hi].copy_from_slice(&src[s..s + hi - lo]);
                        }
                        out_row[hi.max(lo)..].fill(T::zero());
                    } else {
                        for (ow, v) in out_row.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - pad;
                            *v = if iw < 0 || iw >= g.w as isize {
                                T::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add the column matrix back onto `x`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    debug_assert_eq!(x.len(), g.c_in * g.h * g.w);
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let n = g.col_cols();
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - pad;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let in_row = &src[oh * g.w_out..(oh + 1) * g.w_out];
                    for (ow, &v) in in_row.iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - pad;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

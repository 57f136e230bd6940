//! Patch unrolling for strided 2-D convolution and its adjoint.
//!
//! `im2col` lays the receptive fields of a `(c, h, w)` image out as a
//! `(c·k·k) × (oh·ow)` row-major matrix; `col2im` scatters such a matrix back
//! with accumulation. A transposed convolution is `col2im ∘ Wᵀ`, the adjoint of
//! the ordinary convolution with the same geometry.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Output extent of the forward convolution over this input.
    pub fn out_dims(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

pub fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T], out_h: usize, out_w: usize) -> Vec<T> {
    debug_assert_eq!(input.len(), g.channels * g.height * g.width);
    let k = g.kernel;
    let positions = out_h * out_w;
    let mut cols = vec![T::zero(); g.col_rows() * positions];
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Accumulates `cols` into `out`, the adjoint of [`im2col`].
pub fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], out_h: usize, out_w: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), g.channels * g.height * g.width);
    let k = g.kernel;
    let positions = out_h * out_w;
    debug_assert_eq!(cols.len(), g.col_rows() * positions);
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[base + ix as usize] =
                                plane[base + ix as usize] + src[oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

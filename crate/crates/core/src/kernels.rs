//! Convolution lowering helpers (im2col / col2im) and small dense kernels.

use crate::tensor::Scalar;

#[inline]
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Geometry of one 2-D convolution over a single image.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: conv_out_size(h, k, stride, pad),
            wo: conv_out_size(w, k, stride, pad),
        }
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies in `[0, w)`.
#[inline]
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = if kx >= g.pad {
        0
    } else {
        (g.pad - kx).div_ceil(g.stride)
    };
    let hi = if g.w + g.pad <= kx {
        0
    } else {
        (g.w + g.pad - kx - 1) / g.stride + 1
    };
    let hi = hi.min(g.wo);
    (lo.min(hi), hi)
}

/// Unfolds `x` (`c×h×w`) into the `c·k·k × ho·wo` block of `cols` that
/// starts at column `off` of a row-major matrix with row stride `ld`.
pub fn im2col<F: Scalar>(x: &[F], g: &ConvGeom, cols: &mut [F], ld: usize, off: usize) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let out = &mut cols[row * ld + off..row * ld + off + plane];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    let iy = oy * g.stride + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        dst.fill(F::zero());
                        continue;
                    }
                    let src = &xc[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    dst[..lo].fill(F::zero());
                    dst[hi..].fill(F::zero());
                    if lo == hi {
                        continue;
                    }
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (d, s) in dst[lo..hi]
                            .iter_mut()
                            .zip(src[ix0..].iter().step_by(g.stride))
                        {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Folds a block laid out as in [`im2col`] back onto `dx` (`c×h×w`),
/// accumulating overlaps.
pub fn col2im<F: Scalar>(cols: &[F], g: &ConvGeom, dx: &mut [F], ld: usize, off: usize) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ld + off..row * ld + off + plane];
                let (lo, hi) = valid_cols(g, kx);
                if lo == hi {
                    continue;
                }
                let ix0 = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = oy * g.stride + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let dst = &mut dxc[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[ix0..ix0 + hi - lo].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[ix0..].iter_mut().step_by(g.stride).zip(s) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Nearest-neighbour source index, matching the usual `floor(dst * in / out)` rule.
#[inline]
pub fn nearest_src(dst: usize, in_size: usize, out_size: usize) -> usize {
    ((dst * in_size) / out_size).min(in_size - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y.
        let g = ConvGeom::new(2, 5, 4, 3, 2, 1);
        let x: alloc::vec::Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let n = g.col_rows() * g.col_cols();
        let y: alloc::vec::Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; n];
        im2col(&x, &g, &mut cols, g.col_cols(), 0);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back, g.col_cols(), 0);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn output_sizes() {
        assert_eq!(conv_out_size(64, 3, 2, 1), 32);
        assert_eq!(conv_out_size(8, 3, 1, 1), 8);
        assert_eq!(conv_out_size(2, 3, 2, 1), 1);
    }
}

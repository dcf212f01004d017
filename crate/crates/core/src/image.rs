//! Pixel-space images and single-channel real grids, plus resampling.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Rank-3 `3 × H × W` image with values in `[0, 1]`.
pub type ImageTensor = Tensor<f64>;

/// Row-major `h × w` grid of reals (anomaly maps, masks, smoothed maps).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self::filled(h, w, 0.0)
    }

    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Self {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(invalid!(
                "grid {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            ));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.w + x] = v;
    }

    /// Largest value; `-inf` for an empty grid.
    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    /// Extracts channel `c` of a rank-3 tensor.
    pub fn from_channel(t: &Tensor<f64>, c: usize) -> Self {
        let (_, h, w) = t.dims3();
        Self {
            h,
            w,
            data: t.data()[c * h * w..(c + 1) * h * w].to_vec(),
        }
    }
}

/// Source coordinate pair and blend weight for half-pixel-centred linear
/// interpolation (the `align_corners = false` convention).
#[inline]
fn linear_taps(dst: usize, in_size: usize, out_size: usize) -> (usize, usize, f64) {
    let scale = in_size as f64 / out_size as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (libm::floor(src) as usize).min(in_size - 1);
    let i1 = (i0 + 1).min(in_size - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resampling of one `h × w` plane stored row-major.
pub fn resize_plane_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let xs: Vec<_> = (0..ow).map(|x| linear_taps(x, w, ow)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = linear_taps(y, h, oh);
        let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}

/// Nearest-neighbour resampling of one plane (`floor(dst · in / out)`).
pub fn resize_plane_nearest(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = crate::kernels::nearest_src(y, h, oh);
        for x in 0..ow {
            out.push(src[sy * w + crate::kernels::nearest_src(x, w, ow)]);
        }
    }
    out
}

impl Grid {
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Self {
        if (oh, ow) == (self.h, self.w) {
            return self.clone();
        }
        Self {
            h: oh,
            w: ow,
            data: resize_plane_bilinear(&self.data, self.h, self.w, oh, ow),
        }
    }

    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Self {
        Self {
            h: oh,
            w: ow,
            data: resize_plane_nearest(&self.data, self.h, self.w, oh, ow),
        }
    }
}

/// Bilinear resize of every channel of a rank-3 tensor.
pub fn resize_bilinear(t: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let (c, h, w) = t.dims3();
    if (oh, ow) == (h, w) {
        return t.clone();
    }
    let mut data = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        data.extend(resize_plane_bilinear(
            &t.data()[ch * h * w..(ch + 1) * h * w],
            h,
            w,
            oh,
            ow,
        ));
    }
    Tensor::from_vec(&[c, oh, ow], data).expect("sizes agree")
}

/// Checks the `3 × H × W`, values-in-`[0, 1]` image contract.
pub fn check_image(x: &ImageTensor) -> Result<()> {
    if x.rank() != 3 || x.shape()[0] != 3 {
        return Err(invalid!(
            "expected a 3xHxW image, got shape {:?}",
            x.shape()
        ));
    }
    if !x.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(invalid!("image values must lie in [0, 1]"));
    }
    Ok(())
}

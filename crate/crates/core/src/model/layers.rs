//! Building blocks with explicit forward/backward passes on `(N, C, H, W)`
//! tensors.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Output columns `[lo, hi)` whose input column `ox * stride + shift` lies
/// inside `[0, width)`.
fn valid_range(out_width: usize, width: usize, stride: usize, shift: isize) -> (usize, usize) {
    let s = stride as isize;
    // smallest ox with ox*s + shift >= 0
    let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
    // largest ox with ox*s + shift <= width - 1
    let last = width as isize - 1 - shift;
    let hi = if last < 0 {
        0
    } else {
        (last / s + 1).min(out_width as isize)
    };
    (lo as usize, (hi as usize).max(lo as usize))
}

/// Square 2-D convolution with zero padding `k / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `(out_channels, in_channels * k * k)`
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// Fan-in scaled normal init (`gain² / fan_in` variance).
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = gain / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((out_channels, fan_in), || {
            T::of(rng.sample::<f64, _>(StandardNormal) * std)
        });
        Self {
            weight,
            bias: bias.then(|| Array1::zeros(out_channels)),
            in_channels,
            kernel,
            stride,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_size(&self, h: usize) -> usize {
        (h + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    fn im2col(&self, x: ArrayView3<T>) -> Array2<T> {
        let (c, h, w) = x.dim();
        let (k, s, p) = (self.kernel, self.stride, self.pad() as isize);
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let mut col = Array2::zeros((c * k * k, ho * wo));
        let xs = x.as_standard_layout();
        let src = xs.as_slice().unwrap();
        let dst = col.as_slice_mut().unwrap();
        for ci in 0..c {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let out = &mut dst[row * ho * wo..(row + 1) * ho * wo];
                    let (lo, hi) = valid_range(wo, w, s, kx as isize - p);
                    for oy in 0..ho {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut out[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            let off = (lo as isize + kx as isize - p) as usize;
                            orow[lo..hi].copy_from_slice(&line[off..off + hi - lo]);
                        } else {
                            for (ox, o) in orow.iter_mut().enumerate().take(hi).skip(lo) {
                                *o = line[(ox * s + kx) - p as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &Array2<T>, c: usize, h: usize, w: usize) -> Array2<T> {
        let (k, s, p) = (self.kernel, self.stride, self.pad() as isize);
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let mut img = Array2::zeros((c, h * w));
        let src = col.as_slice().unwrap();
        let dst = img.as_slice_mut().unwrap();
        for ci in 0..c {
            let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let inp = &src[row * ho * wo..(row + 1) * ho * wo];
                    let (lo, hi) = valid_range(wo, w, s, kx as isize - p);
                    for oy in 0..ho {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let irow = &inp[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            let off = (lo as isize + kx as isize - p) as usize;
                            for (d, &v) in line[off..off + hi - lo].iter_mut().zip(&irow[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for (ox, &v) in irow.iter().enumerate().take(hi).skip(lo) {
                                line[(ox * s + kx) - p as usize] += v;
                            }
                        }
                    }
                }
            }
        }
        img
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let co = self.out_channels();
        let planes: Vec<Array2<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let col = self.im2col(x.index_axis(Axis(0), i));
                let mut out = Array2::zeros((co, ho * wo));
                general_mat_mul(T::one(), &self.weight, &col, T::zero(), &mut out);
                if let Some(b) = &self.bias {
                    for (mut row, &bv) in out.outer_iter_mut().zip(b.iter()) {
                        row.mapv_inplace(|v| v + bv);
                    }
                }
                out
            })
            .collect();
        let mut y = Array4::zeros((n, co, ho, wo));
        for (i, p) in planes.into_iter().enumerate() {
            y.index_axis_mut(Axis(0), i)
                .assign(&p.into_shape_with_order((co, ho, wo)).unwrap());
        }
        Ok(y)
    }

    /// Returns `(dx, d_weight, d_bias)`.
    pub fn backward(
        &self,
        x: &Array4<T>,
        dy: &Array4<T>,
        need_dx: bool,
    ) -> (Option<Array4<T>>, Array2<T>, Option<Array1<T>>) {
        let (n, c, h, w) = x.dim();
        let (_, co, ho, wo) = dy.dim();
        let parts: Vec<(Array2<T>, Option<Array2<T>>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let col = self.im2col(x.index_axis(Axis(0), i));
                let dyi = dy
                    .index_axis(Axis(0), i)
                    .to_owned()
                    .into_shape_with_order((co, ho * wo))
                    .unwrap();
                let mut dw = Array2::zeros(self.weight.dim());
                general_mat_mul(T::one(), &dyi, &col.t(), T::zero(), &mut dw);
                let dx = need_dx.then(|| {
                    let mut dcol = Array2::zeros(col.dim());
                    general_mat_mul(T::one(), &self.weight.t(), &dyi, T::zero(), &mut dcol);
                    self.col2im(&dcol, c, h, w)
                });
                (dw, dx)
            })
            .collect();
        let mut dweight = Array2::zeros(self.weight.dim());
        let mut dx = need_dx.then(|| Array4::zeros((n, c, h, w)));
        for (i, (dw, dxi)) in parts.into_iter().enumerate() {
            dweight += &dw;
            if let (Some(dx), Some(dxi)) = (dx.as_mut(), dxi) {
                dx.index_axis_mut(Axis(0), i)
                    .assign(&dxi.into_shape_with_order((c, h, w)).unwrap());
            }
        }
        let dbias = self.bias.as_ref().map(|_| {
            let mut db = Array1::zeros(co);
            for i in 0..n {
                for o in 0..co {
                    db[o] += dy.slice(s![i, o, .., ..]).sum();
                }
            }
            db
        });
        (dx, dweight, dbias)
    }
}

/// Per-channel batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub eps: f64,
    pub momentum: f64,
}

/// Saved normalization state for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Array4<T>,
    pub inv_std: Array1<T>,
    pub batch_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// With `train`, normalizes with batch statistics and folds them into
    /// the running estimates; otherwise uses the running estimates.
    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> (Array4<T>, BnCache<T>) {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let (mean, var) = if train {
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            for ch in 0..c {
                let view = x.slice(s![.., ch, .., ..]);
                let m = view.iter().map(|v| v.as_f64()).sum::<f64>() / count;
                let v = view.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / count;
                mean[ch] = T::of(m);
                var[ch] = T::of(v);
                let unbiased = if count > 1.0 { v * count / (count - 1.0) } else { v };
                let mo = self.momentum;
                self.running_mean[ch] = T::of((1.0 - mo) * self.running_mean[ch].as_f64() + mo * m);
                self.running_var[ch] = T::of((1.0 - mo) * self.running_var[ch].as_f64() + mo * unbiased);
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        self.normalize(x, &mean, &var, train)
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> (Array4<T>, BnCache<T>) {
        self.normalize(x, &self.running_mean, &self.running_var, false)
    }

    fn normalize(
        &self,
        x: &Array4<T>,
        mean: &Array1<T>,
        var: &Array1<T>,
        batch_stats: bool,
    ) -> (Array4<T>, BnCache<T>) {
        let c = x.dim().1;
        let eps = T::of(self.eps);
        let inv_std: Array1<T> = var.mapv(|v| T::one() / (v + eps).sqrt());
        let mut xhat = x.clone();
        let mut y = x.clone();
        for ch in 0..c {
            let (m, is, g, b) = (mean[ch], inv_std[ch], self.gamma[ch], self.beta[ch]);
            xhat.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| (v - m) * is);
            y.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| (v - m) * is * g + b);
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Returns `(dx, d_gamma, d_beta)`.
    pub fn backward(&self, cache: &BnCache<T>, dy: &Array4<T>) -> (Array4<T>, Array1<T>, Array1<T>) {
        let (n, c, h, w) = dy.dim();
        let count = T::of((n * h * w) as f64);
        let mut dx = Array4::zeros(dy.dim());
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        for ch in 0..c {
            let dyc = dy.slice(s![.., ch, .., ..]);
            let xh = cache.xhat.slice(s![.., ch, .., ..]);
            let sum_dy: T = dyc.sum();
            let sum_dy_xh: T = dyc.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
            dbeta[ch] = sum_dy;
            dgamma[ch] = sum_dy_xh;
            let g = self.gamma[ch];
            let is = cache.inv_std[ch];
            let mut dxc = dx.slice_mut(s![.., ch, .., ..]);
            if cache.batch_stats {
                // dxhat = g * dy; dx = is / M * (M dxhat - sum(dxhat) - xhat * sum(dxhat xhat))
                let sd = g * sum_dy;
                let sdx = g * sum_dy_xh;
                ndarray::Zip::from(&mut dxc).and(&dyc).and(&xh).for_each(|o, &d, &x| {
                    *o = is / count * (count * g * d - sd - x * sdx);
                });
            } else {
                ndarray::Zip::from(&mut dxc).and(&dyc).for_each(|o, &d| *o = d * g * is);
            }
        }
        (dx, dgamma, dbeta)
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut Array4<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Zero the gradient where the ReLU output was clamped.
pub fn relu_backward_inplace<T: Scalar>(dy: &mut Array4<T>, out: &Array4<T>) {
    ndarray::Zip::from(dy).and(out).for_each(|d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let xs = x.as_standard_layout();
    let src = xs.as_slice().unwrap();
    let mut y = Array4::zeros((n, c, 2 * h, 2 * w));
    let dst = y.as_slice_mut().unwrap();
    for (plane_in, plane_out) in src.chunks_exact(h * w).zip(dst.chunks_exact_mut(4 * h * w)) {
        for (row_in, rows_out) in plane_in.chunks_exact(w).zip(plane_out.chunks_exact_mut(4 * w)) {
            let (even, odd) = rows_out.split_at_mut(2 * w);
            for (pair, &v) in even.chunks_exact_mut(2).zip(row_in) {
                pair[0] = v;
                pair[1] = v;
            }
            odd.copy_from_slice(even);
        }
    }
    y
}

pub fn upsample2_backward<T: Scalar>(dy: &Array4<T>) -> Array4<T> {
    let (n, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let ds = dy.as_standard_layout();
    let src = ds.as_slice().unwrap();
    let mut dx = Array4::zeros((n, c, h, w));
    let dst = dx.as_slice_mut().unwrap();
    for (plane_in, plane_out) in src.chunks_exact(4 * h * w).zip(dst.chunks_exact_mut(h * w)) {
        for (rows_in, row_out) in plane_in.chunks_exact(4 * w).zip(plane_out.chunks_exact_mut(w)) {
            let (even, odd) = rows_in.split_at(2 * w);
            for (x, o) in row_out.iter_mut().enumerate() {
                *o = even[2 * x] + even[2 * x + 1] + odd[2 * x] + odd[2 * x + 1];
            }
        }
    }
    dx
}

pub fn concat_channels<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).unwrap()
}

pub fn split_channels<T: Scalar>(d: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    (
        d.slice(s![.., ..first, .., ..]).to_owned(),
        d.slice(s![.., first.., .., ..]).to_owned(),
    )
}

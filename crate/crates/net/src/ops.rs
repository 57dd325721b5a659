//! Layer kernels over channel-major batch tensors.
//!
//! A feature map batch is a matrix with one row per channel and columns
//! ordered `(sample, y, x)`. Convolutions become one GEMM against an im2col
//! matrix; large images are processed in row bands so the im2col matrix
//! stays bounded.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;

pub trait Scalar:
    LinalgScalar + Float + FromPrimitive + ScalarOperand + AddAssign + MulAssign + Sum + Debug + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: LinalgScalar + Float + FromPrimitive + ScalarOperand + AddAssign + MulAssign + Sum + Debug + Send + Sync + 'static
{
}

/// Upper bound on im2col elements per band.
const COL_BUDGET: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct Act<T> {
    pub data: Array2<T>,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl<T: Scalar> Act<T> {
    pub fn new(data: Array2<T>, n: usize, h: usize, w: usize) -> Self {
        assert_eq!(data.ncols(), n * h * w, "column count does not match n·h·w");
        Self { data, n, h, w }
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    fn like(&self, data: Array2<T>) -> Self {
        Self::new(data, self.n, self.h, self.w)
    }
}

fn band_rows(row_elems: usize, h: usize) -> usize {
    (COL_BUDGET / row_elems.max(1)).clamp(1, h.max(1))
}

fn slice_of<T>(a: &Array2<T>) -> &[T] {
    a.as_slice().expect("activations are kept in standard layout")
}

/// im2col for output rows `y0..y1`; rows of the result are `(ci, ky, kx)`.
fn im2col<T: Scalar>(x: &Act<T>, y0: usize, y1: usize) -> Array2<T> {
    let (c, n, h, w) = (x.channels(), x.n, x.h, x.w);
    let bh = y1 - y0;
    let ncol = n * bh * w;
    let mut col = Array2::<T>::zeros((c * 9, ncol));
    let xs = slice_of(&x.data);
    let cs = col.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ncol;
                for sn in 0..n {
                    for y in y0..y1 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = (ci * n + sn) * h * w + sy as usize * w;
                        let dst = row + sn * bh * w + (y - y0) * w;
                        match kx {
                            0 => cs[dst + 1..dst + w].copy_from_slice(&xs[src..src + w - 1]),
                            1 => cs[dst..dst + w].copy_from_slice(&xs[src..src + w]),
                            _ => cs[dst..dst + w - 1].copy_from_slice(&xs[src + 1..src + w]),
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulates `col` into `dx`.
fn col2im_add<T: Scalar>(dx: &mut Array2<T>, col: &Array2<T>, n: usize, h: usize, w: usize, y0: usize, y1: usize) {
    let c = dx.nrows();
    let bh = y1 - y0;
    let ncol = n * bh * w;
    let cs = slice_of(col);
    let ds = dx.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ncol;
                for sn in 0..n {
                    for y in y0..y1 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = (ci * n + sn) * h * w + sy as usize * w;
                        let src = row + sn * bh * w + (y - y0) * w;
                        let (d, s_) = match kx {
                            0 => (&mut ds[dst..dst + w - 1], &cs[src + 1..src + w]),
                            1 => (&mut ds[dst..dst + w], &cs[src..src + w]),
                            _ => (&mut ds[dst + 1..dst + w], &cs[src..src + w - 1]),
                        };
                        for (a, &b) in d.iter_mut().zip(s_) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut Array2<T>, b: &Array1<T>) {
    for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(b.iter()) {
        row.mapv_inplace(|v| v + bv);
    }
}

/// Columns of rows `y0..y1` of every sample, gathered into a band matrix.
fn gather_band<T: Scalar>(a: &Array2<T>, n: usize, h: usize, w: usize, y0: usize, y1: usize) -> Array2<T> {
    let bh = y1 - y0;
    let mut out = Array2::<T>::zeros((a.nrows(), n * bh * w));
    for sn in 0..n {
        out.slice_mut(s![.., sn * bh * w..(sn + 1) * bh * w])
            .assign(&a.slice(s![.., sn * h * w + y0 * w..sn * h * w + y1 * w]));
    }
    out
}

/// 3×3 convolution, stride 1, zero padding 1. `w` is `(c_out, c_in·9)`.
pub fn conv3<T: Scalar>(x: &Act<T>, w: &Array2<T>, b: &Array1<T>) -> Act<T> {
    let (n, h, wd) = (x.n, x.h, x.w);
    let band = band_rows(x.channels() * 9 * n * wd, h);
    let mut out = if band >= h {
        w.dot(&im2col(x, 0, h))
    } else {
        let mut out = Array2::<T>::zeros((w.nrows(), n * h * wd));
        for y0 in (0..h).step_by(band) {
            let y1 = (y0 + band).min(h);
            let r = w.dot(&im2col(x, y0, y1));
            let bh = y1 - y0;
            for sn in 0..n {
                out.slice_mut(s![.., sn * h * wd + y0 * wd..sn * h * wd + y1 * wd])
                    .assign(&r.slice(s![.., sn * bh * wd..(sn + 1) * bh * wd]));
            }
        }
        out
    };
    add_bias(&mut out, b);
    x.like(out)
}

/// Gradients of [`conv3`]. `dx` is skipped when `need_dx` is false.
pub fn conv3_backward<T: Scalar>(
    x: &Act<T>,
    w: &Array2<T>,
    dout: &Array2<T>,
    need_dx: bool,
) -> (Option<Array2<T>>, Array2<T>, Array1<T>) {
    let (n, h, wd) = (x.n, x.h, x.w);
    let band = band_rows(x.channels() * 9 * n * wd, h);
    let mut dw = Array2::<T>::zeros(w.raw_dim());
    let mut dx = need_dx.then(|| Array2::<T>::zeros(x.data.raw_dim()));
    for y0 in (0..h).step_by(band) {
        let y1 = (y0 + band).min(h);
        let col = im2col(x, y0, y1);
        let owned;
        let db: ArrayView2<T> = if band >= h {
            dout.view()
        } else {
            owned = gather_band(dout, n, h, wd, y0, y1);
            owned.view()
        };
        general_mat_mul(T::one(), &db, &col.t(), T::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            let dcol = w.t().dot(&db);
            col2im_add(dx, &dcol, n, h, wd, y0, y1);
        }
    }
    (dx, dw, dout.sum_axis(Axis(1)))
}

/// 2×2 max pooling, stride 2. Returns the pooled map and the argmax
/// position (0..4, row-major in the window) of every output.
pub fn maxpool2<T: Scalar>(x: &Act<T>) -> (Act<T>, Vec<u8>) {
    let (c, n, h, w) = (x.channels(), x.n, x.h, x.w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array2::<T>::zeros((c, n * oh * ow));
    let mut idx = vec![0u8; c * n * oh * ow];
    let xs = slice_of(&x.data);
    let os = out.as_slice_mut().expect("fresh array");
    for plane in 0..c * n {
        let src = plane * h * w;
        let dst = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let base = src + 2 * oy * w + 2 * ox;
                let cand = [xs[base], xs[base + 1], xs[base + w], xs[base + w + 1]];
                let mut k = 0;
                for j in 1..4 {
                    if cand[j] > cand[k] {
                        k = j;
                    }
                }
                os[dst + oy * ow + ox] = cand[k];
                idx[dst + oy * ow + ox] = k as u8;
            }
        }
    }
    (Act::new(out, n, oh, ow), idx)
}

pub fn maxpool2_backward<T: Scalar>(dout: &Array2<T>, idx: &[u8], n: usize, h: usize, w: usize) -> Array2<T> {
    let c = dout.nrows();
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Array2::<T>::zeros((c, n * h * w));
    let ds = slice_of(dout);
    let xs = dx.as_slice_mut().expect("fresh array");
    for plane in 0..c * n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = plane * oh * ow + oy * ow + ox;
                let k = idx[o] as usize;
                xs[plane * h * w + (2 * oy + k / 2) * w + 2 * ox + k % 2] += ds[o];
            }
        }
    }
    dx
}

/// 2×2 transposed convolution, stride 2. `w` is `(c_out·4, c_in)` with rows
/// ordered `(co, dy, dx)`.
pub fn upconv2<T: Scalar>(x: &Act<T>, w: &Array2<T>, b: &Array1<T>) -> Act<T> {
    let (n, h, wd) = (x.n, x.h, x.w);
    let cout = w.nrows() / 4;
    let y = w.dot(&x.data);
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = Array2::<T>::zeros((cout, n * oh * ow));
    let ys = slice_of(&y);
    let os = out.as_slice_mut().expect("fresh array");
    let cols = n * h * wd;
    for co in 0..cout {
        for k in 0..4 {
            let (dy, dx) = (k / 2, k % 2);
            let yrow = &ys[(co * 4 + k) * cols..(co * 4 + k + 1) * cols];
            for sn in 0..n {
                for yy in 0..h {
                    let dst = co * n * oh * ow + sn * oh * ow + (2 * yy + dy) * ow + dx;
                    let src = sn * h * wd + yy * wd;
                    for xx in 0..wd {
                        os[dst + 2 * xx] = yrow[src + xx] + b[co];
                    }
                }
            }
        }
    }
    Act::new(out, n, oh, ow)
}

pub fn upconv2_backward<T: Scalar>(x: &Act<T>, w: &Array2<T>, dout: &Array2<T>) -> (Array2<T>, Array2<T>, Array1<T>) {
    let (n, h, wd) = (x.n, x.h, x.w);
    let cout = w.nrows() / 4;
    let (oh, ow) = (2 * h, 2 * wd);
    let cols = n * h * wd;
    let mut dy = Array2::<T>::zeros((cout * 4, cols));
    let ds = slice_of(dout);
    let ys = dy.as_slice_mut().expect("fresh array");
    for co in 0..cout {
        for k in 0..4 {
            let (ky, kx) = (k / 2, k % 2);
            for sn in 0..n {
                for yy in 0..h {
                    let src = co * n * oh * ow + sn * oh * ow + (2 * yy + ky) * ow + kx;
                    let dst = (co * 4 + k) * cols + sn * h * wd + yy * wd;
                    for xx in 0..wd {
                        ys[dst + xx] = ds[src + 2 * xx];
                    }
                }
            }
        }
    }
    let dw = dy.dot(&x.data.t());
    let dx = w.t().dot(&dy);
    (dx, dw, dout.sum_axis(Axis(1)))
}

/// 1×1 convolution. `w` is `(c_out, c_in)`.
pub fn conv1<T: Scalar>(x: &Act<T>, w: &Array2<T>, b: &Array1<T>) -> Act<T> {
    let mut out = w.dot(&x.data);
    add_bias(&mut out, b);
    x.like(out)
}

pub fn conv1_backward<T: Scalar>(x: &Act<T>, w: &Array2<T>, dout: &Array2<T>) -> (Array2<T>, Array2<T>, Array1<T>) {
    (w.t().dot(dout), dout.dot(&x.data.t()), dout.sum_axis(Axis(1)))
}

pub fn relu_inplace<T: Scalar>(x: &mut Act<T>) {
    x.data.mapv_inplace(|v| v.max(T::zero()));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_inplace<T: Scalar>(dout: &mut Array2<T>, out: &Array2<T>) {
    dout.zip_mut_with(out, |d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
}

/// Inverted dropout mask: 0 with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask<T: Scalar>(shape: (usize, usize), rate: f64, rng: &mut impl Rng) -> Array2<T> {
    let keep = T::from_f64(1.0 / (1.0 - rate)).expect("finite scale");
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { T::zero() } else { keep })
}

pub fn concat_channels<T: Scalar>(a: &Act<T>, b: &Act<T>) -> Act<T> {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "merge inputs differ in size");
    a.like(concatenate(Axis(0), &[a.data.view(), b.data.view()]).expect("same column count"))
}

pub fn split_channels<T: Scalar>(d: &Array2<T>, first: usize) -> (Array2<T>, Array2<T>) {
    (d.slice(s![..first, ..]).to_owned(), d.slice(s![first.., ..]).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(c: usize, n: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Act<f64> {
        let data = Array2::from_shape_fn((c, n * h * w), |(i, j)| f(i * n * h * w + j));
        Act::new(data, n, h, w)
    }

    /// Direct-loop 3×3 convolution.
    fn naive_conv3(x: &Act<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
        let (c, n, h, wd) = (x.channels(), x.n, x.h, x.w);
        let co = w.nrows();
        let mut out = Array2::zeros((co, n * h * wd));
        for o in 0..co {
            for sn in 0..n {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[o];
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                        acc += w[[o, ci * 9 + ky * 3 + kx]] * x.data[[ci, sn * h * wd + sy as usize * wd + sx as usize]];
                                    }
                                }
                            }
                        }
                        out[[o, sn * h * wd + y * wd + xx]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3_matches_direct_loops() {
        let x = act(3, 2, 5, 7, |i| ((i * 37) % 11) as f64 - 5.0);
        let w = Array2::from_shape_fn((4, 27), |(i, j)| ((i * 27 + j) % 7) as f64 * 0.1 - 0.3);
        let b = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        let got = conv3(&x, &w, &b);
        let want = naive_conv3(&x, &w, &b);
        assert!((&got.data - &want).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn banded_conv_equals_single_pass() {
        // Wide enough that the im2col budget forces several bands.
        let x = act(2, 1, 40, 1 << 18, |i| ((i * 13) % 17) as f64);
        assert!(band_rows(2 * 9 * (1 << 18), 40) < 40);
        let w = Array2::from_shape_fn((1, 18), |(_, j)| j as f64 * 0.01);
        let b = Array1::from_vec(vec![0.5]);
        let got = conv3(&x, &w, &b);
        // Spot-check rows against a direct sum.
        for &(y, xx) in &[(0usize, 0usize), (13, 5000), (39, (1 << 18) - 1), (20, 1)] {
            let mut acc = 0.5;
            for ci in 0..2 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if sy >= 0 && sx >= 0 && sy < 40 && sx < (1 << 18) {
                            acc += w[[0, ci * 9 + ky * 3 + kx]] * x.data[[ci, sy as usize * (1 << 18) + sx as usize]];
                        }
                    }
                }
            }
            assert!((got.data[[0, y * (1 << 18) + xx]] - acc).abs() < 1e-9);
        }
    }

    #[test]
    fn pool_and_unpool() {
        let x = act(1, 1, 2, 4, |i| [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0][i]);
        let (p, idx) = maxpool2(&x);
        assert_eq!(p.data.as_slice().unwrap(), &[5.0, 9.0]);
        assert_eq!(idx, vec![1, 2]);
        let d = maxpool2_backward(&Array2::from_elem((1, 2), 1.0), &idx, 1, 2, 4);
        assert_eq!(d.as_slice().unwrap(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn upconv_places_kernel_taps() {
        let x = act(1, 1, 1, 2, |i| [1.0, 2.0][i]);
        let w = Array2::from_shape_vec((4, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upconv2(&x, &w, &Array1::from_vec(vec![0.0]));
        assert_eq!((y.h, y.w), (2, 4));
        assert_eq!(y.data.as_slice().unwrap(), &[1.0, 2.0, 2.0, 4.0, 3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn adjoint_identities() {
        // <conv(x), g> = <x, conv^T(g)> for the bias-free operator.
        let x = act(2, 2, 4, 6, |i| ((i * 7) % 5) as f64 - 2.0);
        let w = Array2::from_shape_fn((3, 18), |(i, j)| ((i + 2 * j) % 5) as f64 - 1.5);
        let g = Array2::from_shape_fn((3, 48), |(i, j)| ((i * 3 + j) % 4) as f64 - 1.0);
        let y = conv3(&x, &w, &Array1::zeros(3));
        let (dx, _, _) = conv3_backward(&x, &w, &g, true);
        let lhs: f64 = (&y.data * &g).sum();
        let rhs: f64 = (&x.data * &dx.unwrap()).sum();
        assert!((lhs - rhs).abs() < 1e-9);

        let wu = Array2::from_shape_fn((8, 2), |(i, j)| (i as f64) - (j as f64) * 0.5);
        let gu = Array2::from_shape_fn((2, 2 * 8 * 12), |(i, j)| ((i + j) % 3) as f64);
        let yu = upconv2(&x, &wu, &Array1::zeros(2));
        let (dxu, _, _) = upconv2_backward(&x, &wu, &gu);
        assert!(((&yu.data * &gu).sum() - (&x.data * &dxu).sum()).abs() < 1e-9);
    }
}

//! Forward operations and their analytic backward passes.
//!
//! All spatial operations take rank-4 `[N, C, H, W]` tensors. Backward functions
//! receive the upstream gradient with respect to the forward output plus whatever
//! the forward pass needs to be re-read, and return gradients with respect to
//! every input.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-major `c[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// Row-major `c[m×n] += aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_pi * bv;
            }
        }
    }
}

/// Row-major `c[m×n] += a · bᵀ` where `a` is `m×k` and `b` is stored `n×k`.
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let bt = transpose_slice(b, n, k);
    gemm_nn(m, k, n, a, &bt, c);
}

fn transpose_slice<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

/// Matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut out);
    Tensor::new([m, n], out)
}

/// Gradients of `matmul(a, b)`: `(dA, dB) = (dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = a.dims2()?;
    let (_, n) = b.dims2()?;
    if d_out.shape() != [m, n] {
        return Err(Error::shape(
            "matmul_backward",
            format!("{:?}", d_out.shape()),
        ));
    }
    let mut da = vec![T::zero(); m * k];
    gemm_nt(m, n, k, d_out.data(), b.data(), &mut da);
    let mut db = vec![T::zero(); k * n];
    gemm_tn(k, m, n, a.data(), d_out.data(), &mut db);
    Ok((Tensor::new([m, k], da)?, Tensor::new([k, n], db)?))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = m.dims2()?;
    if m.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax_rows input"));
    }
    let mut out = m.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new([rows, cols], out)
}

/// Backward of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = y.dims2()?;
    y.expect_same_shape(d_out, "softmax_rows_backward")?;
    let mut dx = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let yr = &y.data()[r * cols..(r + 1) * cols];
        let gr = &d_out.data()[r * cols..(r + 1) * cols];
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for j in 0..cols {
            dx[r * cols + j] = yr[j] * (gr[j] - dot);
        }
    }
    Tensor::new([rows, cols], dx)
}

/// A 2-D convolution: weights `[out, in, kh, kw]`, one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let (co, _, kh, kw) = weight.dims4()?;
        if bias.shape() != [co] {
            return Err(Error::shape(
                "conv kernel",
                format!("bias {:?} for {co} output channels", bias.shape()),
            ));
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::invalid(
                "conv stride and kernel extents must be >= 1",
            ));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn zeros(out_ch: usize, in_ch: usize, k: usize, padding: usize) -> Self {
        Self {
            weight: Tensor::zeros([out_ch, in_ch, k, k]),
            bias: Tensor::zeros([out_ch]),
            stride: 1,
            padding,
        }
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero bias, stride 1.
    pub fn he_normal<R: rand::Rng + ?Sized>(
        out_ch: usize,
        in_ch: usize,
        k: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let std = libm::sqrt(2.0 / (in_ch * k * k) as f64);
        let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
        Self {
            weight: Tensor::from_fn([out_ch, in_ch, k, k], |_| {
                T::from_f64(rand_distr::Distribution::sample(&normal, rng))
            }),
            bias: Tensor::zeros([out_ch]),
            stride: 1,
            padding,
        }
    }

    /// Pointwise kernel that copies input channel `i` to output channel `i`.
    pub fn identity(channels: usize) -> Self {
        let mut k = Self::zeros(channels, channels, 1, 0);
        for c in 0..channels {
            k.weight[c * channels + c] = T::one();
        }
        k
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    fn kernel_hw(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_hw();
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < kh || pw < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}"),
            ));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_hw() == (1, 1) && self.stride == 1 && self.padding == 0
    }

    pub fn cast<U: Scalar>(&self) -> ConvKernel<U> {
        ConvKernel {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source index range `[lo, hi)` of output positions along one axis whose
    /// input coordinate `o*stride + k - pad` stays inside `[0, len)`.
    fn valid_range(&self, k: usize, len: usize, out: usize) -> (usize, usize) {
        let mut lo = 0;
        while lo < out && (lo * self.stride + k) < self.pad {
            lo += 1;
        }
        let mut hi = lo;
        while hi < out && hi * self.stride + k < len + self.pad {
            hi += 1;
        }
        (lo, hi)
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let n = self.cols();
        cols.fill(T::zero());
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (y_lo, y_hi) = self.valid_range(ky, self.h, self.oh);
                for kx in 0..self.kw {
                    let (x_lo, x_hi) = self.valid_range(kx, self.w, self.ow);
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in y_lo..y_hi {
                        let iy = oy * self.stride + ky - self.pad;
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if self.stride == 1 {
                            let start = x_lo + kx - self.pad;
                            drow[x_lo..x_hi].copy_from_slice(&src[start..start + (x_hi - x_lo)]);
                        } else {
                            for ox in x_lo..x_hi {
                                drow[ox] = src[ox * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let n = self.cols();
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (y_lo, y_hi) = self.valid_range(ky, self.h, self.oh);
                for kx in 0..self.kw {
                    let (x_lo, x_hi) = self.valid_range(kx, self.w, self.ow);
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in y_lo..y_hi {
                        let iy = oy * self.stride + ky - self.pad;
                        let srow = &src[oy * self.ow..(oy + 1) * self.ow];
                        let drow = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for ox in x_lo..x_hi {
                            drow[ox * self.stride + kx - self.pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry<T: Scalar>(x: &Tensor<T>, k: &ConvKernel<T>) -> Result<(usize, ConvGeometry)> {
    let (n, c, h, w) = x.dims4()?;
    if c != k.in_channels() {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, kernel expects {}", k.in_channels()),
        ));
    }
    let (kh, kw) = k.kernel_hw();
    let (oh, ow) = k.output_hw(h, w)?;
    Ok((
        n,
        ConvGeometry {
            c,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            stride: k.stride,
            pad: k.padding,
        },
    ))
}

/// 2-D cross-correlation (the deep-learning "convolution").
pub fn conv2d<T: Scalar>(x: &Tensor<T>, k: &ConvKernel<T>) -> Result<Tensor<T>> {
    let (n, g) = conv_geometry(x, k)?;
    let co = k.out_channels();
    let (rows, cols_n) = (g.rows(), g.cols());
    let in_plane = g.c * g.h * g.w;
    let out_plane = co * cols_n;
    let mut out = vec![T::zero(); n * out_plane];
    let mut cols = if k.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols_n]
    };
    for b in 0..n {
        let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
        let ob = &mut out[b * out_plane..(b + 1) * out_plane];
        for (o, &bias) in k.bias.data().iter().enumerate() {
            ob[o * cols_n..(o + 1) * cols_n].fill(bias);
        }
        if k.is_pointwise() {
            gemm_nn(co, rows, cols_n, k.weight.data(), xb, ob);
        } else {
            g.im2col(xb, &mut cols);
            gemm_nn(co, rows, cols_n, k.weight.data(), &cols, ob);
        }
    }
    Tensor::new([n, co, g.oh, g.ow], out)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &ConvKernel<T>,
    d_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (n, g) = conv_geometry(x, k)?;
    let co = k.out_channels();
    if d_out.shape() != [n, co, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("gradient {:?}", d_out.shape()),
        ));
    }
    let (rows, cols_n) = (g.rows(), g.cols());
    let in_plane = g.c * g.h * g.w;
    let out_plane = co * cols_n;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); k.weight.len()];
    let mut db = vec![T::zero(); co];
    let pointwise = k.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { rows * cols_n }];
    let mut dcols = vec![T::zero(); if pointwise { 0 } else { rows * cols_n }];
    for b in 0..n {
        let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
        let gb = &d_out.data()[b * out_plane..(b + 1) * out_plane];
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += gb[o * cols_n..(o + 1) * cols_n].iter().copied().sum();
        }
        let dxb = &mut dx[b * in_plane..(b + 1) * in_plane];
        if pointwise {
            gemm_nt(co, cols_n, rows, gb, xb, &mut dw);
            gemm_tn(rows, co, cols_n, k.weight.data(), gb, dxb);
        } else {
            g.im2col(xb, &mut cols);
            gemm_nt(co, cols_n, rows, gb, &cols, &mut dw);
            dcols.fill(T::zero());
            gemm_tn(rows, co, cols_n, k.weight.data(), gb, &mut dcols);
            g.col2im(&dcols, dxb);
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(x.shape(), dx)?,
        weight: Tensor::new(k.weight.shape(), dw)?,
        bias: Tensor::new([co], db)?,
    })
}

/// Per-axis interpolation taps for align-corners-false bilinear resampling.
#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn bilinear_taps<T: Scalar>(src: usize, dst: usize) -> Vec<Tap<T>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (libm::floor(pos) as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: T::from_f64(pos - lo as f64),
            }
        })
        .collect()
}

/// Bilinear resize of every plane to `out_h × out_w` (align-corners-false).
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks_exact(h * w) {
        for ay in &ty {
            let r0 = &plane[ay.lo * w..(ay.lo + 1) * w];
            let r1 = &plane[ay.hi * w..(ay.hi + 1) * w];
            for ax in &tx {
                let top = r0[ax.lo] + (r0[ax.hi] - r0[ax.lo]) * ax.frac;
                let bot = r1[ax.lo] + (r1[ax.hi] - r1[ax.lo]) * ax.frac;
                out.push(top + (bot - top) * ay.frac);
            }
        }
    }
    Tensor::new([n, c, out_h, out_w], out)
}

/// Backward of [`bilinear_resize`]: scatters each output gradient to its four
/// source pixels with the forward weights.
pub fn bilinear_resize_backward<T: Scalar>(
    in_shape: &[usize],
    d_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = d_out.dims4()?;
    let (h, w) = match in_shape {
        [n2, c2, h, w] if *n2 == n && *c2 == c => (*h, *w),
        _ => {
            return Err(Error::shape(
                "bilinear_resize_backward",
                format!("{in_shape:?} vs {:?}", d_out.shape()),
            ))
        }
    };
    if (h, w) == (oh, ow) {
        return Ok(d_out.clone());
    }
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut dx = vec![T::zero(); n * c * h * w];
    let one = T::one();
    for (plane, gplane) in dx
        .chunks_exact_mut(h * w)
        .zip(d_out.data().chunks_exact(oh * ow))
    {
        for (oy, ay) in ty.iter().enumerate() {
            for (ox, ax) in tx.iter().enumerate() {
                let g = gplane[oy * ow + ox];
                let gy0 = g * (one - ay.frac);
                let gy1 = g * ay.frac;
                plane[ay.lo * w + ax.lo] += gy0 * (one - ax.frac);
                plane[ay.lo * w + ax.hi] += gy0 * ax.frac;
                plane[ay.hi * w + ax.lo] += gy1 * (one - ax.frac);
                plane[ay.hi * w + ax.hi] += gy1 * ax.frac;
            }
        }
    }
    Tensor::new([n, c, h, w], dx)
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Which statistics batch normalization standardizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    /// Batch statistics over `N×H×W` per channel.
    Train,
    /// Stored running statistics.
    Eval,
}

/// Per-channel affine batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
}

/// What the backward pass of [`batch_norm`] needs from the forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub mode: NormMode,
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full([channels], T::one()),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], T::one()),
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds the batch statistics of a training-mode forward pass into the
    /// running estimates (unbiased variance, exponential moving average).
    pub fn update_running(&mut self, cache: &BatchNormCache<T>, count: usize) {
        if cache.mode != NormMode::Train {
            return;
        }
        let m = T::from_f64(self.momentum);
        let keep = T::one() - m;
        let unbias = if count > 1 {
            T::from_usize(count) / T::from_usize(count - 1)
        } else {
            T::one()
        };
        for c in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = *rm * keep + cache.batch_mean[c] * m;
            let rv = &mut self.running_var.data_mut()[c];
            *rv = *rv * keep + cache.batch_var[c] * unbias * m;
        }
    }

    pub fn cast<U: Scalar>(&self) -> BatchNorm<U> {
        BatchNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            momentum: self.momentum,
        }
    }
}

pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    bn: &BatchNorm<T>,
    mode: NormMode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if bn.channels() != c {
        return Err(Error::shape(
            "batch_norm",
            format!("{c} channels, parameters for {}", bn.channels()),
        ));
    }
    let hw = h * w;
    let count = T::from_usize(n * hw);
    let eps = T::from_f64(BATCH_NORM_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    if mode == NormMode::Train {
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .copied()
                    .sum();
            }
            let mu = s / count;
            let mut sq = T::zero();
            for b in 0..n {
                for &v in &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    sq += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq / count;
        }
    } else {
        mean.copy_from_slice(bn.running_mean.data());
        var.copy_from_slice(bn.running_var.data());
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = x.clone();
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let (g, be) = (bn.gamma[ch], bn.beta[ch]);
            for i in range {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                normalized[i] = xh;
                out[i] = xh * g + be;
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            mode,
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

pub fn batch_norm_backward<T: Scalar>(
    bn: &BatchNorm<T>,
    cache: &BatchNormCache<T>,
    d_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let (n, c, h, w) = d_out.dims4()?;
    cache
        .normalized
        .expect_same_shape(d_out, "batch_norm_backward")?;
    let hw = h * w;
    let count = T::from_usize(n * hw);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dgamma[ch] += d_out[i] * cache.normalized[i];
                dbeta[ch] += d_out[i];
            }
        }
    }
    let mut dx = d_out.clone();
    for b in 0..n {
        for ch in 0..c {
            let g = bn.gamma[ch];
            let scale = g * cache.inv_std[ch];
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dx[i] = match cache.mode {
                    NormMode::Eval => d_out[i] * scale,
                    NormMode::Train => {
                        scale
                            * (d_out[i]
                                - dbeta[ch] / count
                                - cache.normalized[i] * dgamma[ch] / count)
                    }
                };
            }
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: Tensor::new([c], dgamma)?,
        beta: Tensor::new([c], dbeta)?,
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Backward of [`relu`] given its output.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(d_out, |yv, g| if yv > T::zero() { g } else { T::zero() })
}

/// Batch normalization followed by `max(x, 0)`.
pub fn batch_norm_relu<T: Scalar>(
    x: &Tensor<T>,
    bn: &BatchNorm<T>,
    mode: NormMode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (y, cache) = batch_norm(x, bn, mode)?;
    Ok((relu(&y), cache))
}

pub fn batch_norm_relu_backward<T: Scalar>(
    bn: &BatchNorm<T>,
    cache: &BatchNormCache<T>,
    y: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let d_bn = relu_backward(y, d_out)?;
    batch_norm_backward(bn, cache, &d_bn)
}

/// 2×2 max pooling with stride 2. Returns the output and the flat input index
/// of every selected maximum (first maximum wins on ties).
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("max_pool2", format!("odd extent {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, argmax))
}

pub fn max_pool2_backward<T: Scalar>(
    in_shape: &[usize],
    argmax: &[usize],
    d_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != d_out.len() {
        return Err(Error::shape("max_pool2_backward", "argmax length"));
    }
    let mut dx = Tensor::zeros(in_shape);
    for (&i, &g) in argmax.iter().zip(d_out.data()) {
        dx[i] += g;
    }
    Ok(dx)
}

/// Spatial mean of every plane: `[N, C, H, W] → [N, C, 1, 1]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = T::from_usize(h * w);
    let data = x
        .data()
        .chunks_exact(h * w)
        .map(|p| p.iter().copied().sum::<T>() / hw)
        .collect();
    Tensor::new([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    in_shape: &[usize],
    d_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w) = match in_shape {
        [_, _, h, w] => (*h, *w),
        _ => return Err(Error::shape("global_avg_pool_backward", "rank")),
    };
    let hw = T::from_usize(h * w);
    let mut data = Vec::with_capacity(d_out.len() * h * w);
    for &g in d_out.data() {
        data.extend(core::iter::repeat_n(g / hw, h * w));
    }
    Tensor::new(in_shape, data)
}

/// Concatenates two batches along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (pa, pb) = (ca * h * w, cb * h * w);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * pa..(i + 1) * pa]);
        data.extend_from_slice(&b.data()[i * pb..(i + 1) * pb]);
    }
    Tensor::new([n, ca + cb, h, w], data)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if first == 0 || first >= c {
        return Err(Error::shape("split_channels", format!("{first} of {c}")));
    }
    let (pa, pb) = (first * h * w, (c - first) * h * w);
    let mut a = Vec::with_capacity(n * pa);
    let mut b = Vec::with_capacity(n * pb);
    for chunk in x.data().chunks_exact(pa + pb) {
        a.extend_from_slice(&chunk[..pa]);
        b.extend_from_slice(&chunk[pa..]);
    }
    Ok((
        Tensor::new([n, first, h, w], a)?,
        Tensor::new([n, c - first, h, w], b)?,
    ))
}

/// Mirrors every plane left-to-right.
pub fn flip_horizontal<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, _, w) = x.dims4()?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Nested-loop convolution oracle.
    fn conv_oracle(x: &Tensor<f64>, k: &ConvKernel<f64>) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4().unwrap();
        let (co, _, kh, kw) = k.weight.dims4().unwrap();
        let (oh, ow) = k.output_hw(h, w).unwrap();
        let mut out = Tensor::zeros([n, co, oh, ow]);
        for b in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = k.bias[o];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * k.stride + ky) as isize - k.padding as isize;
                                    let ix = (ox * k.stride + kx) as isize - k.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    s += k.weight[((o * c + ci) * kh + ky) * kw + kx]
                                        * x[((b * c + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out[((b * co + o) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 1, 3, 4], &mut rng);
        let k = ConvKernel::new(Tensor::full([1, 1, 1, 1], 1.0), Tensor::zeros([1]), 1, 0).unwrap();
        assert_eq!(conv2d(&x, &k).unwrap(), x);
    }

    #[test]
    fn constant_input_all_ones_kernel() {
        let x = Tensor::<f64>::full([1, 1, 5, 5], 0.7);
        let k = ConvKernel::new(Tensor::full([1, 1, 3, 3], 1.0), Tensor::zeros([1]), 1, 1).unwrap();
        let y = conv2d(&x, &k).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert!((y[yy * 5 + xx] - 6.3).abs() < 1e-12);
            }
        }
        // corner sees four taps
        assert!((y[0] - 2.8).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 1, 4, 4], &mut rng);
        let k = ConvKernel::new(
            random(&[1, 1, 3, 3], &mut rng),
            random(&[1], &mut rng),
            1,
            0,
        )
        .unwrap();
        let y = conv2d(&x, &k).unwrap();
        assert!(y.max_abs_diff(&conv_oracle(&x, &k)).unwrap() < 1e-12);

        for (stride, pad) in [(1, 1), (2, 1), (2, 0), (3, 2)] {
            let x = random(&[2, 3, 7, 6], &mut rng);
            let k = ConvKernel::new(
                random(&[4, 3, 3, 3], &mut rng),
                random(&[4], &mut rng),
                stride,
                pad,
            )
            .unwrap();
            let y = conv2d(&x, &k).unwrap();
            assert!(y.max_abs_diff(&conv_oracle(&x, &k)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_empty_output() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let k = ConvKernel::<f32>::zeros(1, 3, 3, 1);
        assert!(matches!(conv2d(&x, &k), Err(Error::Shape { .. })));
        let k = ConvKernel::<f32>::zeros(1, 2, 5, 0);
        assert!(matches!(conv2d(&x, &k), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_identity_zero_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[2, 3], &mut rng);
        let eye = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let zero = Tensor::<f64>::zeros([3, 2]);
        assert!(matmul(&a, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        let b = random(&[3, 2], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..3 {
                    s += a[i * 3 + p] * b[p * 2 + j];
                }
                assert!((c[i * 2 + j] - s).abs() < 1e-14);
            }
        }
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::<f64>::new([1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        for c in [-50.0, 0.0, 3.0, 700.0] {
            let s = softmax_rows(&Tensor::<f64>::full([1, 3], c)).unwrap();
            assert!(s.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        }
        let s = softmax_rows(&Tensor::<f64>::new([1, 2], vec![0.0, 3f64.ln()]).unwrap()).unwrap();
        assert!((s[0] - 0.25).abs() < 1e-12 && (s[1] - 0.75).abs() < 1e-12);
        assert!(softmax_rows(&Tensor::<f64>::new([1, 2], vec![0.0, f64::NAN]).unwrap()).is_err());
    }

    #[test]
    fn resize_identity_constant_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 2, 3, 5], &mut rng);
        assert_eq!(bilinear_resize(&x, 3, 5).unwrap(), x);
        let c = Tensor::<f64>::full([1, 1, 3, 4], 2.5);
        for (h, w) in [(1, 1), (7, 2), (16, 16)] {
            let y = bilinear_resize(&c, h, w).unwrap();
            assert!(y.data().iter().all(|&v| v == 2.5));
        }

        // Hand-evaluated: for 2 -> 4 the source coordinates are
        // (-0.25 -> 0), 0.25, 0.75, (1.25 -> clamped hi), giving per-axis
        // weights on the two samples of (1,0), (.75,.25), (.25,.75), (0,1).
        let x = Tensor::<f64>::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let wts = [(1.0, 0.0), (0.75, 0.25), (0.25, 0.75), (0.0, 1.0)];
        for (oy, &(y0, y1)) in wts.iter().enumerate() {
            for (ox, &(x0, x1)) in wts.iter().enumerate() {
                let expect = y0 * (x0 * 0.0 + x1 * 1.0) + y1 * (x0 * 2.0 + x1 * 3.0);
                assert!((y[oy * 4 + ox] - expect).abs() < 1e-12, "({oy},{ox})");
            }
        }
    }

    #[test]
    fn batch_norm_examples() {
        // zero-mean, unit-variance channel
        let x = Tensor::<f64>::new([1, 1, 2, 2], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let bn = BatchNorm::new(1);
        let (y, _) = batch_norm_relu(&x, &bn, NormMode::Train).unwrap();
        let s = 1.0 / (1.0 + BATCH_NORM_EPS).sqrt();
        assert!(
            y.max_abs_diff(&Tensor::new([1, 1, 2, 2], vec![0.0, s, 0.0, s]).unwrap())
                .unwrap()
                < 1e-12
        );

        // constant channel collapses to beta
        let mut bn = BatchNorm::<f64>::new(1);
        bn.beta[0] = 0.3;
        let (y, _) =
            batch_norm_relu(&Tensor::full([2, 1, 3, 3], 4.0), &bn, NormMode::Train).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));

        // statistics oracle on a random 2-channel map
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 2, 3, 3], &mut rng);
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma = Tensor::new([2], vec![1.5, -0.5]).unwrap();
        bn.beta = Tensor::new([2], vec![0.1, 0.2]).unwrap();
        let (y, _) = batch_norm_relu(&x, &bn, NormMode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| x.data()[(b * 2 + ch) * 9..(b * 2 + ch + 1) * 9].to_vec())
                .collect();
            let mu = vals.iter().sum::<f64>() / 18.0;
            let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 18.0;
            for b in 0..2 {
                for i in 0..9 {
                    let idx = (b * 2 + ch) * 9 + i;
                    let expect =
                        ((x[idx] - mu) / (var + 1e-5).sqrt() * bn.gamma[ch] + bn.beta[ch]).max(0.0);
                    assert!((y[idx] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn running_stats_follow_batches() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = Tensor::new([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let (_, cache) = batch_norm(&x, &bn, NormMode::Train).unwrap();
        bn.update_running(&cache, 2);
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-12);
        // unbiased variance of {1, 3} is 2
        assert!((bn.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
        let (y, _) = batch_norm(&x, &bn, NormMode::Eval).unwrap();
        assert!((y[0] - (1.0 - 0.2) / (1.1f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn max_pool_and_concat() {
        let x = Tensor::<f64>::new([1, 1, 2, 4], vec![1., 5., 2., 2., 3., 4., 0., 9.]).unwrap();
        let (y, idx) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[5., 9.]);
        assert_eq!(idx, [1, 7]);
        let dx = max_pool2_backward(
            x.shape(),
            &idx,
            &Tensor::new([1, 1, 1, 2], vec![1., 2.]).unwrap(),
        )
        .unwrap();
        assert_eq!(dx.data(), &[0., 1., 0., 0., 0., 0., 0., 2.]);

        let a = Tensor::<f64>::full([2, 1, 2, 2], 1.0);
        let b = Tensor::<f64>::full([2, 2, 2, 2], 2.0);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2, 2]);
        let (a2, b2) = split_channels(&c, 1).unwrap();
        assert_eq!((a2, b2), (a, b));
    }
}

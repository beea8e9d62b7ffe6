//! Spatial and channel self-attention.
//!
//! The spatial module compares every pixel with every other pixel of a feature
//! map and replaces each pixel's feature by an affinity-weighted sum of all
//! pixels' value features, added back onto the input. The channel module does
//! the same across feature channels and has no learned parameters.
//!
//! Both modules operate per batch item on `[N, C, H, W]` tensors. A `C×H×W` map
//! is flattened to `C×(H·W)` in row-major order, so pixel `(y, x)` is column
//! `y·W + x`.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, ConvKernel};
use crate::tensor::{Scalar, Tensor};

/// Learned 1×1 projections of the spatial attention module.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttentionParams<T = f32> {
    pub query: ConvKernel<T>,
    pub key: ConvKernel<T>,
    pub value: ConvKernel<T>,
    /// Maps the attended value features back to the input width so the
    /// residual sum is well-typed.
    pub output: ConvKernel<T>,
}

impl<T: Scalar> SpatialAttentionParams<T> {
    /// `reduced` is the query/key width, `value_channels` the value width. The
    /// output projection starts as the identity when `value_channels == channels`.
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        reduced: usize,
        value_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 || reduced == 0 || value_channels == 0 {
            return Err(Error::invalid("attention widths must be >= 1"));
        }
        let query = ConvKernel::he_normal(reduced, channels, 1, 0, rng);
        let key = ConvKernel::he_normal(reduced, channels, 1, 0, rng);
        let value = ConvKernel::he_normal(value_channels, channels, 1, 0, rng);
        let output = if value_channels == channels {
            ConvKernel::identity(channels)
        } else {
            ConvKernel::he_normal(channels, value_channels, 1, 0, rng)
        };
        Ok(Self {
            query,
            key,
            value,
            output,
        })
    }

    /// Default query/key width: an eighth of the input width, at least 1.
    pub fn default_reduced(channels: usize) -> usize {
        (channels / 8).max(1)
    }

    pub fn channels(&self) -> usize {
        self.query.in_channels()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            output: self.output.zeros_like(),
        }
    }

    pub fn kernels(&self) -> [(&'static str, &ConvKernel<T>); 4] {
        [
            ("query", &self.query),
            ("key", &self.key),
            ("value", &self.value),
            ("output", &self.output),
        ]
    }

    pub fn kernels_mut(&mut self) -> [(&'static str, &mut ConvKernel<T>); 4] {
        [
            ("query", &mut self.query),
            ("key", &mut self.key),
            ("value", &mut self.value),
            ("output", &mut self.output),
        ]
    }

    pub fn cast<U: Scalar>(&self) -> SpatialAttentionParams<U> {
        SpatialAttentionParams {
            query: self.query.cast(),
            key: self.key.cast(),
            value: self.value.cast(),
            output: self.output.cast(),
        }
    }

    fn check_input(&self, a: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let dims = a.dims4()?;
        if dims.1 != self.channels() {
            return Err(Error::shape(
                "spatial_attention",
                alloc::format!("{} channels, module built for {}", dims.1, self.channels()),
            ));
        }
        Ok(dims)
    }
}

fn item_matrix<T: Scalar>(x: &Tensor<T>, b: usize) -> Result<Tensor<T>> {
    let (_, c, h, w) = x.dims4()?;
    let plane = c * h * w;
    Tensor::new([c, h * w], x.data()[b * plane..(b + 1) * plane].to_vec())
}

fn row_normalized_affinity<T: Scalar>(keys: &Tensor<T>, queries: &Tensor<T>) -> Result<Tensor<T>> {
    // keys: C'×N, queries: C'×N → logits[j][i] = k_j · q_i
    let logits = ops::matmul(&keys.transpose2d()?, queries)?;
    ops::softmax_rows(&logits)
}

/// Spatial affinity `S` (`N×N`) for every batch item. Row `j` is the
/// distribution over source pixels `i`: `S[j][i] ∝ exp(q_i · k_j)`.
pub fn spatial_affinity<T: Scalar>(
    a: &Tensor<T>,
    params: &SpatialAttentionParams<T>,
) -> Result<Vec<Tensor<T>>> {
    let (n, ..) = params.check_input(a)?;
    let q = ops::conv2d(a, &params.query)?;
    let k = ops::conv2d(a, &params.key)?;
    (0..n)
        .map(|b| row_normalized_affinity(&item_matrix(&k, b)?, &item_matrix(&q, b)?))
        .collect()
}

/// Intermediates of a spatial attention forward pass.
#[derive(Debug, Clone)]
pub struct SpatialAttentionCache<T> {
    query: Tensor<T>,
    key: Tensor<T>,
    value: Tensor<T>,
    affinity: Vec<Tensor<T>>,
    attended: Tensor<T>,
}

impl<T: Scalar> SpatialAttentionCache<T> {
    pub fn affinity(&self) -> &[Tensor<T>] {
        &self.affinity
    }
}

/// `F = output(V′·Sᵀ) + A`.
pub fn spatial_attention<T: Scalar>(
    a: &Tensor<T>,
    params: &SpatialAttentionParams<T>,
) -> Result<Tensor<T>> {
    spatial_attention_forward(a, params).map(|(f, _)| f)
}

pub fn spatial_attention_forward<T: Scalar>(
    a: &Tensor<T>,
    params: &SpatialAttentionParams<T>,
) -> Result<(Tensor<T>, SpatialAttentionCache<T>)> {
    let (n, _, h, w) = params.check_input(a)?;
    let query = ops::conv2d(a, &params.query)?;
    let key = ops::conv2d(a, &params.key)?;
    let value = ops::conv2d(a, &params.value)?;
    let cv = params.value.out_channels();
    let mut affinity = Vec::with_capacity(n);
    let mut attended = Vec::with_capacity(value.len());
    for b in 0..n {
        let s = row_normalized_affinity(&item_matrix(&key, b)?, &item_matrix(&query, b)?)?;
        let z = ops::matmul(&item_matrix(&value, b)?, &s.transpose2d()?)?;
        attended.extend_from_slice(z.data());
        affinity.push(s);
    }
    let attended = Tensor::new([n, cv, h, w], attended)?;
    let projected = ops::conv2d(&attended, &params.output)?;
    let out = projected.add(a)?;
    Ok((
        out,
        SpatialAttentionCache {
            query,
            key,
            value,
            affinity,
            attended,
        },
    ))
}

/// Returns the input gradient and accumulates parameter gradients into `grads`.
pub fn spatial_attention_backward<T: Scalar>(
    a: &Tensor<T>,
    params: &SpatialAttentionParams<T>,
    cache: &SpatialAttentionCache<T>,
    d_out: &Tensor<T>,
    grads: &mut SpatialAttentionParams<T>,
) -> Result<Tensor<T>> {
    let (n, _, h, w) = params.check_input(a)?;
    a.expect_same_shape(d_out, "spatial_attention_backward")?;
    let out_g = ops::conv2d_backward(&cache.attended, &params.output, d_out)?;
    accumulate_conv(&mut grads.output, &out_g)?;

    let cq = params.query.out_channels();
    let cv = params.value.out_channels();
    let mut dq = Vec::with_capacity(n * cq * h * w);
    let mut dk = Vec::with_capacity(n * cq * h * w);
    let mut dv = Vec::with_capacity(n * cv * h * w);
    for b in 0..n {
        let s = &cache.affinity[b];
        let v = item_matrix(&cache.value, b)?;
        let dz = item_matrix(&out_g.input, b)?;
        // z = v · sᵀ
        let st = s.transpose2d()?;
        let (dv_b, dst) = ops::matmul_backward(&v, &st, &dz)?;
        let ds = dst.transpose2d()?;
        let dlogits = ops::softmax_rows_backward(s, &ds)?;
        // logits = kᵀ · q
        let k = item_matrix(&cache.key, b)?;
        let q = item_matrix(&cache.query, b)?;
        let (dkt, dq_b) = ops::matmul_backward(&k.transpose2d()?, &q, &dlogits)?;
        dq.extend_from_slice(dq_b.data());
        dk.extend_from_slice(dkt.transpose2d()?.data());
        dv.extend_from_slice(dv_b.data());
    }
    let dq = Tensor::new([n, cq, h, w], dq)?;
    let dk = Tensor::new([n, cq, h, w], dk)?;
    let dv = Tensor::new([n, cv, h, w], dv)?;

    let mut da = d_out.clone();
    for (kernel, grad_kernel, d) in [
        (&params.query, &mut grads.query, &dq),
        (&params.key, &mut grads.key, &dk),
        (&params.value, &mut grads.value, &dv),
    ] {
        let g = ops::conv2d_backward(a, kernel, d)?;
        accumulate_conv(grad_kernel, &g)?;
        da.accumulate(&g.input)?;
    }
    Ok(da)
}

pub(crate) fn accumulate_conv<T: Scalar>(
    target: &mut ConvKernel<T>,
    g: &ops::ConvGrads<T>,
) -> Result<()> {
    target.weight.accumulate(&g.weight)?;
    target.bias.accumulate(&g.bias)
}

/// Channel affinity `S` (`C×C`) per batch item: row `y` is the softmax over
/// source channels `x` of `F_x · F_y`.
pub fn channel_affinity<T: Scalar>(a: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let (n, ..) = a.dims4()?;
    (0..n)
        .map(|b| {
            let f = item_matrix(a, b)?;
            channel_logits(&f).and_then(|l| ops::softmax_rows(&l))
        })
        .collect()
}

fn channel_logits<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, n) = f.dims2()?;
    let mut out = alloc::vec![T::zero(); c * c];
    ops::gemm_nt(c, n, c, f.data(), f.data(), &mut out);
    Tensor::new([c, c], out)
}

#[derive(Debug, Clone)]
pub struct ChannelAttentionCache<T> {
    affinity: Vec<Tensor<T>>,
}

impl<T: Scalar> ChannelAttentionCache<T> {
    pub fn affinity(&self) -> &[Tensor<T>] {
        &self.affinity
    }
}

/// `F = S·A + A` with `A` flattened to `C×N`.
pub fn channel_attention<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    channel_attention_forward(a).map(|(f, _)| f)
}

pub fn channel_attention_forward<T: Scalar>(
    a: &Tensor<T>,
) -> Result<(Tensor<T>, ChannelAttentionCache<T>)> {
    let (n, ..) = a.dims4()?;
    let mut out = Vec::with_capacity(a.len());
    let mut affinity = Vec::with_capacity(n);
    for b in 0..n {
        let f = item_matrix(a, b)?;
        let s = ops::softmax_rows(&channel_logits(&f)?)?;
        let z = ops::matmul(&s, &f)?;
        out.extend(z.data().iter().zip(f.data()).map(|(&zv, &fv)| zv + fv));
        affinity.push(s);
    }
    Ok((
        Tensor::new(a.shape(), out)?,
        ChannelAttentionCache { affinity },
    ))
}

pub fn channel_attention_backward<T: Scalar>(
    a: &Tensor<T>,
    cache: &ChannelAttentionCache<T>,
    d_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, ..) = a.dims4()?;
    a.expect_same_shape(d_out, "channel_attention_backward")?;
    let mut da = Vec::with_capacity(a.len());
    for b in 0..n {
        let f = item_matrix(a, b)?;
        let dz = item_matrix(d_out, b)?;
        let s = &cache.affinity[b];
        // z = s · f
        let (ds, df_value) = ops::matmul_backward(s, &f, &dz)?;
        let dl = ops::softmax_rows_backward(s, &ds)?;
        // logits = f · fᵀ, so df = (dl + dlᵀ) · f
        let sym = dl.add(&dl.transpose2d()?)?;
        let df_logits = ops::matmul(&sym, &f)?;
        for ((&g, &v), &l) in dz.data().iter().zip(df_value.data()).zip(df_logits.data()) {
            da.push(g + v + l);
        }
    }
    Tensor::new(a.shape(), da)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn random_params(c: usize, cq: usize, rng: &mut ChaCha8Rng) -> SpatialAttentionParams<f64> {
        let mut p = SpatialAttentionParams::init(c, cq, c, rng).unwrap();
        for (_, k) in p.kernels_mut() {
            for v in k.weight.data_mut().iter_mut().chain(k.bias.data_mut()) {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        p
    }

    fn pointwise(k: &ConvKernel<f64>, a: &Tensor<f64>, pixel: usize) -> Vec<f64> {
        let (_, c, h, w) = a.dims4().unwrap();
        (0..k.out_channels())
            .map(|o| {
                k.bias[o]
                    + (0..c)
                        .map(|ci| k.weight[o * c + ci] * a[ci * h * w + pixel])
                        .sum::<f64>()
            })
            .collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn single_pixel_affinity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[1, 3, 1, 1], &mut rng);
        let p = random_params(3, 2, &mut rng);
        let s = spatial_affinity(&a, &p).unwrap();
        assert_eq!(s[0].data(), &[1.0]);
        // N = 1: F = output(V) + A
        let f = spatial_attention(&a, &p).unwrap();
        let v = pointwise(&p.value, &a, 0);
        let v = Tensor::new([1, 3, 1, 1], v).unwrap();
        let expect = ops::conv2d(&v, &p.output).unwrap().add(&a).unwrap();
        assert!(f.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn identical_pixels_give_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(2, 2, &mut rng);
        let a = Tensor::from_fn([1, 2, 3, 3], |i| if i < 9 { 0.4 } else { -0.7 });
        let s = &spatial_affinity(&a, &p).unwrap()[0];
        assert!(s.data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-12));
    }

    #[test]
    fn spatial_affinity_matches_direct_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[1, 2, 2, 2], &mut rng);
        let p = random_params(2, 2, &mut rng);
        let s = &spatial_affinity(&a, &p).unwrap()[0];
        let q: Vec<Vec<f64>> = (0..4).map(|i| pointwise(&p.query, &a, i)).collect();
        let k: Vec<Vec<f64>> = (0..4).map(|i| pointwise(&p.key, &a, i)).collect();
        for j in 0..4 {
            let denom: f64 = (0..4).map(|i| libm::exp(dot(&q[i], &k[j]))).sum();
            for i in 0..4 {
                let expect = libm::exp(dot(&q[i], &k[j])) / denom;
                assert!((s[j * 4 + i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_attention_matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&[1, 2, 2, 2], &mut rng);
        let p = random_params(2, 1, &mut rng);
        let f = spatial_attention(&a, &p).unwrap();
        let s = &spatial_affinity(&a, &p).unwrap()[0];
        let v: Vec<Vec<f64>> = (0..4).map(|i| pointwise(&p.value, &a, i)).collect();
        for j in 0..4 {
            let attended: Vec<f64> = (0..2)
                .map(|c| (0..4).map(|i| s[j * 4 + i] * v[i][c]).sum())
                .collect();
            for o in 0..2 {
                let proj = p.output.bias[o]
                    + (0..2)
                        .map(|c| p.output.weight[o * 2 + c] * attended[c])
                        .sum::<f64>();
                let expect = proj + a[o * 4 + j];
                assert!((f[o * 4 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[2, 4, 3, 2], &mut rng);
        let mut p = random_params(4, 2, &mut rng);
        p.value = p.value.zeros_like();
        p.output.bias.fill(0.0);
        assert_eq!(spatial_attention(&a, &p).unwrap(), a);
    }

    #[test]
    fn channel_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random(&[1, 1, 3, 3], &mut rng);
        assert_eq!(channel_affinity(&a).unwrap()[0].data(), &[1.0]);
        assert!(
            channel_attention(&a)
                .unwrap()
                .max_abs_diff(&a.scale(2.0))
                .unwrap()
                < 1e-15
        );

        let plane: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let same = Tensor::from_fn([1, 3, 2, 2], |i| plane[i % 4]);
        let s = &channel_affinity(&same).unwrap()[0];
        assert!(s.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert!(
            channel_attention(&same)
                .unwrap()
                .max_abs_diff(&same.scale(2.0))
                .unwrap()
                < 1e-12
        );
    }

    #[test]
    fn channel_attention_matches_direct_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[1, 2, 2, 2], &mut rng);
        let chan = |c: usize| &a.data()[c * 4..(c + 1) * 4];
        let s = &channel_affinity(&a).unwrap()[0];
        let f = channel_attention(&a).unwrap();
        for y in 0..2 {
            let denom: f64 = (0..2).map(|x| libm::exp(dot(chan(x), chan(y)))).sum();
            for x in 0..2 {
                let expect = libm::exp(dot(chan(x), chan(y))) / denom;
                assert!((s[y * 2 + x] - expect).abs() < 1e-12);
            }
            for p in 0..4 {
                let expect = (0..2).map(|x| s[y * 2 + x] * chan(x)[p]).sum::<f64>() + chan(y)[p];
                assert!((f[y * 4 + p] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_params(3, 1, &mut rng);
        assert!(spatial_attention(&Tensor::<f64>::zeros([1, 2, 2, 2]), &p).is_err());
        assert!(SpatialAttentionParams::<f64>::init(3, 0, 3, &mut rng).is_err());
        assert_eq!(vec![SpatialAttentionParams::<f32>::default_reduced(4)], [1]);
    }
}

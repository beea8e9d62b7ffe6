use alloc::format;
use alloc::vec::Vec;

use super::{Aenet, FusionParams, OUTPUT_STRIDE};
use crate::attention::{self, accumulate_conv, ChannelAttentionCache, SpatialAttentionCache};
use crate::error::{Error, Result};
use crate::ops::{self, BatchNormCache, ConvKernel, NormMode};
use crate::tensor::{Scalar, Tensor};

enum EncoderStep<T> {
    Conv {
        input: Tensor<T>,
        output: Tensor<T>,
    },
    Pool {
        in_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
}

struct DecoderCache<T> {
    in_shape: Vec<usize>,
    upsampled: Tensor<T>,
    output: Tensor<T>,
    norm: BatchNormCache<T>,
}

struct FusionCache<T> {
    image: Tensor<T>,
    low: Tensor<T>,
    low_norm: BatchNormCache<T>,
    v1: Tensor<T>,
    high: Tensor<T>,
    concat: Tensor<T>,
    low_map: Tensor<T>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache<T> {
    mode: NormMode,
    encoder: Vec<EncoderStep<T>>,
    f1: Tensor<T>,
    sam: Option<SpatialAttentionCache<T>>,
    decoder: Vec<DecoderCache<T>>,
    decoded: Tensor<T>,
    cam: Option<ChannelAttentionCache<T>>,
    f2: Tensor<T>,
    fusion: Option<FusionCache<T>>,
    head_input: Tensor<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Deepest encoder feature map (output stride 16).
    pub fn f1(&self) -> &Tensor<T> {
        &self.f1
    }

    /// Decoder output after channel attention (full resolution).
    pub fn f2(&self) -> &Tensor<T> {
        &self.f2
    }

    pub fn spatial_affinity(&self) -> Option<&[Tensor<T>]> {
        self.sam.as_ref().map(|c| c.affinity())
    }

    pub fn channel_affinity(&self) -> Option<&[Tensor<T>]> {
        self.cam.as_ref().map(|c| c.affinity())
    }
}

/// Softmax probability of class 0 (cell) from `[N, 2, H, W]` logits.
pub fn cell_probability<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = logits.dims4()?;
    if c != 2 {
        return Err(Error::shape(
            "cell_probability",
            format!("{c} logit channels"),
        ));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        let base = b * 2 * hw;
        for i in 0..hw {
            let (cell, bg) = (logits[base + i], logits[base + hw + i]);
            // 1 / (1 + e^(bg - cell)) is the two-way softmax
            out.push(T::one() / (T::one() + (bg - cell).exp()));
        }
    }
    Tensor::new([n, 1, h, w], out)
}

fn conv_relu<T: Scalar>(x: &Tensor<T>, k: &ConvKernel<T>) -> Result<Tensor<T>> {
    Ok(ops::relu(&ops::conv2d(x, k)?))
}

impl<T: Scalar> Aenet<T> {
    fn check_image(&self, image: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::shape(
                "aenet",
                format!("{c} input channels, expected 3"),
            ));
        }
        if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(Error::shape(
                "aenet",
                format!("input {h}x{w} is not divisible by {OUTPUT_STRIDE}"),
            ));
        }
        Ok((n, h, w))
    }

    fn encode(&self, image: &Tensor<T>, keep: bool) -> Result<(Tensor<T>, Vec<EncoderStep<T>>)> {
        self.check_image(image)?;
        let mut steps = Vec::new();
        let mut x = image.clone();
        let mut layer = 0;
        let last_stage = super::VGG16_STAGE_DEPTHS.len() - 1;
        for (stage, &depth) in super::VGG16_STAGE_DEPTHS.iter().enumerate() {
            for _ in 0..depth {
                let y = conv_relu(&x, &self.encoder[layer])?;
                layer += 1;
                if keep {
                    steps.push(EncoderStep::Conv {
                        input: x,
                        output: y.clone(),
                    });
                }
                x = y;
            }
            if stage < last_stage {
                let (y, argmax) = ops::max_pool2(&x)?;
                if keep {
                    steps.push(EncoderStep::Pool {
                        in_shape: x.shape().to_vec(),
                        argmax,
                    });
                }
                x = y;
            }
        }
        Ok((x, steps))
    }

    /// Deepest feature map `f1` at 1/16 resolution and its global average `v1`
    /// (`[N, top_width, 1, 1]`).
    pub fn encoder_forward(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (f1, _) = self.encode(image, false)?;
        let v1 = ops::global_avg_pool(&f1)?;
        Ok((f1, v1))
    }

    fn decode(
        &self,
        f: &Tensor<T>,
        out_h: usize,
        out_w: usize,
        mode: NormMode,
    ) -> Result<(Tensor<T>, Vec<DecoderCache<T>>)> {
        let targets = [(out_h / 4, out_w / 4), (out_h, out_w)];
        let mut caches = Vec::with_capacity(self.decoder.len());
        let mut x = f.clone();
        for (stage, &(th, tw)) in self.decoder.iter().zip(&targets) {
            let upsampled = ops::bilinear_resize(&x, th, tw)?;
            let conv = ops::conv2d(&upsampled, &stage.conv)?;
            let (output, norm) = ops::batch_norm_relu(&conv, &stage.norm, mode)?;
            caches.push(DecoderCache {
                in_shape: x.shape().to_vec(),
                upsampled,
                output: output.clone(),
                norm,
            });
            x = output;
        }
        Ok((x, caches))
    }

    /// Two stages of ×4 bilinear upsampling, 3×3 convolution, batch norm and
    /// ReLU, ending at `out_h × out_w`.
    pub fn decoder_forward(
        &self,
        f: &Tensor<T>,
        out_h: usize,
        out_w: usize,
        mode: NormMode,
    ) -> Result<Tensor<T>> {
        self.decode(f, out_h, out_w, mode).map(|(x, _)| x)
    }

    fn fuse(
        fusion: &FusionParams<T>,
        head: &ConvKernel<T>,
        image: &Tensor<T>,
        f2: &Tensor<T>,
        v1: &Tensor<T>,
        mode: NormMode,
    ) -> Result<(Tensor<T>, FusionCache<T>, Tensor<T>)> {
        let (n, _, h, w) = image.dims4()?;
        let (n2, _, h2, w2) = f2.dims4()?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::shape(
                "feature_fusion",
                format!(
                    "image {:?} vs decoder features {:?}",
                    image.shape(),
                    f2.shape()
                ),
            ));
        }
        let (low, low_norm) =
            ops::batch_norm_relu(&ops::conv2d(image, &fusion.low)?, &fusion.low_norm, mode)?;
        let high = ops::conv2d(v1, &fusion.high)?;
        let concat = ops::concat_channels(&low, f2)?;
        let low_map = ops::conv2d(&concat, &fusion.merge)?;
        let (_, c, ..) = low_map.dims4()?;
        let hw = h * w;
        let mut gated = low_map.clone();
        for (p, plane) in gated.data_mut().chunks_exact_mut(hw).enumerate() {
            let g = high[p];
            debug_assert!(p < n * c);
            plane.iter_mut().for_each(|v| *v *= g);
        }
        let logits = ops::conv2d(&gated, head)?;
        Ok((
            logits,
            FusionCache {
                image: image.clone(),
                low,
                low_norm,
                v1: v1.clone(),
                high,
                concat,
                low_map,
            },
            gated,
        ))
    }

    /// `f_low = BN-ReLU(conv3×3(image))`, `f_high = conv1×1(v1)`,
    /// `f_low.map = conv1×1(f_low ⊕ f2)`, `f_high.map = f_low.map ⊙ f_high`
    /// (broadcast over space), then the pointwise head. Returns 2-class logits.
    pub fn feature_fusion(
        &self,
        image: &Tensor<T>,
        f2: &Tensor<T>,
        v1: &Tensor<T>,
        mode: NormMode,
    ) -> Result<Tensor<T>> {
        let fusion = self
            .fusion
            .as_ref()
            .ok_or_else(|| Error::invalid("feature fusion branch is disabled"))?;
        Self::fuse(fusion, &self.head, image, f2, v1, mode).map(|(l, ..)| l)
    }

    /// Full forward pass to `[N, 2, H, W]` logits.
    pub fn forward(
        &self,
        image: &Tensor<T>,
        mode: NormMode,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let (_, h, w) = self.check_image(image)?;
        let (f1, encoder) = self.encode(image, true)?;
        let (attended, sam) = match &self.sam {
            Some(p) => {
                let (y, c) = attention::spatial_attention_forward(&f1, p)?;
                (y, Some(c))
            }
            None => (f1.clone(), None),
        };
        let (decoded, decoder) = self.decode(&attended, h, w, mode)?;
        let (f2, cam) = if self.config.toggles.cam {
            let (y, c) = attention::channel_attention_forward(&decoded)?;
            (y, Some(c))
        } else {
            (decoded.clone(), None)
        };
        let (logits, fusion, head_input) = match &self.fusion {
            Some(fp) => {
                let v1 = ops::global_avg_pool(&f1)?;
                let (logits, cache, gated) = Self::fuse(fp, &self.head, image, &f2, &v1, mode)?;
                (logits, Some(cache), gated)
            }
            None => (ops::conv2d(&f2, &self.head)?, None, f2.clone()),
        };
        logits.check_finite("aenet forward")?;
        Ok((
            logits,
            ForwardCache {
                mode,
                encoder,
                f1,
                sam,
                decoder,
                decoded,
                cam,
                f2,
                fusion,
                head_input,
            },
        ))
    }

    /// Per-pixel cell probability `[N, 1, H, W]` with running batch-norm
    /// statistics.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (logits, _) = self.forward(image, NormMode::Eval)?;
        cell_probability(&logits)
    }

    /// Gradients of a scalar objective with respect to every parameter and to
    /// the input image, given the objective's gradient with respect to the logits.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_logits: &Tensor<T>,
    ) -> Result<(Self, Tensor<T>)> {
        let mut grads = self.zeros_like();

        let head_g = ops::conv2d_backward(&cache.head_input, &self.head, d_logits)?;
        accumulate_conv(&mut grads.head, &head_g)?;

        let mut d_image: Option<Tensor<T>> = None;
        let mut d_f1_extra: Option<Tensor<T>> = None;
        let d_f2 = match (&self.fusion, &cache.fusion) {
            (Some(fp), Some(fc)) => {
                let gf = grads.fusion.as_mut().expect("gradient mirrors parameters");
                let d_gated = head_g.input;
                let (n, c, h, w) = d_gated.dims4()?;
                let hw = h * w;
                let mut d_low_map = d_gated.clone();
                let mut d_high = Tensor::zeros([n, c, 1, 1]);
                for p in 0..n * c {
                    let g = fc.high[p];
                    let range = p * hw..(p + 1) * hw;
                    let mut acc = T::zero();
                    for i in range {
                        acc += d_gated[i] * fc.low_map[i];
                        d_low_map[i] = d_gated[i] * g;
                    }
                    d_high[p] = acc;
                }
                let merge_g = ops::conv2d_backward(&fc.concat, &fp.merge, &d_low_map)?;
                accumulate_conv(&mut gf.merge, &merge_g)?;
                let (d_low, d_f2) = ops::split_channels(
                    &merge_g.input,
                    fp.merge.in_channels() - self.config.decoder_out(),
                )?;

                let high_g = ops::conv2d_backward(&fc.v1, &fp.high, &d_high)?;
                accumulate_conv(&mut gf.high, &high_g)?;
                d_f1_extra = Some(ops::global_avg_pool_backward(
                    cache.f1.shape(),
                    &high_g.input,
                )?);

                let bn_g =
                    ops::batch_norm_relu_backward(&fp.low_norm, &fc.low_norm, &fc.low, &d_low)?;
                gf.low_norm.gamma.accumulate(&bn_g.gamma)?;
                gf.low_norm.beta.accumulate(&bn_g.beta)?;
                let low_g = ops::conv2d_backward(&fc.image, &fp.low, &bn_g.input)?;
                accumulate_conv(&mut gf.low, &low_g)?;
                d_image = Some(low_g.input);
                d_f2
            }
            _ => head_g.input,
        };

        let d_decoded = match &cache.cam {
            Some(cc) => attention::channel_attention_backward(&cache.decoded, cc, &d_f2)?,
            None => d_f2,
        };

        let mut d = d_decoded;
        for (i, dc) in cache.decoder.iter().enumerate().rev() {
            let stage = &self.decoder[i];
            let bn_g = ops::batch_norm_relu_backward(&stage.norm, &dc.norm, &dc.output, &d)?;
            let gs = &mut grads.decoder[i];
            gs.norm.gamma.accumulate(&bn_g.gamma)?;
            gs.norm.beta.accumulate(&bn_g.beta)?;
            let conv_g = ops::conv2d_backward(&dc.upsampled, &stage.conv, &bn_g.input)?;
            accumulate_conv(&mut gs.conv, &conv_g)?;
            d = ops::bilinear_resize_backward(&dc.in_shape, &conv_g.input)?;
        }

        let mut d_f1 = match (&self.sam, &cache.sam) {
            (Some(p), Some(sc)) => {
                let gs = grads.sam.as_mut().expect("gradient mirrors parameters");
                attention::spatial_attention_backward(&cache.f1, p, sc, &d, gs)?
            }
            _ => d,
        };
        if let Some(extra) = d_f1_extra {
            d_f1.accumulate(&extra)?;
        }

        let mut d = d_f1;
        let mut layer = self.encoder.len();
        for step in cache.encoder.iter().rev() {
            match step {
                EncoderStep::Pool { in_shape, argmax } => {
                    d = ops::max_pool2_backward(in_shape, argmax, &d)?;
                }
                EncoderStep::Conv { input, output } => {
                    layer -= 1;
                    let d_pre = ops::relu_backward(output, &d)?;
                    let g = ops::conv2d_backward(input, &self.encoder[layer], &d_pre)?;
                    accumulate_conv(&mut grads.encoder[layer], &g)?;
                    d = g.input;
                }
            }
        }
        let d_image = match d_image {
            Some(mut di) => {
                di.accumulate(&d)?;
                di
            }
            None => d,
        };
        Ok((grads, d_image))
    }

    /// Folds the batch statistics recorded in a training-mode forward pass
    /// into the running estimates.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        if cache.mode != NormMode::Train {
            return;
        }
        for (stage, dc) in self.decoder.iter_mut().zip(&cache.decoder) {
            let (n, _, h, w) = dc.output.dims4().expect("rank-4 activations");
            stage.norm.update_running(&dc.norm, n * h * w);
        }
        if let (Some(f), Some(fc)) = (&mut self.fusion, &cache.fusion) {
            let (n, _, h, w) = fc.low.dims4().expect("rank-4 activations");
            f.low_norm.update_running(&fc.low_norm, n * h * w);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::ops::BatchNorm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn toy_encoder_output_stride() {
        let net = Aenet::<f32>::init(ModelConfig::toy(), 1).unwrap();
        let (f1, v1) = net
            .encoder_forward(&Tensor::full([1, 3, 32, 32], 0.5))
            .unwrap();
        assert_eq!(f1.shape(), &[1, 64, 2, 2]);
        assert_eq!(v1.shape(), &[1, 64, 1, 1]);
        assert!(net.encoder_forward(&Tensor::zeros([1, 3, 24, 32])).is_err());
    }

    #[test]
    fn zero_weight_encoder_gives_zero_features() {
        let mut net = Aenet::<f32>::init(ModelConfig::toy(), 1).unwrap();
        for k in &mut net.encoder {
            *k = k.zeros_like();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::from_fn([1, 3, 32, 32], |_| rng.random_range(-2.0..2.0f32));
        let (f1, _) = net.encoder_forward(&img).unwrap();
        assert!(f1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_constant_in_constant_out() {
        let mut net = Aenet::<f64>::init(ModelConfig::toy(), 2).unwrap();
        // centre tap only: a 3x3 identity on each channel
        for (i, stage) in net.decoder.iter_mut().enumerate() {
            let (co, ci) = (stage.conv.out_channels(), stage.conv.in_channels());
            stage.conv.weight.fill(0.0);
            for o in 0..co {
                stage.conv.weight[((o * ci + o % ci) * 3 + 1) * 3 + 1] = 1.0;
            }
            stage.norm = BatchNorm::new(co);
            stage.norm.running_mean.fill(0.0);
            stage.norm.running_var.fill(1.0 - 1e-5);
            assert!(i < 2);
        }
        let f = Tensor::full([1, 64, 2, 2], 0.75);
        let out = net.decoder_forward(&f, 32, 32, NormMode::Eval).unwrap();
        assert_eq!(out.shape(), &[1, 16, 32, 32]);
        let first = out[0];
        assert!((first - 0.75).abs() < 1e-9);
        assert!(out.data().iter().all(|&v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn decoder_matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Aenet::<f64>::init(ModelConfig::toy(), 3).unwrap();
        let f = random(&[2, 64, 1, 1], &mut rng);
        let out = net.decoder_forward(&f, 16, 16, NormMode::Train).unwrap();
        let mut x = f.clone();
        for (stage, side) in net.decoder.iter().zip([4, 16]) {
            let up = ops::bilinear_resize(&x, side, side).unwrap();
            let c = ops::conv2d(&up, &stage.conv).unwrap();
            x = ops::batch_norm_relu(&c, &stage.norm, NormMode::Train)
                .unwrap()
                .0;
        }
        assert_eq!(out, x);
    }

    #[test]
    fn fusion_gate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Aenet::<f64>::init(ModelConfig::toy(), 4).unwrap();
        let image = random(&[1, 3, 16, 16], &mut rng);
        let f2 = random(&[1, 16, 16, 16], &mut rng);
        let v1 = random(&[1, 64, 1, 1], &mut rng);

        // closed gate: only the head bias survives
        {
            let fusion = net.fusion.as_mut().unwrap();
            fusion.high = fusion.high.zeros_like();
        }
        let logits = net
            .feature_fusion(&image, &f2, &v1, NormMode::Train)
            .unwrap();
        for c in 0..2 {
            assert!(logits.data()[c * 256..(c + 1) * 256]
                .iter()
                .all(|&v| v == net.head.bias[c]));
        }

        // identity gate: f_high = 1 leaves f_low.map untouched
        net.fusion.as_mut().unwrap().high.bias.fill(1.0);
        let fusion = net.fusion.clone().unwrap();
        let (_, cache, gated) =
            Aenet::fuse(&fusion, &net.head, &image, &f2, &v1, NormMode::Train).unwrap();
        assert_eq!(gated, cache.low_map);

        // composition oracle with a live gate
        let fusion = FusionParams {
            high: ConvKernel::new(
                random(&[32, 64, 1, 1], &mut rng),
                random(&[32], &mut rng),
                1,
                0,
            )
            .unwrap(),
            ..fusion
        };
        net.fusion = Some(fusion.clone());
        let logits = net
            .feature_fusion(&image, &f2, &v1, NormMode::Train)
            .unwrap();
        let low = ops::batch_norm_relu(
            &ops::conv2d(&image, &fusion.low).unwrap(),
            &fusion.low_norm,
            NormMode::Train,
        )
        .unwrap()
        .0;
        let high = ops::conv2d(&v1, &fusion.high).unwrap();
        let low_map =
            ops::conv2d(&ops::concat_channels(&low, &f2).unwrap(), &fusion.merge).unwrap();
        let gated = Tensor::from_fn([1, 32, 16, 16], |i| low_map[i] * high[i / 256]);
        let expect = ops::conv2d(&gated, &net.head).unwrap();
        assert!(logits.max_abs_diff(&expect).unwrap() < 1e-12);
        assert!(net
            .feature_fusion(
                &image,
                &random(&[1, 16, 8, 8], &mut rng),
                &v1,
                NormMode::Train
            )
            .is_err());
    }

    #[test]
    fn probabilities_are_valid_and_deterministic() {
        let net = Aenet::<f32>::init(ModelConfig::toy(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::from_fn([2, 3, 32, 48], |_| rng.random_range(-1.0..1.0f32));
        let (logits, _) = net.forward(&img, NormMode::Train).unwrap();
        let p = cell_probability(&logits).unwrap();
        assert_eq!(p.shape(), &[2, 1, 32, 48]);
        let hw = 32 * 48;
        for b in 0..2 {
            for i in 0..hw {
                let (c, g) = (
                    logits[b * 2 * hw + i] as f64,
                    logits[b * 2 * hw + hw + i] as f64,
                );
                let bg = libm::exp(g) / (libm::exp(c) + libm::exp(g));
                let pc = p[b * hw + i] as f64;
                assert!((0.0..=1.0).contains(&pc));
                assert!((pc + bg - 1.0).abs() < 1e-6);
            }
        }
        let again = net.predict(&img).unwrap();
        assert_eq!(again, net.predict(&img).unwrap());
    }
}

//! The segmentation network: a VGG-style encoder at output stride 16, spatial
//! attention, a bilinear decoder back to full resolution, channel attention
//! and the feature fusion branch, followed by a pointwise two-class head.

mod network;
mod train;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::SpatialAttentionParams;
use crate::error::{Error, Result};
use crate::ops::{BatchNorm, ConvKernel};
use crate::tensor::{Scalar, Tensor};

pub use network::{cell_probability, ForwardCache};
pub use train::{cross_entropy, lr_schedule, train_step, Adam, TrainConfig};

/// Number of 3×3 convolutions in each of the five VGG16 stages.
pub const VGG16_STAGE_DEPTHS: [usize; 5] = [2, 2, 3, 3, 3];
pub const OUTPUT_STRIDE: usize = 16;
/// Channels of the low-level and high-level paths of the fusion branch.
pub const FUSION_CHANNELS: usize = 32;
pub const NUM_CLASSES: usize = 2;

/// Which optional modules are part of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub sam: bool,
    pub cam: bool,
    pub ffb: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            sam: true,
            cam: true,
            ffb: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Widths of the five encoder stages. Only the first four stages are
    /// followed by a pooling layer, which fixes the output stride at 16.
    pub encoder_widths: Vec<usize>,
    /// Output widths of the two decoder stages.
    pub decoder_widths: Vec<usize>,
    /// Query/key width of spatial attention is `top_width / attention_reduction`.
    pub attention_reduction: usize,
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![64, 128, 256, 512, 512],
            decoder_widths: vec![256, 64],
            attention_reduction: 8,
            toggles: Toggles::default(),
        }
    }
}

impl ModelConfig {
    /// Narrow preset for tests and desk-scale training.
    pub fn toy() -> Self {
        Self {
            encoder_widths: vec![8, 16, 32, 64, 64],
            decoder_widths: vec![32, 16],
            ..Self::default()
        }
    }

    pub fn with_toggles(mut self, toggles: Toggles) -> Self {
        self.toggles = toggles;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.len() != VGG16_STAGE_DEPTHS.len() {
            return Err(Error::invalid(format!(
                "encoder needs {} stage widths, got {}",
                VGG16_STAGE_DEPTHS.len(),
                self.encoder_widths.len()
            )));
        }
        if self.decoder_widths.len() != 2 {
            return Err(Error::invalid("decoder needs exactly 2 stage widths"));
        }
        if self
            .encoder_widths
            .iter()
            .chain(&self.decoder_widths)
            .any(|&w| w == 0)
            || self.attention_reduction == 0
        {
            return Err(Error::invalid("network widths must be >= 1"));
        }
        Ok(())
    }

    pub fn top_width(&self) -> usize {
        self.encoder_widths[VGG16_STAGE_DEPTHS.len() - 1]
    }

    pub fn decoder_out(&self) -> usize {
        self.decoder_widths[1]
    }
}

/// The fusion branch: low-level features straight from the image, gated by a
/// projection of the pooled top encoder feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T = f32> {
    /// 3×3 convolution of the image to 32 channels, then batch norm and ReLU.
    pub low: ConvKernel<T>,
    pub low_norm: BatchNorm<T>,
    /// 1×1 convolution of the pooled top feature to 32 channels.
    pub high: ConvKernel<T>,
    /// 1×1 convolution over the concatenation of low-level and decoder features.
    pub merge: ConvKernel<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStage<T = f32> {
    pub conv: ConvKernel<T>,
    pub norm: BatchNorm<T>,
}

/// Parameters of the whole network. The same type holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Aenet<T = f32> {
    pub config: ModelConfig,
    pub encoder: Vec<ConvKernel<T>>,
    pub sam: Option<SpatialAttentionParams<T>>,
    pub decoder: Vec<DecoderStage<T>>,
    pub fusion: Option<FusionParams<T>>,
    pub head: ConvKernel<T>,
}

/// Independent generator streams so that toggling one module never changes
/// the initial weights of another.
#[derive(Clone, Copy)]
enum InitStream {
    Encoder = 1,
    Sam = 2,
    Decoder = 3,
    Fusion = 4,
    Head = 5,
}

fn stream_rng(seed: u64, stream: InitStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

impl<T: Scalar> Aenet<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, InitStream::Encoder);
        let mut encoder = Vec::new();
        let mut in_ch = 3;
        for (&width, &depth) in config.encoder_widths.iter().zip(&VGG16_STAGE_DEPTHS) {
            for _ in 0..depth {
                encoder.push(ConvKernel::he_normal(width, in_ch, 3, 1, &mut rng));
                in_ch = width;
            }
        }
        let top = config.top_width();

        let sam = if config.toggles.sam {
            let mut rng = stream_rng(seed, InitStream::Sam);
            let reduced = (top / config.attention_reduction).max(1);
            Some(SpatialAttentionParams::init(top, reduced, top, &mut rng)?)
        } else {
            None
        };

        let mut rng = stream_rng(seed, InitStream::Decoder);
        let mut decoder = Vec::new();
        let mut in_ch = top;
        for &width in &config.decoder_widths {
            decoder.push(DecoderStage {
                conv: ConvKernel::he_normal(width, in_ch, 3, 1, &mut rng),
                norm: BatchNorm::new(width),
            });
            in_ch = width;
        }

        let fusion = if config.toggles.ffb {
            let mut rng = stream_rng(seed, InitStream::Fusion);
            let mut high = ConvKernel::he_normal(FUSION_CHANNELS, top, 1, 0, &mut rng);
            // start with an open gate
            high.bias.fill(T::one());
            Some(FusionParams {
                low: ConvKernel::he_normal(FUSION_CHANNELS, 3, 3, 1, &mut rng),
                low_norm: BatchNorm::new(FUSION_CHANNELS),
                high,
                merge: ConvKernel::he_normal(
                    FUSION_CHANNELS,
                    FUSION_CHANNELS + config.decoder_out(),
                    1,
                    0,
                    &mut rng,
                ),
            })
        } else {
            None
        };

        let head_in = if config.toggles.ffb {
            FUSION_CHANNELS
        } else {
            config.decoder_out()
        };
        let mut rng = stream_rng(seed, InitStream::Head);
        let head = ConvKernel::he_normal(NUM_CLASSES, head_in, 1, 0, &mut rng);

        Ok(Self {
            config,
            encoder,
            sam,
            decoder,
            fusion,
            head,
        })
    }

    /// A parameter set of identical structure with every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.params_mut() {
            t.fill(T::zero());
        }
        for (_, t) in z.buffers_mut() {
            t.fill(T::zero());
        }
        z
    }

    pub fn cast<U: Scalar>(&self) -> Aenet<U> {
        Aenet {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(ConvKernel::cast).collect(),
            sam: self.sam.as_ref().map(SpatialAttentionParams::cast),
            decoder: self
                .decoder
                .iter()
                .map(|s| DecoderStage {
                    conv: s.conv.cast(),
                    norm: s.norm.cast(),
                })
                .collect(),
            fusion: self.fusion.as_ref().map(|f| FusionParams {
                low: f.low.cast(),
                low_norm: f.low_norm.cast(),
                high: f.high.cast(),
                merge: f.merge.cast(),
            }),
            head: self.head.cast(),
        }
    }

    fn kernels(&self) -> Vec<(String, &ConvKernel<T>)> {
        let mut out: Vec<(String, &ConvKernel<T>)> = Vec::new();
        for (i, k) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}"), k));
        }
        if let Some(sam) = &self.sam {
            for (name, k) in sam.kernels() {
                out.push((format!("sam.{name}"), k));
            }
        }
        for (i, s) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{i}.conv"), &s.conv));
        }
        if let Some(f) = &self.fusion {
            out.push(("fusion.low".into(), &f.low));
            out.push(("fusion.high".into(), &f.high));
            out.push(("fusion.merge".into(), &f.merge));
        }
        out.push(("head".into(), &self.head));
        out
    }

    fn norms(&self) -> Vec<(String, &BatchNorm<T>)> {
        let mut out: Vec<(String, &BatchNorm<T>)> = self
            .decoder
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("decoder.{i}.norm"), &s.norm))
            .collect();
        if let Some(f) = &self.fusion {
            out.push(("fusion.low_norm".into(), &f.low_norm));
        }
        out
    }

    /// Mutable kernels and batch-norm layers, in the same order as
    /// [`Aenet::params`].
    #[allow(clippy::type_complexity)]
    fn layers_mut(
        &mut self,
    ) -> (
        Vec<(String, &mut ConvKernel<T>)>,
        Vec<(String, &mut BatchNorm<T>)>,
    ) {
        let Self {
            encoder,
            sam,
            decoder,
            fusion,
            head,
            ..
        } = self;
        let mut kernels: Vec<(String, &mut ConvKernel<T>)> = Vec::new();
        let mut norms: Vec<(String, &mut BatchNorm<T>)> = Vec::new();
        for (i, k) in encoder.iter_mut().enumerate() {
            kernels.push((format!("encoder.{i}"), k));
        }
        if let Some(sam) = sam {
            for (name, k) in sam.kernels_mut() {
                kernels.push((format!("sam.{name}"), k));
            }
        }
        for (i, s) in decoder.iter_mut().enumerate() {
            kernels.push((format!("decoder.{i}.conv"), &mut s.conv));
            norms.push((format!("decoder.{i}.norm"), &mut s.norm));
        }
        if let Some(f) = fusion {
            kernels.push(("fusion.low".into(), &mut f.low));
            kernels.push(("fusion.high".into(), &mut f.high));
            kernels.push(("fusion.merge".into(), &mut f.merge));
            norms.push(("fusion.low_norm".into(), &mut f.low_norm));
        }
        kernels.push(("head".into(), head));
        (kernels, norms)
    }

    /// Trainable tensors in a fixed order with stable names.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, k) in self.kernels() {
            out.push((format!("{name}.weight"), &k.weight));
            out.push((format!("{name}.bias"), &k.bias));
        }
        for (name, n) in self.norms() {
            out.push((format!("{name}.gamma"), &n.gamma));
            out.push((format!("{name}.beta"), &n.beta));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        let (kernels, norms) = self.layers_mut();
        for (name, k) in kernels {
            out.push((format!("{name}.weight"), &mut k.weight));
            out.push((format!("{name}.bias"), &mut k.bias));
        }
        for (name, n) in norms {
            out.push((format!("{name}.gamma"), &mut n.gamma));
            out.push((format!("{name}.beta"), &mut n.beta));
        }
        out
    }

    /// Non-trainable running statistics of the batch-norm layers.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, n) in self.norms() {
            out.push((format!("{name}.running_mean"), &n.running_mean));
            out.push((format!("{name}.running_var"), &n.running_var));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (name, n) in self.layers_mut().1 {
            out.push((format!("{name}.running_mean"), &mut n.running_mean));
            out.push((format!("{name}.running_var"), &mut n.running_var));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Copies every trainable value into one flat vector (in `params` order).
    pub fn flatten_params(&self) -> Vec<T> {
        self.params()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn load_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for (_, t) in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

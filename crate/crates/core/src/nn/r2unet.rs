//! Pyramid compression, the 32-kernel UNet-style decoder, and their
//! composition with the encoder (R2UNet).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, ConvBn};
use super::res2net::{Encoder, EncoderConfig, LEVELS};
use crate::engine::{Builder, Graph, Var};
use crate::error::Result;

/// Channel width of every compressed pyramid level and decoder layer.
pub const FEATURE_CHANNELS: usize = 32;

/// Compressed pyramid `[F^1 .. F^5]`, all levels with 32 channels.
pub type FeaturePyramid = Vec<Var>;

/// Per level: 1×1 conv to 32 channels then 3×3 conv, each with BN and ReLU.
#[derive(Clone, Debug)]
pub struct Compression {
    levels: Vec<(ConvBn, ConvBn)>,
}

impl Compression {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, config: &EncoderConfig) -> Self {
        let levels = (1..=LEVELS)
            .map(|i| {
                let mut lb = b.sub(&format!("level{i}"));
                (
                    ConvBn::new(&mut lb.sub("reduce"), config.level_channels(i), FEATURE_CHANNELS, 1, 1, true),
                    ConvBn::new(&mut lb.sub("refine"), FEATURE_CHANNELS, FEATURE_CHANNELS, 3, 1, true),
                )
            })
            .collect();
        Compression { levels }
    }

    pub fn forward(&self, g: &mut Graph, raw: &[Var]) -> FeaturePyramid {
        assert_eq!(raw.len(), LEVELS);
        raw.iter()
            .zip(&self.levels)
            .map(|(&x, (reduce, refine))| {
                let y = reduce.forward(g, x);
                refine.forward(g, y)
            })
            .collect()
    }
}

/// Two 3×3, 32-kernel conv layers applied after merging two feature maps.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    first: ConvBn,
    second: ConvBn,
}

impl DoubleConv {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, cin: usize) -> Self {
        DoubleConv {
            first: ConvBn::new(&mut b.sub("conv1"), cin, FEATURE_CHANNELS, 3, 1, true),
            second: ConvBn::new(&mut b.sub("conv2"), FEATURE_CHANNELS, FEATURE_CHANNELS, 3, 1, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.first.forward(g, x);
        self.second.forward(g, y)
    }
}

/// Output of a decoder pass.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// Last 32-channel feature map, at half the input resolution.
    pub features: Var,
    /// Pre-sigmoid logits at the input resolution.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    /// Merge blocks for levels 4, 3, 2, 1 (in that order).
    merges: Vec<DoubleConv>,
    head: Conv2d,
}

impl Decoder {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, out_channels: usize) -> Self {
        let merges = (1..LEVELS)
            .rev()
            .map(|i| DoubleConv::new(&mut b.sub(&format!("level{i}")), 2 * FEATURE_CHANNELS))
            .collect();
        let head = Conv2d::new(&mut b.sub("head"), FEATURE_CHANNELS, out_channels, 1, 1, true);
        Decoder { merges, head }
    }

    /// Starts at level 5 and, for each finer level, upsamples ×2,
    /// concatenates the level's features and applies two 3×3 convs.
    pub fn features(&self, g: &mut Graph, pyramid: &[Var]) -> Var {
        assert_eq!(pyramid.len(), LEVELS);
        let mut x = pyramid[LEVELS - 1];
        for (merge, &skip) in self.merges.iter().zip(pyramid[..LEVELS - 1].iter().rev()) {
            let up = g.upsample2x(x);
            let cat = g.concat(&[up, skip]);
            x = merge.forward(g, cat);
        }
        x
    }

    /// 1×1 head then a final ×2 bilinear upsample.
    pub fn head(&self, g: &mut Graph, features: Var) -> Var {
        let y = self.head.forward(g, features);
        g.upsample2x(y)
    }

    pub fn forward(&self, g: &mut Graph, pyramid: &[Var]) -> DecoderOutput {
        let features = self.features(g, pyramid);
        let logits = self.head(g, features);
        DecoderOutput { features, logits }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct R2UNetConfig {
    pub encoder: EncoderConfig,
    pub out_channels: usize,
}

impl Default for R2UNetConfig {
    fn default() -> Self {
        R2UNetConfig { encoder: EncoderConfig::default(), out_channels: 1 }
    }
}

/// Encoder, pyramid compression and decoder as one network.
#[derive(Clone, Debug)]
pub struct R2UNet {
    pub config: R2UNetConfig,
    pub encoder: Encoder,
    pub compression: Compression,
    pub decoder: Decoder,
}

impl R2UNet {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, config: &R2UNetConfig) -> Result<Self> {
        Ok(R2UNet {
            config: config.clone(),
            encoder: Encoder::new(&mut b.sub("encoder"), &config.encoder)?,
            compression: Compression::new(&mut b.sub("compress"), &config.encoder),
            decoder: Decoder::new(&mut b.sub("decoder"), config.out_channels),
        })
    }

    pub fn pyramid(&self, g: &mut Graph, image: Var) -> Result<FeaturePyramid> {
        let raw = self.encoder.forward(g, image)?;
        Ok(self.compression.forward(g, &raw))
    }

    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<DecoderOutput> {
        let pyramid = self.pyramid(g, image)?;
        Ok(self.decoder.forward(g, &pyramid))
    }
}

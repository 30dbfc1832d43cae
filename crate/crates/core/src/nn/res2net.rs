//! Res2Net-style encoder producing a five-level feature pyramid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::ConvBn;
use crate::engine::{Builder, Graph, Var};
use crate::error::{Error, Result};

/// Number of pyramid levels; level `i` has stride `2^i`.
pub const LEVELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Channels of the stem output (level 1); each later level doubles it.
    pub base_width: usize,
    /// Number of channel groups inside a block.
    pub scale: usize,
    pub blocks_per_stage: [usize; 4],
    pub input_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { base_width: 16, scale: 4, blocks_per_stage: [1, 1, 1, 1], input_channels: 1 }
    }
}

impl EncoderConfig {
    /// The Res2Net-50 layout (not used by the desk-scale experiments).
    pub fn res2net50() -> Self {
        EncoderConfig { base_width: 256, scale: 4, blocks_per_stage: [3, 4, 6, 3], input_channels: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.scale == 0 || self.input_channels == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.base_width % self.scale != 0 {
            return Err(Error::Config(format!(
                "base_width {} is not divisible by scale {}",
                self.base_width, self.scale
            )));
        }
        Ok(())
    }

    /// Raw channel count `C_i` of pyramid level `i` (1-based).
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_width << (level - 1)
    }
}

/// Multi-scale residual block: entry 1×1 conv, `scale` channel groups where
/// group 1 passes through and group `j ≥ 2` computes
/// `y_j = K_j(x_j + y_{j−1})`, concatenation, exit 1×1 conv, then the
/// residual sum with the block input. With `scale = 1` the single group is
/// convolved, giving a plain bottleneck block.
#[derive(Clone, Debug)]
pub struct Res2NetBlock {
    pub entry: ConvBn,
    pub group_convs: Vec<ConvBn>,
    pub exit: ConvBn,
    pub scale: usize,
    pub width: usize,
}

impl Res2NetBlock {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, channels: usize, width: usize, scale: usize) -> Result<Self> {
        if scale == 0 || width % scale != 0 {
            return Err(Error::Config(format!("block width {width} is not divisible by scale {scale}")));
        }
        let group = width / scale;
        let n_convs = if scale == 1 { 1 } else { scale - 1 };
        let entry = ConvBn::new(&mut b.sub("entry"), channels, width, 1, 1, true);
        let group_convs = (0..n_convs)
            .map(|j| ConvBn::new(&mut b.sub(&format!("group{}", j + 2)), group, group, 3, 1, true))
            .collect();
        let exit = ConvBn::new(&mut b.sub("exit"), width, channels, 1, 1, false);
        Ok(Res2NetBlock { entry, group_convs, exit, scale, width })
    }

    /// Closed-form trainable parameter count for `(channels, width, scale)`.
    pub fn param_count(channels: usize, width: usize, scale: usize) -> usize {
        let group = width / scale;
        let groups = if scale == 1 {
            ConvBn::param_count(width, width, 3)
        } else {
            (scale - 1) * ConvBn::param_count(group, group, 3)
        };
        ConvBn::param_count(channels, width, 1) + groups + ConvBn::param_count(width, channels, 1)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.entry.forward(g, x);
        let mid = if self.scale == 1 {
            self.group_convs[0].forward(g, h)
        } else {
            let groups = split_channels(g, h, self.scale);
            let mut outs = Vec::with_capacity(self.scale);
            outs.push(groups[0]);
            let mut prev = groups[0];
            for (j, conv) in self.group_convs.iter().enumerate() {
                let inp = g.add(groups[j + 1], prev);
                prev = conv.forward(g, inp);
                outs.push(prev);
            }
            g.concat(&outs)
        };
        let y = self.exit.forward(g, mid);
        g.add(x, y)
    }
}

fn split_channels(g: &mut Graph, x: Var, parts: usize) -> Vec<Var> {
    let group = g.shape(x)[1] / parts;
    (0..parts).map(|p| g.narrow_channels(x, p * group, group)).collect()
}

#[derive(Clone, Debug)]
struct Stage {
    entry: ConvBn,
    pool_first: bool,
    blocks: Vec<Res2NetBlock>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    stem: ConvBn,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let c1 = config.level_channels(1);
        let stem = ConvBn::new(&mut b.sub("stem"), config.input_channels, c1, 7, 2, true);
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let cin = config.level_channels(s + 1);
            let cout = config.level_channels(s + 2);
            let mut sb = b.sub(&format!("stage{}", s + 1));
            // Stage 1 follows the standard stem max-pool; later stages
            // downsample with a strided 3×3 convolution.
            let (k, stride) = if s == 0 { (1, 1) } else { (3, 2) };
            let entry = ConvBn::new(&mut sb.sub("down"), cin, cout, k, stride, true);
            let blocks = (0..config.blocks_per_stage[s])
                .map(|i| Res2NetBlock::new(&mut sb.sub(&format!("block{i}")), cout, cout / 2, config.scale))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { entry, pool_first: s == 0, blocks });
        }
        Ok(Encoder { config: config.clone(), stem, stages })
    }

    /// Raw pyramid `[F^1 .. F^5]`, level `i` of shape `(C_i, H/2^i, W/2^i)`.
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        let [_, c, h, w] = g.shape(image);
        check_input(c, h, w, self.config.input_channels)?;
        let mut levels = Vec::with_capacity(LEVELS);
        let mut x = self.stem.forward(g, image);
        levels.push(x);
        for stage in &self.stages {
            if stage.pool_first {
                x = g.max_pool_3s2(x);
            }
            x = stage.entry.forward(g, x);
            for block in &stage.blocks {
                x = block.forward(g, x);
            }
            levels.push(x);
        }
        Ok(levels)
    }
}

pub(crate) fn check_input(c: usize, h: usize, w: usize, channels: usize) -> Result<()> {
    if c != channels {
        return Err(Error::Validation(format!("expected {channels} input channel(s), got {c}")));
    }
    let stride = 1 << LEVELS;
    if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::Validation(format!("input size {h}×{w} is not a positive multiple of {stride}")));
    }
    Ok(())
}

//! The second-stage edge-enhanced network: a segmentation branch, an edge
//! branch, deep cross feature fusion (DCFF) between their pyramids, and a
//! fusion head over the two branches' final decoder features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Builder, Graph, Mode, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ConvBn};
use crate::nn::r2unet::{DoubleConv, FeaturePyramid, R2UNet, R2UNetConfig, FEATURE_CHANNELS};
use crate::nn::res2net::{EncoderConfig, LEVELS};

/// How a DCFF module merges features from the two branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FuseMode {
    /// Channel concatenation followed by convolution (segmentation branch).
    Concat,
    /// Element-wise product (edge branch), gating features by the other branch.
    Multiply,
}

/// Refines level `k` of pyramid `a` using levels `k..=5` of pyramid `b`.
#[derive(Clone, Debug)]
pub struct Dcff {
    pub level: usize,
    pub mode: FuseMode,
    /// Pair convolutions for levels `k..=5`.
    pairs: Vec<ConvBn>,
    /// Chain merges for levels `k..=4`, coarse to fine.
    chain: Vec<DoubleConv>,
}

/// Intermediate values of one DCFF pass, for inspection.
#[derive(Clone, Debug)]
pub struct DcffTrace {
    /// Merged pair at each level `k..=5` before its convolution.
    pub merged: Vec<Var>,
    /// Pair outputs after convolution.
    pub pairs: Vec<Var>,
    pub output: Var,
}

impl Dcff {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, level: usize, mode: FuseMode) -> Result<Self> {
        if !(1..=LEVELS).contains(&level) {
            return Err(Error::Validation(format!("DCFF level {level} outside 1..=5")));
        }
        let merged = match mode {
            FuseMode::Concat => 2 * FEATURE_CHANNELS,
            FuseMode::Multiply => FEATURE_CHANNELS,
        };
        let pairs = (level..=LEVELS)
            .map(|i| ConvBn::new(&mut b.sub(&format!("pair{i}")), merged, FEATURE_CHANNELS, 3, 1, true))
            .collect();
        let chain = (level..LEVELS).rev().map(|i| DoubleConv::new(&mut b.sub(&format!("chain{i}")), merged)).collect();
        Ok(Dcff { level, mode, pairs, chain })
    }

    fn merge(&self, g: &mut Graph, a: Var, b: Var) -> Var {
        match self.mode {
            FuseMode::Concat => g.concat(&[a, b]),
            FuseMode::Multiply => g.mul(a, b),
        }
    }

    pub fn forward(&self, g: &mut Graph, fa: &[Var], fb: &[Var]) -> Result<Var> {
        Ok(self.trace(g, fa, fb)?.output)
    }

    pub fn trace(&self, g: &mut Graph, fa: &[Var], fb: &[Var]) -> Result<DcffTrace> {
        if fa.len() != LEVELS || fb.len() != LEVELS {
            return Err(Error::Validation("DCFF needs two five-level pyramids".into()));
        }
        for (a, b) in fa.iter().zip(fb) {
            if g.shape(*a) != g.shape(*b) {
                return Err(Error::Validation("DCFF pyramids are not aligned".into()));
            }
        }
        let k = self.level;
        let base = fa[k - 1];
        let mut merged = Vec::with_capacity(self.pairs.len());
        let mut pairs = Vec::with_capacity(self.pairs.len());
        for (conv, i) in self.pairs.iter().zip(k..=LEVELS) {
            let down = g.avg_pool(base, 1 << (i - k));
            let m = self.merge(g, down, fb[i - 1]);
            merged.push(m);
            pairs.push(conv.forward(g, m));
        }
        let mut running = *pairs.last().expect("at least one pair");
        for (step, pair) in self.chain.iter().zip(pairs[..pairs.len() - 1].iter().rev()) {
            let up = g.upsample2x(running);
            let m = self.merge(g, up, *pair);
            running = step.forward(g, m);
        }
        let output = g.add(running, base);
        Ok(DcffTrace { merged, pairs, output })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct E2NetConfig {
    pub encoder: EncoderConfig,
    /// Adds the edge-prediction branch and the fusion head.
    pub edge_branch: bool,
    /// Adds cross feature fusion between the branches (needs `edge_branch`).
    pub dcff: bool,
    pub out_channels: usize,
}

impl Default for E2NetConfig {
    fn default() -> Self {
        E2NetConfig { encoder: EncoderConfig::default(), edge_branch: true, dcff: true, out_channels: 2 }
    }
}

impl E2NetConfig {
    pub fn baseline() -> Self {
        E2NetConfig { edge_branch: false, dcff: false, ..Self::default() }
    }

    pub fn two_branch() -> Self {
        E2NetConfig { dcff: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.dcff && !self.edge_branch {
            return Err(Error::Config("DCFF requires the edge branch".into()));
        }
        if self.out_channels == 0 {
            return Err(Error::Config("out_channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Fusion {
    convs: DoubleConv,
    head: Conv2d,
}

/// Logit handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct StageTwoLogits {
    pub s1: Var,
    pub e: Option<Var>,
    pub s2: Option<Var>,
}

impl StageTwoLogits {
    /// The output used as the final segmentation: the fused map when present.
    pub fn final_logits(&self) -> Var {
        self.s2.unwrap_or(self.s1)
    }
}

/// Post-sigmoid outputs, each `(N, 2, H, W)` with channels (liver, tumor).
#[derive(Clone, Debug)]
pub struct StageTwoOutput {
    pub s1: Tensor,
    pub e: Option<Tensor>,
    pub s2: Option<Tensor>,
}

impl StageTwoOutput {
    pub fn final_probs(&self) -> &Tensor {
        self.s2.as_ref().unwrap_or(&self.s1)
    }
}

#[derive(Clone, Debug)]
pub struct E2Net {
    pub config: E2NetConfig,
    seg: R2UNet,
    edge: Option<R2UNet>,
    dcff: Option<(Vec<Dcff>, Vec<Dcff>)>,
    fusion: Option<Fusion>,
}

impl E2Net {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, config: &E2NetConfig) -> Result<Self> {
        config.validate()?;
        let branch = R2UNetConfig { encoder: config.encoder.clone(), out_channels: config.out_channels };
        let seg = R2UNet::new(&mut b.sub("seg"), &branch)?;
        let edge = if config.edge_branch { Some(R2UNet::new(&mut b.sub("edge"), &branch)?) } else { None };
        let dcff = if config.dcff {
            let mut db = b.sub("dcff");
            let seg_side = (1..=LEVELS)
                .map(|k| Dcff::new(&mut db.sub(&format!("seg{k}")), k, FuseMode::Concat))
                .collect::<Result<Vec<_>>>()?;
            let edge_side = (1..=LEVELS)
                .map(|k| Dcff::new(&mut db.sub(&format!("edge{k}")), k, FuseMode::Multiply))
                .collect::<Result<Vec<_>>>()?;
            Some((seg_side, edge_side))
        } else {
            None
        };
        let fusion = config.edge_branch.then(|| {
            let mut fb = b.sub("fusion");
            Fusion {
                convs: DoubleConv::new(&mut fb.sub("merge"), 2 * FEATURE_CHANNELS),
                head: Conv2d::new(&mut fb.sub("head"), FEATURE_CHANNELS, config.out_channels, 1, 1, true),
            }
        });
        Ok(E2Net { config: config.clone(), seg, edge, dcff, fusion })
    }

    /// Names of the output heads present in this configuration.
    pub fn heads(&self) -> Vec<&'static str> {
        let mut heads = vec!["seg"];
        if self.edge.is_some() {
            heads.push("edge");
        }
        if self.fusion.is_some() {
            heads.push("fusion");
        }
        heads
    }

    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<StageTwoLogits> {
        let f1 = self.seg.pyramid(g, image)?;
        let (Some(edge), Some(fusion)) = (&self.edge, &self.fusion) else {
            let out = self.seg.decoder.forward(g, &f1);
            return Ok(StageTwoLogits { s1: out.logits, e: None, s2: None });
        };
        let f2 = edge.pyramid(g, image)?;
        let (r1, r2): (FeaturePyramid, FeaturePyramid) = match &self.dcff {
            Some((seg_side, edge_side)) => {
                let r1 = seg_side.iter().map(|d| d.forward(g, &f1, &f2)).collect::<Result<Vec<_>>>()?;
                let r2 = edge_side.iter().map(|d| d.forward(g, &f2, &f1)).collect::<Result<Vec<_>>>()?;
                (r1, r2)
            }
            None => (f1, f2),
        };
        let d1 = self.seg.decoder.forward(g, &r1);
        let d2 = edge.decoder.forward(g, &r2);
        let cat = g.concat(&[d1.features, d2.features]);
        let fused = fusion.convs.forward(g, cat);
        let s2 = fusion.head.forward(g, fused);
        let s2 = g.upsample2x(s2);
        Ok(StageTwoLogits { s1: d1.logits, e: Some(d2.logits), s2: Some(s2) })
    }

    /// Inference-mode forward pass returning probabilities.
    pub fn predict(&self, store: &mut ParamStore, image: &Tensor) -> Result<StageTwoOutput> {
        let mut g = Graph::new(store, Mode::Eval);
        let x = g.input(image.clone());
        let out = self.forward(&mut g, x)?;
        let probs = |v: Var| g.value(v).map(sigmoid);
        Ok(StageTwoOutput { s1: probs(out.s1), e: out.e.map(probs), s2: out.s2.map(probs) })
    }

    #[cfg(test)]
    pub(crate) fn dcff_modules(&self) -> Option<&(Vec<Dcff>, Vec<Dcff>)> {
        self.dcff.as_ref()
    }
}

pub fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-(x as f64)).exp())) as f32
}

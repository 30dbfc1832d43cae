//! Training pools, per-epoch sampling plans and batch assembly.

use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::crop::{crop_liver_region, LiverSource};
use super::{EdgeTarget, TrainConfig};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::ingest::{self, window_and_normalize, CtVolume, LabelVolume, SliceSample};
use crate::phantom::{ct_path, seg_path};
use crate::supervision::{edge_distance_map, mask_edge, Object};

/// Background value used when a slice is padded up to the crop size.
pub const PAD_VALUE: f32 = -1.0;

/// A normalized CT volume with its labels.
#[derive(Clone, Debug)]
pub struct Case {
    pub ct: CtVolume,
    pub labels: LabelVolume,
}

pub fn load_case(dir: &Path, case_id: &str) -> Result<Case> {
    let mut ct = ingest::load_ct(&ct_path(dir, case_id))?;
    let mut labels = ingest::load_labels(&seg_path(dir, case_id))?;
    if ct.shape() != labels.shape() {
        return Err(Error::Validation(format!("{case_id}: image and label shapes differ")));
    }
    ct.case_id = case_id.to_string();
    labels.case_id = case_id.to_string();
    Ok(Case { ct: window_and_normalize(&ct), labels })
}

pub fn load_cases(dir: &Path, ids: &[String]) -> Result<Vec<Case>> {
    ids.iter().map(|id| load_case(dir, id)).collect()
}

pub fn slices_of(cases: &[Case]) -> Result<Vec<SliceSample>> {
    let mut out = Vec::new();
    for c in cases {
        out.extend(ingest::extract_slices(&c.ct, &c.labels)?);
    }
    Ok(out)
}

/// One network input with its supervision.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Array2<f32>,
    /// One binary map per output channel.
    pub masks: Vec<Array2<u8>>,
    /// Edge targets per channel (second stage only).
    pub edges: Option<Vec<Array2<f32>>>,
}

/// Examples stacked into `(N, C, H, W)` tensors.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub masks: Tensor,
    pub edges: Option<Tensor>,
}

impl Batch {
    pub fn collate(examples: &[Example]) -> Result<Batch> {
        let first = examples.first().ok_or_else(|| Error::Validation("empty batch".into()))?;
        let (h, w) = first.image.dim();
        let k = first.masks.len();
        let n = examples.len();
        let mut images = Vec::with_capacity(n * h * w);
        let mut masks = Vec::with_capacity(n * k * h * w);
        let mut edges = first.edges.as_ref().map(|_| Vec::with_capacity(n * k * h * w));
        for ex in examples {
            if ex.image.dim() != (h, w) || ex.masks.len() != k || ex.edges.is_some() != edges.is_some() {
                return Err(Error::Validation("examples in a batch differ in layout".into()));
            }
            images.extend(ex.image.iter());
            for m in &ex.masks {
                masks.extend(m.iter().map(|&v| f32::from(v)));
            }
            if let (Some(dst), Some(src)) = (edges.as_mut(), ex.edges.as_ref()) {
                for e in src {
                    dst.extend(e.iter());
                }
            }
        }
        Ok(Batch {
            images: Tensor::from_vec([n, 1, h, w], images),
            masks: Tensor::from_vec([n, k, h, w], masks),
            edges: edges.map(|e| Tensor::from_vec([n, k, h, w], e)),
        })
    }
}

/// Square crop of side `size` at a uniformly drawn offset; slices smaller
/// than the crop are padded with [`PAD_VALUE`] (mask 0) first.
pub fn random_square_crop(sample: &SliceSample, size: usize, rng: &mut impl Rng) -> (Array2<f32>, Array2<u8>) {
    let (h, w) = sample.image.dim();
    let (ph, pw) = (h.max(size), w.max(size));
    let mut img = Array2::from_elem((ph, pw), PAD_VALUE);
    let mut mask = Array2::zeros((ph, pw));
    img.slice_mut(s![..h, ..w]).assign(&sample.image);
    mask.slice_mut(s![..h, ..w]).assign(&sample.liver_mask);
    let oy = rng.random_range(0..=ph - size);
    let ox = rng.random_range(0..=pw - size);
    (img.slice(s![oy..oy + size, ox..ox + size]).to_owned(), mask.slice(s![oy..oy + size, ox..ox + size]).to_owned())
}

/// Alternates liver and liver-free slices (each list reshuffled per
/// epoch) so that half of all samples contain liver.
pub fn balanced_order(slices: &[SliceSample], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let (mut liver, mut other): (Vec<usize>, Vec<usize>) = (0..slices.len()).partition(|&i| slices[i].has_liver());
    liver.shuffle(rng);
    other.shuffle(rng);
    let pools: Vec<&Vec<usize>> = [&liver, &other].into_iter().filter(|p| !p.is_empty()).collect();
    if pools.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|i| {
            let pool = pools[i % pools.len()];
            pool[(i / pools.len()) % pool.len()]
        })
        .collect()
}

/// `count` stage-1 examples: balanced slice choice, random square crops.
pub fn sample_stage1_batch(slices: &[SliceSample], count: usize, crop: usize, rng: &mut impl Rng) -> Vec<Example> {
    balanced_order(slices, count, rng)
        .into_iter()
        .map(|i| {
            let (image, mask) = random_square_crop(&slices[i], crop, rng);
            Example { image, masks: vec![mask], edges: None }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

/// Slices of the training cases and the policy turning them into examples.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub stage: Stage,
    pub slices: Vec<SliceSample>,
}

fn edge_target(mask: &Array2<u8>, object: Object, kind: EdgeTarget) -> Array2<f32> {
    match kind {
        EdgeTarget::Distance => edge_distance_map(mask.view(), object).values.mapv(|v| v as f32),
        EdgeTarget::Binary => mask_edge(mask.view()).mapv(f32::from),
    }
}

/// Second-stage example from a slice cropped around its liver.
pub fn stage2_example(sample: &SliceSample, pad: usize, cfg: &TrainConfig) -> Result<Option<Example>> {
    let Some((crop, _)) = crop_liver_region(sample, LiverSource::GroundTruth, None, pad, cfg.stage2_size)? else {
        return Ok(None);
    };
    let edges = vec![
        edge_target(&crop.liver_mask, Object::Liver, cfg.edge_target),
        edge_target(&crop.tumor_mask, Object::Tumor, cfg.edge_target),
    ];
    Ok(Some(Example { image: crop.image, masks: vec![crop.liver_mask, crop.tumor_mask], edges: Some(edges) }))
}

fn evenly_spaced<T: Clone>(items: Vec<T>, limit: Option<usize>) -> Vec<T> {
    match limit {
        Some(k) if k < items.len() => (0..k).map(|i| items[i * items.len() / k].clone()).collect(),
        _ => items,
    }
}

impl TrainingSet {
    pub fn new(stage: Stage, slices: Vec<SliceSample>) -> Result<Self> {
        let set = TrainingSet { stage, slices };
        if set.pool_size() == 0 {
            return Err(Error::Validation(match stage {
                Stage::One => "no training slices".into(),
                Stage::Two => "no training slice contains liver".into(),
            }));
        }
        Ok(set)
    }

    fn pool_size(&self) -> usize {
        match self.stage {
            Stage::One => self.slices.len(),
            Stage::Two => self.slices.iter().filter(|s| s.has_liver()).count(),
        }
    }

    /// The examples of one epoch, in training order. Depends only on the
    /// seed and the epoch number.
    pub fn epoch_examples(&self, epoch: u64, cfg: &TrainConfig) -> Result<Vec<Example>> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch);
        let count = cfg.samples_per_epoch.unwrap_or(self.pool_size());
        match self.stage {
            Stage::One => Ok(sample_stage1_batch(&self.slices, count, cfg.stage1_crop, &mut rng)),
            Stage::Two => {
                let mut pool: Vec<&SliceSample> = self.slices.iter().filter(|s| s.has_liver()).collect();
                pool.shuffle(&mut rng);
                let mut out = Vec::with_capacity(count);
                for i in 0..count {
                    let pad = rng.random_range(cfg.pad_range[0]..=cfg.pad_range[1]);
                    if let Some(ex) = stage2_example(pool[i % pool.len()], pad, cfg)? {
                        out.push(ex);
                    }
                }
                Ok(out)
            }
        }
    }

    /// Deterministic validation examples: whole slices (centre-cropped or
    /// padded) for stage 1, liver crops with the inference padding for
    /// stage 2.
    pub fn validation_examples(stage: Stage, slices: &[SliceSample], cfg: &TrainConfig) -> Result<Vec<Example>> {
        let out = match stage {
            Stage::One => slices
                .iter()
                .map(|s| {
                    let (image, mask) = centre_crop(s, cfg.stage1_crop);
                    Example { image, masks: vec![mask], edges: None }
                })
                .collect(),
            Stage::Two => {
                let mut v = Vec::new();
                for s in slices.iter().filter(|s| s.has_liver()) {
                    v.extend(stage2_example(s, cfg.inference_pad, cfg)?);
                }
                v
            }
        };
        Ok(evenly_spaced(out, cfg.val_samples))
    }
}

fn centre_crop(sample: &SliceSample, size: usize) -> (Array2<f32>, Array2<u8>) {
    let (h, w) = sample.image.dim();
    let (ph, pw) = (h.max(size), w.max(size));
    let mut img = Array2::from_elem((ph, pw), PAD_VALUE);
    let mut mask = Array2::zeros((ph, pw));
    img.slice_mut(s![..h, ..w]).assign(&sample.image);
    mask.slice_mut(s![..h, ..w]).assign(&sample.liver_mask);
    let (oy, ox) = ((ph - size) / 2, (pw - size) / 2);
    (img.slice(s![oy..oy + size, ox..ox + size]).to_owned(), mask.slice(s![oy..oy + size, ox..ox + size]).to_owned())
}

//! Volume inference: stage-1 liver finding, presence gating, liver crop,
//! stage-2 segmentation, uncropping and slice stacking. Also renders
//! contour overlays for review.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::imageops::{keep_largest_component, largest_component_size, threshold};
use crate::ingest::{window_and_normalize, CtVolume, LabelVolume};
use crate::model::Model;
use crate::supervision::mask_edge;
use crate::trainer::CropSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub threshold: f32,
    /// Liver-box padding per side, in pixels.
    pub pad: usize,
    /// A slice holds liver iff the largest stage-1 component reaches this size.
    pub min_component: usize,
    pub stage2_size: usize,
    /// Keep only the largest stage-1 component before cropping.
    pub largest_component: bool,
    pub batch_size: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            threshold: 0.5,
            pad: 35,
            min_component: 20,
            stage2_size: 96,
            largest_component: false,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    pub liver: Array3<u8>,
    pub tumor: Array3<u8>,
    /// `None` for slices where stage 1 found no liver.
    pub per_slice_cropspecs: BTreeMap<usize, Option<CropSpec>>,
    pub case_id: String,
}

impl SegmentationResult {
    pub fn to_labels(&self) -> LabelVolume {
        LabelVolume::from_masks(&self.liver, &self.tumor, self.case_id.clone()).expect("shapes agree by construction")
    }
}

fn round_up_32(v: usize) -> usize {
    v.div_ceil(32) * 32
}

fn check_model(model: &Model, channels: usize, what: &str) -> Result<()> {
    if model.config.out_channels() != channels {
        return Err(Error::Validation(format!(
            "{what} model has {} output channel(s), expected {channels}",
            model.config.out_channels()
        )));
    }
    Ok(())
}

/// Runs `model` over images of equal size in batches, returning the
/// final-head probabilities per image.
fn predict_all(model: &mut Model, images: &[Array2<f32>], batch: usize, slice_ids: &[usize]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(images.len());
    for (chunk, ids) in images.chunks(batch.max(1)).zip(slice_ids.chunks(batch.max(1))) {
        let (h, w) = chunk[0].dim();
        let data: Vec<f32> = chunk.iter().flat_map(|m| m.iter().copied()).collect();
        let probs = model.predict(&Tensor::from_vec([chunk.len(), 1, h, w], data))?;
        for (n, &id) in ids.iter().enumerate() {
            let one = probs.sample(n);
            if one.iter().any(|v| !v.is_finite()) {
                return Err(Error::Inference { slice: id });
            }
            out.push(Tensor::from_vec([1, probs.c(), h, w], one.to_vec()));
        }
    }
    Ok(out)
}

pub fn segment_volume(
    v: &CtVolume,
    stage1: &mut Model,
    stage2: &mut Model,
    opts: &InferenceOptions,
) -> Result<SegmentationResult> {
    check_model(stage1, 1, "stage-1")?;
    check_model(stage2, 2, "stage-2")?;
    if opts.stage2_size == 0 || opts.stage2_size % 32 != 0 {
        return Err(Error::Validation(format!("stage-2 size {} is not a positive multiple of 32", opts.stage2_size)));
    }
    let v = window_and_normalize(v);
    let [depth, h, w] = v.shape();
    let (ph, pw) = (round_up_32(h), round_up_32(w));

    let padded: Vec<Array2<f32>> = v
        .voxels
        .axis_iter(Axis(0))
        .map(|img| {
            let mut p = Array2::from_elem((ph, pw), crate::trainer::PAD_VALUE);
            p.slice_mut(s![..h, ..w]).assign(&img);
            p
        })
        .collect();
    let ids: Vec<usize> = (0..depth).collect();
    let coarse = predict_all(stage1, &padded, opts.batch_size, &ids)?;

    let mut crops = Vec::new();
    let mut crop_specs = Vec::new();
    let mut crop_ids = Vec::new();
    let mut per_slice = BTreeMap::new();
    for (z, p) in coarse.iter().enumerate() {
        let prob = Array2::from_shape_vec((ph, pw), p.channel(0, 0).to_vec()).expect("plane size");
        let mut mask = threshold(prob.slice(s![..h, ..w]), opts.threshold);
        if largest_component_size(mask.view()) < opts.min_component {
            per_slice.insert(z, None);
            continue;
        }
        if opts.largest_component {
            mask = keep_largest_component(mask.view());
        }
        let spec = CropSpec::around(mask.view(), opts.pad, opts.stage2_size).expect("gated mask is nonempty");
        crops.push(spec.crop_image(v.voxels.index_axis(Axis(0), z))?);
        crop_specs.push(spec);
        crop_ids.push(z);
        per_slice.insert(z, Some(spec));
    }

    let mut liver = Array3::<u8>::zeros((depth, h, w));
    let mut tumor = Array3::<u8>::zeros((depth, h, w));
    let fine = predict_all(stage2, &crops, opts.batch_size, &crop_ids)?;
    let size = opts.stage2_size;
    for ((p, spec), &z) in fine.iter().zip(&crop_specs).zip(&crop_ids) {
        let chan = |c: usize| Array2::from_shape_vec((size, size), p.channel(0, c).to_vec()).expect("plane size");
        let l = threshold(spec.uncrop_probs(chan(0).view())?.view(), opts.threshold);
        let t = threshold(spec.uncrop_probs(chan(1).view())?.view(), opts.threshold);
        liver.index_axis_mut(Axis(0), z).assign(&l);
        Zip::from(tumor.index_axis_mut(Axis(0), z)).and(&t).and(&l).for_each(|o, &t, &l| *o = t & l);
    }
    Ok(SegmentationResult { liver, tumor, per_slice_cropspecs: per_slice, case_id: v.case_id.clone() })
}

const LIVER_RGB: [u8; 3] = [40, 220, 60];
const TUMOR_RGB: [u8; 3] = [235, 40, 40];
const TRUTH_RGB: [u8; 3] = [60, 140, 255];

fn paint(rgb: &mut [u8], w: usize, contour: ArrayView2<u8>, color: [u8; 3]) {
    for ((y, x), &v) in contour.indexed_iter() {
        if v != 0 {
            rgb[3 * (y * w + x)..3 * (y * w + x) + 3].copy_from_slice(&color);
        }
    }
}

/// Writes one RGB PNG per slice that contains any predicted or reference
/// label: the windowed image in gray with liver (green) and tumor (red)
/// contours, and reference contours (blue) when `truth` is given.
pub fn render_overlay(
    v: &CtVolume,
    pred: &LabelVolume,
    truth: Option<&LabelVolume>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if v.shape() != pred.shape() || truth.is_some_and(|t| t.shape() != v.shape()) {
        return Err(Error::Validation("overlay volumes differ in shape".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let v = window_and_normalize(v);
    let [depth, h, w] = v.shape();
    let mut written = Vec::new();
    for z in 0..depth {
        let labels = pred.labels.index_axis(Axis(0), z);
        let ref_labels = truth.map(|t| t.labels.index_axis(Axis(0), z));
        if labels.iter().all(|&l| l == 0) && ref_labels.is_none_or(|r| r.iter().all(|&l| l == 0)) {
            continue;
        }
        let img = v.voxels.index_axis(Axis(0), z);
        let mut rgb: Vec<u8> = img
            .iter()
            .flat_map(|&x| {
                let g = ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                [g, g, g]
            })
            .collect();
        if let Some(r) = ref_labels {
            paint(&mut rgb, w, mask_edge(r.mapv(|l| u8::from(l >= 1)).view()).view(), TRUTH_RGB);
            paint(&mut rgb, w, mask_edge(r.mapv(|l| u8::from(l == 2)).view()).view(), TRUTH_RGB);
        }
        paint(&mut rgb, w, mask_edge(labels.mapv(|l| u8::from(l >= 1)).view()).view(), LIVER_RGB);
        paint(&mut rgb, w, mask_edge(labels.mapv(|l| u8::from(l == 2)).view()).view(), TUMOR_RGB);
        let path = out_dir.join(format!("{}_z{z:03}.png", v.case_id));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header()
            .and_then(|mut wr| wr.write_image_data(&rgb))
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        written.push(path);
    }
    Ok(written)
}

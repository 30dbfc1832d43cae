//! Liver-region cropping for the second stage and its inverse.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{bbox, resize_bilinear, resize_nearest};
use crate::ingest::SliceSample;

/// Everything needed to map a stage-2 crop back onto its slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    /// Half-open box `(y0, x0, y1, x1)` in original-slice pixels.
    pub bbox: (usize, usize, usize, usize),
    pub pad: usize,
    pub original_size: (usize, usize),
    pub resized_to: (usize, usize),
}

impl CropSpec {
    /// Tight box of `mask` grown by `pad` per side and clipped to the image.
    /// `None` when the mask is empty.
    pub fn around(mask: ArrayView2<u8>, pad: usize, size: usize) -> Option<CropSpec> {
        let (h, w) = mask.dim();
        let (y0, x0, y1, x1) = bbox(mask)?;
        Some(CropSpec {
            bbox: (y0.saturating_sub(pad), x0.saturating_sub(pad), (y1 + pad).min(h), (x1 + pad).min(w)),
            pad,
            original_size: (h, w),
            resized_to: (size, size),
        })
    }

    pub fn height(&self) -> usize {
        self.bbox.2 - self.bbox.0
    }

    pub fn width(&self) -> usize {
        self.bbox.3 - self.bbox.1
    }

    fn check(&self, dim: (usize, usize)) -> Result<()> {
        if dim != self.original_size {
            return Err(Error::Validation(format!("crop recorded for {:?}, applied to {:?}", self.original_size, dim)));
        }
        Ok(())
    }

    pub fn crop_image(&self, img: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.check(img.dim())?;
        let (y0, x0, y1, x1) = self.bbox;
        let (h, w) = self.resized_to;
        Ok(resize_bilinear(img.slice(s![y0..y1, x0..x1]), h, w))
    }

    pub fn crop_mask(&self, mask: ArrayView2<u8>) -> Result<Array2<u8>> {
        self.check(mask.dim())?;
        let (y0, x0, y1, x1) = self.bbox;
        let (h, w) = self.resized_to;
        Ok(resize_nearest(mask.slice(s![y0..y1, x0..x1]), h, w))
    }

    /// Resizes a crop-space probability map back to the box (bilinear) and
    /// places it in an otherwise zero slice.
    pub fn uncrop_probs(&self, p: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.uncrop_with(p, 0.0, |v, h, w| resize_bilinear(v, h, w))
    }

    /// Nearest-neighbour inverse for masks.
    pub fn uncrop_mask(&self, m: ArrayView2<u8>) -> Result<Array2<u8>> {
        self.uncrop_with(m, 0, |v, h, w| resize_nearest(v, h, w))
    }

    fn uncrop_with<T: Copy>(
        &self,
        v: ArrayView2<T>,
        zero: T,
        resize: impl Fn(ArrayView2<T>, usize, usize) -> Array2<T>,
    ) -> Result<Array2<T>> {
        if v.dim() != self.resized_to {
            return Err(Error::Validation(format!("crop-space map is {:?}, expected {:?}", v.dim(), self.resized_to)));
        }
        let (y0, x0, y1, x1) = self.bbox;
        let mut out = Array2::from_elem(self.original_size, zero);
        out.slice_mut(s![y0..y1, x0..x1]).assign(&resize(v, self.height(), self.width()));
        Ok(out)
    }
}

/// Which liver mask a crop is derived from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiverSource {
    GroundTruth,
    Predicted,
}

/// A slice cut to its (padded) liver box and resized to `size × size`.
/// `predicted` supplies the liver mask when `source` is `Predicted`.
/// Returns `None` (the no-liver signal) when the chosen mask is empty.
pub fn crop_liver_region(
    sample: &SliceSample,
    source: LiverSource,
    predicted: Option<ArrayView2<u8>>,
    pad: usize,
    size: usize,
) -> Result<Option<(SliceSample, CropSpec)>> {
    let mask = match source {
        LiverSource::GroundTruth => sample.liver_mask.view(),
        LiverSource::Predicted => {
            predicted.ok_or_else(|| Error::Validation("predicted crop without a predicted mask".into()))?
        }
    };
    if mask.dim() != sample.image.dim() {
        return Err(Error::Validation("liver mask and image differ in shape".into()));
    }
    let Some(spec) = CropSpec::around(mask, pad, size) else {
        return Ok(None);
    };
    let cropped = SliceSample {
        image: spec.crop_image(sample.image.view())?,
        liver_mask: spec.crop_mask(sample.liver_mask.view())?,
        tumor_mask: spec.crop_mask(sample.tumor_mask.view())?,
        case_id: sample.case_id.clone(),
        slice_index: sample.slice_index,
    };
    Ok(Some((cropped, spec)))
}

//! CT and label volumes: NIfTI I/O, HU windowing and slice decomposition.
//!
//! Arrays are indexed `(z, y, x)`; NIfTI stores `(x, y, z)` so axes are
//! reversed on the way in and out.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, Axis, Ix3, Zip};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};

/// Lower and upper HU bounds of the abdominal window.
pub const HU_WINDOW: (f32, f32) = (-100.0, 240.0);

#[derive(Clone, Debug, PartialEq)]
pub struct CtVolume {
    pub voxels: Array3<f32>,
    /// Voxel size in millimetres, `(z, y, x)`.
    pub spacing: [f64; 3],
    pub case_id: String,
    /// Set by [`window_and_normalize`]; values are then in `[-1, 1]`.
    pub normalized: bool,
}

impl CtVolume {
    pub fn new(voxels: Array3<f32>, spacing: [f64; 3], case_id: impl Into<String>) -> Result<Self> {
        let v = CtVolume { voxels, spacing, case_id: case_id.into(), normalized: false };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Validation(format!(
                "{}: spacing {:?} must be strictly positive",
                self.case_id, self.spacing
            )));
        }
        if self.voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("{}: non-finite voxel values", self.case_id)));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        let (z, y, x) = self.voxels.dim();
        [z, y, x]
    }
}

/// Labels `0` background, `1` liver, `2` tumor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    pub labels: Array3<u8>,
    pub case_id: String,
}

impl LabelVolume {
    pub fn new(labels: Array3<u8>, case_id: impl Into<String>) -> Result<Self> {
        let case_id = case_id.into();
        if let Some(bad) = labels.iter().find(|&&l| l > 2) {
            return Err(Error::Validation(format!("{case_id}: label value {bad} outside {{0,1,2}}")));
        }
        Ok(LabelVolume { labels, case_id })
    }

    /// Builds labels from binary liver and tumor masks, OR-ing the tumor
    /// into the liver so that the nesting holds.
    pub fn from_masks(liver: &Array3<u8>, tumor: &Array3<u8>, case_id: impl Into<String>) -> Result<Self> {
        if liver.dim() != tumor.dim() {
            return Err(Error::Validation("liver and tumor masks differ in shape".into()));
        }
        let labels = Zip::from(liver).and(tumor).map_collect(|&l, &t| {
            if t != 0 {
                2
            } else if l != 0 {
                1
            } else {
                0
            }
        });
        Ok(LabelVolume { labels, case_id: case_id.into() })
    }

    pub fn shape(&self) -> [usize; 3] {
        let (z, y, x) = self.labels.dim();
        [z, y, x]
    }

    pub fn liver_mask(&self) -> Array3<u8> {
        self.labels.mapv(|l| u8::from(l >= 1))
    }

    pub fn tumor_mask(&self) -> Array3<u8> {
        self.labels.mapv(|l| u8::from(l == 2))
    }
}

/// Sets the liver bit wherever the tumor bit is set.
pub fn enforce_nesting(liver: &mut Array2<u8>, tumor: ArrayView2<u8>) {
    Zip::from(liver).and(tumor).for_each(|l, &t| {
        if t != 0 {
            *l = 1;
        }
    });
}

/// One axial slice with its masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub image: Array2<f32>,
    pub liver_mask: Array2<u8>,
    pub tumor_mask: Array2<u8>,
    pub case_id: String,
    pub slice_index: usize,
}

impl SliceSample {
    pub fn has_liver(&self) -> bool {
        self.liver_mask.iter().any(|&v| v != 0)
    }
}

/// Clamps to the HU window and maps linearly onto `[-1, 1]`.
/// Already-normalized volumes are returned unchanged.
pub fn window_and_normalize(v: &CtVolume) -> CtVolume {
    if v.normalized {
        return v.clone();
    }
    let (lo, hi) = HU_WINDOW;
    let half = (hi - lo) / 2.0;
    CtVolume {
        voxels: v.voxels.mapv(|x| (x.clamp(lo, hi) - lo) / half - 1.0),
        spacing: v.spacing,
        case_id: v.case_id.clone(),
        normalized: true,
    }
}

pub fn extract_slices(v: &CtVolume, l: &LabelVolume) -> Result<Vec<SliceSample>> {
    if v.shape() != l.shape() {
        return Err(Error::Validation(format!(
            "{}: image shape {:?} differs from label shape {:?}",
            v.case_id,
            v.shape(),
            l.shape()
        )));
    }
    Ok(v.voxels
        .axis_iter(Axis(0))
        .zip(l.labels.axis_iter(Axis(0)))
        .enumerate()
        .map(|(z, (img, lab))| SliceSample {
            image: img.to_owned(),
            liver_mask: lab.mapv(|x| u8::from(x >= 1)),
            tumor_mask: lab.mapv(|x| u8::from(x == 2)),
            case_id: v.case_id.clone(),
            slice_index: z,
        })
        .collect())
}

/// Reassembles slice masks (in any order) into a label volume.
pub fn restack(samples: &[SliceSample]) -> Result<LabelVolume> {
    let first = samples.first().ok_or_else(|| Error::Validation("no slices to stack".into()))?;
    let (h, w) = first.liver_mask.dim();
    let depth = samples.len();
    let mut labels = Array3::<u8>::zeros((depth, h, w));
    let mut seen = vec![false; depth];
    for s in samples {
        if s.slice_index >= depth || seen[s.slice_index] || s.liver_mask.dim() != (h, w) {
            return Err(Error::Validation(format!("inconsistent slice {}", s.slice_index)));
        }
        seen[s.slice_index] = true;
        let mut plane = labels.index_axis_mut(Axis(0), s.slice_index);
        Zip::from(&mut plane)
            .and(&s.liver_mask)
            .and(&s.tumor_mask)
            .for_each(|o, &l, &t| *o = if t != 0 { 2 } else { u8::from(l != 0) });
    }
    Ok(LabelVolume { labels, case_id: first.case_id.clone() })
}

/// Case identifier derived from a file name: `case_0003_ct.nii.gz` → `case_0003`.
/// The `_seg` and `_pred` suffixes are stripped the same way.
pub fn case_id_from_path(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii")).unwrap_or(name);
    stem.strip_suffix("_ct")
        .or_else(|| stem.strip_suffix("_seg"))
        .or_else(|| stem.strip_suffix("_pred"))
        .unwrap_or(stem)
        .to_string()
}

/// `case_X_ct.nii.gz` → `case_X_seg.nii.gz`, if the name follows that pattern.
pub fn sibling_label_path(ct: &Path) -> Option<PathBuf> {
    let name = ct.file_name()?.to_str()?;
    let (stem, ext) = name
        .strip_suffix(".nii.gz")
        .map(|s| (s, ".nii.gz"))
        .or_else(|| name.strip_suffix(".nii").map(|s| (s, ".nii")))?;
    let base = stem.strip_suffix("_ct")?;
    Some(ct.with_file_name(format!("{base}_seg{ext}")))
}

fn nifti_err(path: &Path, e: nifti::NiftiError) -> Error {
    match e {
        nifti::NiftiError::Io(io) => Error::io(path, io),
        other => Error::Nifti { path: path.to_path_buf(), message: other.to_string() },
    }
}

fn read_array<T: nifti::DataElement>(path: &Path) -> Result<(Array3<T>, [f64; 3])> {
    let obj = ReaderOptions::new().read_file(path).map_err(|e| nifti_err(path, e))?;
    let p = obj.header().pixdim;
    let spacing = [p[3] as f64, p[2] as f64, p[1] as f64];
    let arr = obj.into_volume().into_ndarray::<T>().map_err(|e| nifti_err(path, e))?;
    let arr = arr
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::Nifti { path: path.to_path_buf(), message: "expected a 3-D volume".into() })?;
    let zyx = arr.reversed_axes();
    Ok((zyx.as_standard_layout().into_owned(), spacing))
}

fn writer_header(spacing: [f64; 3], path: &Path) -> Result<NiftiHeader> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(NiftiHeader {
        pixdim: [1.0, spacing[2] as f32, spacing[1] as f32, spacing[0] as f32, 1.0, 1.0, 1.0, 1.0],
        // millimetres
        xyzt_units: 2,
        ..NiftiHeader::default()
    })
}

pub fn load_ct(path: &Path) -> Result<CtVolume> {
    let (voxels, spacing) = read_array::<f32>(path)?;
    CtVolume::new(voxels, spacing, case_id_from_path(path))
}

pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    let (labels, _) = read_array::<u8>(path)?;
    LabelVolume::new(labels, case_id_from_path(path))
}

/// Loads a raw-HU CT volume and, when a sibling `_seg` file exists, its
/// label volume.
pub fn load_volume(path: &Path) -> Result<(CtVolume, Option<LabelVolume>)> {
    let ct = load_ct(path)?;
    let labels = match sibling_label_path(path).filter(|p| p.exists()) {
        Some(p) => {
            let l = load_labels(&p)?;
            if l.shape() != ct.shape() {
                return Err(Error::Validation(format!(
                    "{}: label shape {:?} differs from image shape {:?}",
                    ct.case_id,
                    l.shape(),
                    ct.shape()
                )));
            }
            Some(l)
        }
        None => None,
    };
    Ok((ct, labels))
}

pub fn save_ct(v: &CtVolume, path: &Path) -> Result<()> {
    let header = writer_header(v.spacing, path)?;
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&v.voxels.view().reversed_axes())
        .map_err(|e| nifti_err(path, e))
}

pub fn save_labels(l: &LabelVolume, spacing: [f64; 3], path: &Path) -> Result<()> {
    let header = writer_header(spacing, path)?;
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&l.labels.view().reversed_axes())
        .map_err(|e| nifti_err(path, e))
}

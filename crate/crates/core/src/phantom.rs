//! Synthetic CT phantoms: an ellipsoidal liver with spherical tumors in
//! Gaussian noise, plus dataset generation with a split manifest.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{self, CtVolume, LabelVolume};

/// Mean intensities in HU.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub liver_mean: f64,
    pub tumor_mean: f64,
    pub background_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Volume shape `(z, y, x)` in voxels.
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Liver ellipsoid semi-axes `(z, y, x)` in voxels.
    pub liver_axes: [f64; 3],
    /// Inclusive range the per-case tumor count is drawn from.
    pub n_tumors: [usize; 2],
    pub tumor_radius_range: [f64; 2],
    pub contrast: Contrast,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [64, 96, 96],
            spacing: [2.5, 1.0, 1.0],
            liver_axes: [20.0, 30.0, 26.0],
            n_tumors: [1, 3],
            tumor_radius_range: [3.0, 7.0],
            contrast: Contrast { liver_mean: 60.0, tumor_mean: 100.0, background_mean: -60.0 },
            noise_sigma: 12.0,
            seed: 0,
        }
    }
}

/// Fraction of cases whose first tumor is placed against the liver surface.
pub const BOUNDARY_TUMOR_RATE: f64 = 0.3;
const MAX_PLACEMENT_TRIES: usize = 20_000;

impl PhantomSpec {
    pub fn with_tumors(mut self, n: usize) -> Self {
        self.n_tumors = [n, n];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.contrast;
        let fail = |m: &str| Err(Error::Validation(format!("phantom spec: {m}")));
        if self.shape.iter().any(|&s| s == 0) {
            return fail("shape must be positive");
        }
        if self.liver_axes.iter().any(|&a| a <= 1.0) {
            return fail("liver semi-axes must exceed one voxel");
        }
        if self.n_tumors[0] > self.n_tumors[1] {
            return fail("tumor count range is reversed");
        }
        let [r0, r1] = self.tumor_radius_range;
        if !(r0 > 0.0 && r0 <= r1) {
            return fail("tumor radius range must satisfy 0 < min ≤ max");
        }
        if c.liver_mean == c.background_mean || c.tumor_mean == c.liver_mean {
            return fail("liver, tumor and background need nonzero contrast");
        }
        if self.noise_sigma < 0.0 {
            return fail("noise sigma must be non-negative");
        }
        if self.spacing.iter().any(|&s| s <= 0.0) {
            return fail("spacing must be positive");
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
    cos: f64,
    sin: f64,
}

impl Ellipsoid {
    /// Normalized radius; ≤ 1 inside.
    fn rho(&self, z: f64, y: f64, x: f64) -> f64 {
        let (dz, dy, dx) = (z - self.center[0], y - self.center[1], x - self.center[2]);
        let ry = self.cos * dy + self.sin * dx;
        let rx = -self.sin * dy + self.cos * dx;
        ((dz / self.axes[0]).powi(2) + (ry / self.axes[1]).powi(2) + (rx / self.axes[2]).powi(2)).sqrt()
    }
}

fn sphere_voxels(shape: [usize; 3], c: [f64; 3], r: f64) -> impl Iterator<Item = [usize; 3]> {
    let lo = |i: usize| ((c[i] - r).floor().max(0.0)) as usize;
    let hi = |i: usize| ((c[i] + r).ceil() as usize).min(shape[i] - 1);
    let (z0, z1, y0, y1, x0, x1) = (lo(0), hi(0), lo(1), hi(1), lo(2), hi(2));
    (z0..=z1).flat_map(move |z| {
        (y0..=y1).flat_map(move |y| {
            (x0..=x1).filter_map(move |x| {
                let d2 = (z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2);
                (d2 <= r * r).then_some([z, y, x])
            })
        })
    })
}

fn touches_surface(liver: &Array3<u8>, [z, y, x]: [usize; 3]) -> bool {
    let (dz, dy, dx) = liver.dim();
    let out = |z: isize, y: isize, x: isize| {
        z < 0
            || y < 0
            || x < 0
            || z as usize >= dz
            || y as usize >= dy
            || x as usize >= dx
            || liver[[z as usize, y as usize, x as usize]] == 0
    };
    let (z, y, x) = (z as isize, y as isize, x as isize);
    out(z - 1, y, x) || out(z + 1, y, x) || out(z, y - 1, x) || out(z, y + 1, x) || out(z, y, x - 1) || out(z, y, x + 1)
}

/// Generates a raw-HU volume and its labels; bit-identical for a fixed seed.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(CtVolume, LabelVolume)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shape = spec.shape;
    let jitter = |rng: &mut ChaCha8Rng, amp: f64| rng.random_range(-amp..=amp);
    let liver = Ellipsoid {
        center: [
            shape[0] as f64 / 2.0 + jitter(&mut rng, 2.0),
            shape[1] as f64 / 2.0 + jitter(&mut rng, 3.0),
            shape[2] as f64 / 2.0 + jitter(&mut rng, 3.0),
        ],
        axes: spec.liver_axes.map(|a| a * rng.random_range(0.9..=1.05)),
        cos: 0.0,
        sin: 0.0,
    };
    let angle: f64 = rng.random_range(-0.35..=0.35);
    let liver = Ellipsoid { cos: angle.cos(), sin: angle.sin(), ..liver };
    let mut labels = Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(z, y, x)| {
        u8::from(liver.rho(z as f64, y as f64, x as f64) <= 1.0)
    });
    let liver_mask = labels.clone();
    if liver_mask.iter().all(|&v| v == 0) {
        return Err(Error::Generation { seed: spec.seed, message: "liver ellipsoid lies outside the volume".into() });
    }

    let n_tumors = rng.random_range(spec.n_tumors[0]..=spec.n_tumors[1]);
    let boundary_case = rng.random_bool(BOUNDARY_TUMOR_RATE);
    let [r0, r1] = spec.tumor_radius_range;
    for t in 0..n_tumors {
        let want_touch = boundary_case && t == 0;
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let r = rng.random_range(r0..=r1);
            let c = [
                rng.random_range(0.0..shape[0] as f64),
                rng.random_range(0.0..shape[1] as f64),
                rng.random_range(0.0..shape[2] as f64),
            ];
            if liver.rho(c[0], c[1], c[2]) > 1.0 {
                continue;
            }
            if sphere_voxels(shape, c, r).any(|[z, y, x]| liver_mask[[z, y, x]] == 0) {
                continue;
            }
            if want_touch != sphere_voxels(shape, c, r).any(|v| touches_surface(&liver_mask, v)) {
                continue;
            }
            for [z, y, x] in sphere_voxels(shape, c, r) {
                labels[[z, y, x]] = 2;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation {
                seed: spec.seed,
                message: format!("could not place tumor {} inside the liver", t + 1),
            });
        }
    }

    let sigma = spec.noise_sigma;
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let c = spec.contrast;
    let voxels = labels.mapv(|l| {
        let mean = match l {
            2 => c.tumor_mean,
            1 => c.liver_mean,
            _ => c.background_mean,
        };
        let n = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        (mean + n) as f32
    });
    let case_id = format!("phantom_{}", spec.seed);
    Ok((CtVolume::new(voxels, spec.spacing, case_id.clone())?, LabelVolume::new(labels, case_id)?))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Dataset index written next to the generated volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed_base: u64,
    pub n_cases: usize,
    pub spec: PhantomSpec,
    pub splits: Splits,
}

pub const MANIFEST_NAME: &str = "manifest.toml";

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn all_cases(&self) -> impl Iterator<Item = &String> {
        self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test)
    }
}

pub fn ct_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}_ct.nii.gz"))
}

pub fn seg_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}_seg.nii.gz"))
}

/// Case counts for a split; validation and training counts are rounded,
/// the test split takes the remainder.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("split fractions {fractions:?} must sum to 1")));
    }
    let train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let val = ((n as f64 * fractions[1]).round() as usize).min(n - train);
    Ok([train, val, n - train - val])
}

/// Writes `n_cases` phantom pairs and the manifest into `dir`.
/// Case `i` uses seed `seed_base + i`.
pub fn make_dataset(
    dir: &Path,
    n_cases: usize,
    template: &PhantomSpec,
    fractions: [f64; 3],
    seed_base: u64,
) -> Result<Manifest> {
    let [n_train, n_val, _] = split_counts(n_cases, fractions)?;
    template.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut splits = Splits::default();
    for i in 0..n_cases {
        let spec = PhantomSpec { seed: seed_base + i as u64, ..template.clone() };
        let (mut ct, mut labels) = generate_phantom(&spec)?;
        let case_id = format!("case_{i:04}");
        ct.case_id = case_id.clone();
        labels.case_id = case_id.clone();
        ingest::save_ct(&ct, &ct_path(dir, &case_id))?;
        ingest::save_labels(&labels, ct.spacing, &seg_path(dir, &case_id))?;
        let bucket = if i < n_train {
            &mut splits.train
        } else if i < n_train + n_val {
            &mut splits.val
        } else {
            &mut splits.test
        };
        bucket.push(case_id);
    }
    let manifest = Manifest { seed_base, n_cases, spec: template.clone(), splits };
    let path = dir.join(MANIFEST_NAME);
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec { seed, ..PhantomSpec::default() }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_phantom(&small(4)).unwrap();
        let b = generate_phantom(&small(4)).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&small(5)).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn no_tumors_means_no_label_2() {
        let (_, l) = generate_phantom(&small(1).with_tumors(0)).unwrap();
        assert!(l.labels.iter().all(|&v| v <= 1));
        assert!(l.labels.iter().any(|&v| v == 1));
    }

    #[test]
    fn tumor_volume_within_sphere_bounds() {
        let spec = PhantomSpec { tumor_radius_range: [3.0, 6.0], ..small(9).with_tumors(2) };
        let (_, l) = generate_phantom(&spec).unwrap();
        let count = l.labels.iter().filter(|&&v| v == 2).count() as f64;
        let ball = |r: f64| 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        assert!(count >= 2.0 * ball(3.0) * 0.5 && count <= 2.0 * ball(6.0) * 1.5, "{count}");
    }

    #[test]
    fn split_count_examples() {
        assert_eq!(split_counts(10, [0.6, 0.2, 0.2]).unwrap(), [6, 2, 2]);
        assert_eq!(split_counts(1, [1.0, 0.0, 0.0]).unwrap(), [1, 0, 0]);
        assert!(split_counts(4, [0.5, 0.2, 0.2]).is_err());
    }

    #[test]
    fn invalid_contrast_is_rejected() {
        let mut spec = small(0);
        spec.contrast.tumor_mean = spec.contrast.liver_mean;
        assert!(matches!(generate_phantom(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn impossible_tumor_names_the_seed() {
        let spec = PhantomSpec { tumor_radius_range: [40.0, 40.0], ..small(77) };
        match generate_phantom(&spec) {
            Err(Error::Generation { seed, .. }) => assert_eq!(seed, 77),
            other => panic!("unexpected {other:?}"),
        }
    }
}

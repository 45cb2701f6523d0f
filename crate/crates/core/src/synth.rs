//! Seeded phantoms and smooth ground-truth deformations.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FmirError, Result};
use crate::seed;
use crate::volume::{warp_segmentation, warp_volume, DeformationField, Interpolation, Segmentation, Shape3, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "cardiac-like")]
    CardiacLike,
    #[serde(rename = "abdomen-like")]
    AbdomenLike,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::CardiacLike => "cardiac-like",
            Family::AbdomenLike => "abdomen-like",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = FmirError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cardiac-like" => Ok(Family::CardiacLike),
            "abdomen-like" => Ok(Family::AbdomenLike),
            other => Err(FmirError::InvalidArgument(format!("unknown phantom family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: Shape3,
    pub family: Family,
    pub labels: usize,
    pub noise_sigma: f32,
    pub spacing_mm: [f32; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [64, 64, 16],
            family: Family::CardiacLike,
            labels: 3,
            noise_sigma: 0.02,
            spacing_mm: [1.5, 1.5, 3.0],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.labels < 1 {
            return Err(FmirError::Config("phantom needs at least one label".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(FmirError::Config(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.shape.iter().any(|&s| s < 4) {
            return Err(FmirError::Config(format!("phantom shape too small: {:?}", self.shape)));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(FmirError::Config(format!("spacing must be positive: {:?}", self.spacing_mm)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub fixed: Volume,
    pub moving: Volume,
    pub fixed_seg: Segmentation,
    pub moving_seg: Segmentation,
    pub gt_field: DeformationField,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

fn jitter(rng: &mut impl Rng, amount: f64) -> f64 {
    1.0 + rng.random_range(-amount..=amount)
}

/// Nested shells: label L occupies the L-th ellipsoid minus the (L+1)-th.
fn cardiac_regions(spec: &PhantomSpec, rng: &mut impl Rng) -> Result<Vec<Ellipsoid>> {
    let s = spec.shape.map(|v| v as f64);
    let center: [f64; 3] = std::array::from_fn(|a| (s[a] - 1.0) / 2.0 + rng.random_range(-0.05..=0.05) * s[a]);
    let outer: [f64; 3] = [0.34 * s[0] * jitter(rng, 0.1), 0.34 * s[1] * jitter(rng, 0.1), 0.38 * s[2] * jitter(rng, 0.05)];
    let l = spec.labels as f64;
    let regions: Vec<Ellipsoid> = (0..spec.labels)
        .map(|i| {
            let f = 1.0 - 0.75 * i as f64 / l;
            Ellipsoid { center, radii: outer.map(|r| r * f) }
        })
        .collect();
    if regions.last().is_some_and(|e| e.radii.iter().any(|&r| r < 1.0)) {
        return Err(FmirError::Config(format!(
            "{} nested labels do not fit in shape {:?}",
            spec.labels, spec.shape
        )));
    }
    Ok(regions)
}

/// Disjoint blobs placed by rejection sampling.
fn abdomen_regions(spec: &PhantomSpec, rng: &mut impl Rng) -> Result<Vec<Ellipsoid>> {
    let s = spec.shape.map(|v| v as f64);
    let mut out: Vec<Ellipsoid> = Vec::with_capacity(spec.labels);
    let mut tries = 0;
    while out.len() < spec.labels {
        tries += 1;
        if tries > 5000 {
            return Err(FmirError::Config(format!(
                "{} disjoint labels do not fit in shape {:?}",
                spec.labels, spec.shape
            )));
        }
        let radii = [
            s[0] * rng.random_range(0.10..0.17),
            s[1] * rng.random_range(0.10..0.17),
            s[2] * rng.random_range(0.22..0.32),
        ];
        if radii.iter().any(|&r| r < 1.0) {
            continue;
        }
        if (0..3).any(|a| 2.0 * radii[a] + 2.0 >= s[a]) {
            continue;
        }
        let center: [f64; 3] = std::array::from_fn(|a| rng.random_range(radii[a] + 1.0..s[a] - 1.0 - radii[a]));
        let cand = Ellipsoid { center, radii };
        let clear = out.iter().all(|e| {
            (0..3)
                .map(|a| ((e.center[a] - cand.center[a]) / (e.radii[a] + cand.radii[a] + 2.0)).powi(2))
                .sum::<f64>()
                > 1.0
        });
        if clear {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Smooth within-band texture: correlation length and standard deviation.
const TEXTURE_SIGMA: f64 = 2.0;
const TEXTURE_STD: f64 = 0.03;

/// Background level and per-label intensity bands.
fn intensity_bands(family: Family, labels: usize) -> (f64, Vec<(f64, f64)>) {
    match family {
        Family::CardiacLike => (
            0.08,
            (0..labels)
                .map(|i| {
                    let c = 0.35 + 0.55 * (i + 1) as f64 / labels as f64;
                    (c - 0.06, c)
                })
                .collect(),
        ),
        Family::AbdomenLike => (
            0.45,
            (0..labels)
                .map(|i| {
                    let c = if i % 2 == 0 { 0.9 - 0.05 * i as f64 } else { 0.12 + 0.04 * i as f64 };
                    (c - 0.05, c + 0.05)
                })
                .collect(),
        ),
    }
}

/// Separable Gaussian blur with truncation radius ceil(3 sigma) and
/// replicate borders, applied to every channel of a (C, H, W, D) array.
pub fn gaussian_smooth(data: &mut Array4<f32>, sigma: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let ru = r as usize;
    for axis in 1..4 {
        let n = data.shape()[axis];
        let mut padded = vec![0.0f64; n + 2 * ru];
        for mut lane in data.lanes_mut(ndarray::Axis(axis)) {
            for (i, p) in padded.iter_mut().enumerate() {
                *p = lane[i.saturating_sub(ru).min(n - 1)] as f64;
            }
            for (i, v) in lane.iter_mut().enumerate() {
                *v = padded[i..i + kernel.len()].iter().zip(&kernel).map(|(a, w)| a * w).sum::<f64>() as f32;
            }
        }
    }
}

/// Phantom intensity volume and its label map.
pub fn gen_phantom(spec: &PhantomSpec, seed_v: u64) -> Result<(Volume, Segmentation)> {
    spec.validate()?;
    let mut rng = seed::rng(seed::derive(seed_v, &[seed::tag::PHANTOM]));
    let regions = match spec.family {
        Family::CardiacLike => cardiac_regions(spec, &mut rng)?,
        Family::AbdomenLike => abdomen_regions(spec, &mut rng)?,
    };
    let labels = Array3::from_shape_fn(spec.shape, |(x, y, z)| {
        let p = [x, y, z];
        match spec.family {
            Family::CardiacLike => regions.iter().take_while(|e| e.contains(p)).count() as i32,
            Family::AbdomenLike => regions.iter().position(|e| e.contains(p)).map_or(0, |i| i as i32 + 1),
        }
    });
    let (bg, bands) = intensity_bands(spec.family, spec.labels);
    let mut irng = seed::rng(seed::derive(seed_v, &[seed::tag::INTENSITY]));
    let levels: Vec<f64> = std::iter::once(bg)
        .chain(bands.iter().map(|&(lo, hi)| irng.random_range(lo..=hi)))
        .collect();
    let mut img = labels.mapv(|l| levels[l as usize] as f32).insert_axis(ndarray::Axis(0));
    let [h, w, d] = spec.shape;
    let mut trng = seed::rng(seed::derive(seed_v, &[seed::tag::INTENSITY, 1]));
    let mut texture = Array4::from_shape_simple_fn((1, h, w, d), || StandardNormal.sample(&mut trng));
    gaussian_smooth(&mut texture, TEXTURE_SIGMA);
    let sd = (texture.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / texture.len() as f64).sqrt();
    if sd > 0.0 {
        img.zip_mut_with(&texture, |v, t| *v += (TEXTURE_STD * *t as f64 / sd) as f32);
    }
    gaussian_smooth(&mut img, 0.7);
    let mut img = img.index_axis_move(ndarray::Axis(0), 0);
    if spec.noise_sigma > 0.0 {
        let mut nrng = seed::rng(seed::derive(seed_v, &[seed::tag::NOISE]));
        let noise = Normal::new(0.0f32, spec.noise_sigma).map_err(|e| FmirError::Config(e.to_string()))?;
        img.iter_mut().for_each(|v| *v += noise.sample(&mut nrng));
    }
    let seg = Segmentation::with_label_set(labels, (1..=spec.labels as i32).collect())?;
    Ok((Volume::new(img, spec.spacing_mm)?, seg))
}

/// Gaussian-smoothed white noise rescaled so the largest displacement norm is
/// `max_magnitude` voxels.
pub fn gen_smooth_field(shape: Shape3, max_magnitude: f32, smooth_sigma: f32, seed_v: u64) -> Result<DeformationField> {
    if !(max_magnitude >= 0.0) || !max_magnitude.is_finite() {
        return Err(FmirError::InvalidArgument(format!("max magnitude must be >= 0, got {max_magnitude}")));
    }
    if !(smooth_sigma > 0.0) || !smooth_sigma.is_finite() {
        return Err(FmirError::InvalidArgument(format!("smooth sigma must be > 0, got {smooth_sigma}")));
    }
    if max_magnitude == 0.0 {
        return DeformationField::constant(shape, [0.0; 3]);
    }
    let mut rng = seed::rng(seed::derive(seed_v, &[seed::tag::FIELD]));
    // noise is drawn on a grid padded by the kernel radius and the valid
    // centre is kept, so displacement statistics do not depend on position
    let r = (3.0 * smooth_sigma as f64).ceil() as usize;
    let mut noise = Array4::from_shape_simple_fn((3, shape[0] + 2 * r, shape[1] + 2 * r, shape[2] + 2 * r), || {
        StandardNormal.sample(&mut rng)
    });
    gaussian_smooth(&mut noise, smooth_sigma as f64);
    let noise = noise
        .slice(ndarray::s![.., r..r + shape[0], r..r + shape[1], r..r + shape[2]])
        .to_owned();
    let f = DeformationField::new(noise)?;
    let m = f.max_norm();
    if m == 0.0 {
        return Ok(f);
    }
    let scale = max_magnitude as f64 / m as f64;
    DeformationField::new(f.into_disp().mapv(|v| (v as f64 * scale) as f32))
}

/// Moving is the phantom and fixed is the phantom warped by the ground-truth
/// field, so that `gt_field` itself maps moving onto fixed.
pub fn make_pair(spec: &PhantomSpec, max_magnitude: f32, smooth_sigma: f32, seed_v: u64) -> Result<PairSample> {
    let (moving, moving_seg) = gen_phantom(spec, seed_v)?;
    let gt_field = gen_smooth_field(spec.shape, max_magnitude, smooth_sigma, seed_v)?;
    let fixed = warp_volume(&moving, &gt_field, Interpolation::Trilinear)?;
    let fixed_seg = warp_segmentation(&moving_seg, &gt_field)?;
    Ok(PairSample { fixed, moving, fixed_seg, moving_seg, gt_field, seed: seed_v })
}

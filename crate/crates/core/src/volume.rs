//! Core 3D value types and the deformation-field algebra: warping,
//! composition, resampling and Jacobian determinants.
//!
//! All arrays use the axis order (channels, H, W, D). Displacements are stored
//! in voxel units; physical spacing only matters for surface distances.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, ArrayView3};

use crate::error::{FmirError, Result};
use crate::interp::{self, AxisMap};

pub type Shape3 = [usize; 3];

fn check_shape(shape: Shape3) -> Result<()> {
    if shape.iter().any(|&d| d < 1) {
        return Err(FmirError::InvalidShape(format!("{shape:?}: every dimension must be >= 1")));
    }
    Ok(())
}

fn check_finite(data: &[f32], what: &str) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(FmirError::NonFinite(format!("{what} at flat index {i}")));
    }
    Ok(())
}

fn dims3<T>(a: &Array3<T>) -> Shape3 {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

/// A scalar intensity volume with per-axis voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: [f32; 3],
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f32; 3]) -> Result<Self> {
        check_shape(dims3(&data))?;
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(FmirError::InvalidArgument(format!("spacing {spacing:?} must be positive")));
        }
        let data = data.as_standard_layout().into_owned();
        check_finite(data.as_slice().expect("standard layout"), "volume voxel")?;
        Ok(Volume { data, spacing })
    }

    pub fn zeros(shape: Shape3) -> Result<Self> {
        check_shape(shape)?;
        Ok(Volume { data: Array3::zeros(shape), spacing: [1.0; 3] })
    }

    pub fn from_shape_fn(shape: Shape3, f: impl FnMut((usize, usize, usize)) -> f32) -> Result<Self> {
        check_shape(shape)?;
        Volume::new(Array3::from_shape_fn(shape, f), [1.0; 3])
    }

    pub(crate) fn from_flat(shape: Shape3, data: Vec<f32>, spacing: [f32; 3]) -> Result<Self> {
        let arr = Array3::from_shape_vec(shape, data)
            .map_err(|e| FmirError::InvalidShape(e.to_string()))?;
        Volume::new(arr, spacing)
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Result<Self> {
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(FmirError::InvalidArgument(format!("spacing {spacing:?} must be positive")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn shape(&self) -> Shape3 {
        dims3(&self.data)
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn as_slice(&self) -> &[f32] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    /// Min-max normalised copy in [0, 1]; constant volumes map to zero.
    pub fn normalized(&self) -> Volume {
        let (lo, hi) = self
            .as_slice()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        let data = if range > 0.0 {
            self.data.mapv(|v| (v - lo) / range)
        } else {
            Array3::zeros(self.data.raw_dim())
        };
        Volume { data, spacing: self.spacing }
    }
}

/// An integer label volume. Label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    labels: Array3<i32>,
    label_set: Vec<i32>,
}

impl Segmentation {
    /// Builds a segmentation whose label set is the foreground labels present.
    pub fn new(labels: Array3<i32>) -> Result<Self> {
        check_shape(dims3(&labels))?;
        if labels.iter().any(|&l| l < 0) {
            return Err(FmirError::InvalidArgument("labels must be non-negative".into()));
        }
        let mut set: Vec<i32> = labels.iter().copied().filter(|&l| l > 0).collect();
        set.sort_unstable();
        set.dedup();
        Ok(Segmentation { labels: labels.as_standard_layout().into_owned(), label_set: set })
    }

    /// Builds a segmentation with an explicit label set, which may list labels
    /// that do not occur in the volume.
    pub fn with_label_set(labels: Array3<i32>, mut label_set: Vec<i32>) -> Result<Self> {
        check_shape(dims3(&labels))?;
        label_set.sort_unstable();
        label_set.dedup();
        if label_set.iter().any(|&l| l <= 0) {
            return Err(FmirError::InvalidArgument("label set must hold positive ids".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != 0 && label_set.binary_search(&l).is_err()) {
            return Err(FmirError::InvalidArgument(format!("voxel label {bad} not in label set")));
        }
        Ok(Segmentation { labels: labels.as_standard_layout().into_owned(), label_set })
    }

    pub fn shape(&self) -> Shape3 {
        dims3(&self.labels)
    }

    pub fn labels(&self) -> &Array3<i32> {
        &self.labels
    }

    pub fn label_set(&self) -> &[i32] {
        &self.label_set
    }

    pub fn as_slice(&self) -> &[i32] {
        self.labels.as_slice().expect("standard layout")
    }

    pub fn count(&self, label: i32) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// One-hot maps for `labels`, flattened as (labels.len(), H, W, D).
    pub fn one_hot(&self, labels: &[i32]) -> Vec<f32> {
        let src = self.as_slice();
        let mut out = vec![0.0f32; labels.len() * src.len()];
        for (k, &l) in labels.iter().enumerate() {
            for (o, &v) in out[k * src.len()..].iter_mut().zip(src) {
                if v == l {
                    *o = 1.0;
                }
            }
        }
        out
    }
}

/// A dense displacement field u with shape (3, H, W, D) in voxel units.
/// The transform it defines is phi(x) = x + u(x).
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    disp: Array4<f32>,
}

impl DeformationField {
    pub fn new(disp: Array4<f32>) -> Result<Self> {
        let s = disp.shape();
        if s[0] != 3 {
            return Err(FmirError::InvalidShape(format!(
                "deformation field needs 3 channels, got {}",
                s[0]
            )));
        }
        check_shape([s[1], s[2], s[3]])?;
        let disp = disp.as_standard_layout().into_owned();
        check_finite(disp.as_slice().expect("standard layout"), "displacement")?;
        Ok(DeformationField { disp })
    }

    pub(crate) fn from_flat(shape: Shape3, data: Vec<f32>) -> Result<Self> {
        let arr = Array4::from_shape_vec((3, shape[0], shape[1], shape[2]), data)
            .map_err(|e| FmirError::InvalidShape(e.to_string()))?;
        DeformationField::new(arr)
    }

    /// A field with the same displacement at every voxel.
    pub fn constant(shape: Shape3, t: [f32; 3]) -> Result<Self> {
        check_shape(shape)?;
        let disp = Array4::from_shape_fn((3, shape[0], shape[1], shape[2]), |(c, _, _, _)| t[c]);
        DeformationField::new(disp)
    }

    pub fn from_shape_fn(shape: Shape3, f: impl Fn(usize, [usize; 3]) -> f32) -> Result<Self> {
        check_shape(shape)?;
        let disp = Array4::from_shape_fn((3, shape[0], shape[1], shape[2]), |(c, x, y, z)| {
            f(c, [x, y, z])
        });
        DeformationField::new(disp)
    }

    pub fn shape(&self) -> Shape3 {
        let s = self.disp.shape();
        [s[1], s[2], s[3]]
    }

    pub fn disp(&self) -> &Array4<f32> {
        &self.disp
    }

    pub fn as_slice(&self) -> &[f32] {
        self.disp.as_slice().expect("standard layout")
    }

    pub fn into_disp(self) -> Array4<f32> {
        self.disp
    }

    pub fn component(&self, axis: usize) -> ArrayView3<'_, f32> {
        self.disp.index_axis(ndarray::Axis(0), axis)
    }

    /// Largest displacement vector norm over all voxels.
    pub fn max_norm(&self) -> f32 {
        let n = interp::numel(self.shape());
        let d = self.as_slice();
        (0..n)
            .map(|i| (d[i] * d[i] + d[n + i] * d[n + i] + d[2 * n + i] * d[2 * n + i]).sqrt())
            .fold(0.0, f32::max)
    }

    pub fn is_zero(&self) -> bool {
        self.as_slice().iter().all(|&v| v == 0.0)
    }
}

/// Interpolation mode for warping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

impl FromStr for Interpolation {
    type Err = FmirError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trilinear" | "linear" => Ok(Interpolation::Trilinear),
            "nearest" => Ok(Interpolation::Nearest),
            other => Err(FmirError::InvalidArgument(format!("unknown interpolation mode '{other}'"))),
        }
    }
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Interpolation::Trilinear => write!(f, "trilinear"),
            Interpolation::Nearest => write!(f, "nearest"),
        }
    }
}

fn same_shape(a: Shape3, b: Shape3, what: &str) -> Result<()> {
    if a != b {
        return Err(FmirError::ShapeMismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Zero displacement field, i.e. phi(x) = x.
pub fn identity_field(shape: Shape3) -> Result<DeformationField> {
    check_shape(shape)?;
    Ok(DeformationField { disp: Array4::zeros((3, shape[0], shape[1], shape[2])) })
}

fn warp_nearest_flat<T: Copy>(src: &[T], channels: usize, dims: Shape3, disp: &[f32]) -> Vec<T> {
    let n = interp::numel(dims);
    let (w, d) = (dims[1], dims[2]);
    let mut out = Vec::with_capacity(channels * n);
    let idx: Vec<usize> = (0..n)
        .map(|i| {
            let p = interp::displaced(disp, dims, i);
            let x = interp::nearest(p[0], dims[0]);
            let y = interp::nearest(p[1], w);
            let z = interp::nearest(p[2], d);
            (x * w + y) * d + z
        })
        .collect();
    for c in 0..channels {
        out.extend(idx.iter().map(|&j| src[c * n + j]));
    }
    out
}

/// Samples `v` at phi(x) = x + u(x) for every voxel x, clamping to the border.
pub fn warp_volume(v: &Volume, f: &DeformationField, interp_mode: Interpolation) -> Result<Volume> {
    same_shape(v.shape(), f.shape(), "warp_volume")?;
    let out = match interp_mode {
        Interpolation::Trilinear => interp::warp_trilinear(v.as_slice(), 1, v.shape(), f.as_slice()),
        Interpolation::Nearest => warp_nearest_flat(v.as_slice(), 1, v.shape(), f.as_slice()),
    };
    Volume::from_flat(v.shape(), out, v.spacing)
}

/// Nearest-neighbour warp of a label volume; the label set is preserved.
pub fn warp_segmentation(s: &Segmentation, f: &DeformationField) -> Result<Segmentation> {
    same_shape(s.shape(), f.shape(), "warp_segmentation")?;
    let out = warp_nearest_flat(s.as_slice(), 1, s.shape(), f.as_slice());
    let labels = Array3::from_shape_vec(s.shape(), out).expect("shape preserved");
    Ok(Segmentation { labels, label_set: s.label_set.clone() })
}

/// Warps each channel of a (C, H, W, D) array.
pub fn warp_channels(data: &Array4<f32>, f: &DeformationField, interp_mode: Interpolation) -> Result<Array4<f32>> {
    let s = data.shape();
    let dims = [s[1], s[2], s[3]];
    same_shape(dims, f.shape(), "warp_channels")?;
    let data = data.as_standard_layout();
    let flat = data.as_slice().expect("standard layout");
    let out = match interp_mode {
        Interpolation::Trilinear => interp::warp_trilinear(flat, s[0], dims, f.as_slice()),
        Interpolation::Nearest => warp_nearest_flat(flat, s[0], dims, f.as_slice()),
    };
    Ok(Array4::from_shape_vec((s[0], s[1], s[2], s[3]), out).expect("shape preserved"))
}

pub(crate) fn compose_flat(outer: &[f32], inner: &[f32], dims: Shape3) -> Vec<f32> {
    let n = interp::numel(dims);
    let sampled = interp::warp_trilinear(outer, 3, dims, inner);
    let mut out = inner.to_vec();
    for c in 0..3 {
        for i in 0..n {
            out[c * n + i] += sampled[c * n + i];
        }
    }
    out
}

/// Backward of [`compose_flat`]: returns (d_outer, d_inner).
pub(crate) fn compose_backward_flat(outer: &[f32], inner: &[f32], dims: Shape3, d_total: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let mut d_outer = vec![0.0f32; outer.len()];
    let mut d_inner = d_total.to_vec();
    interp::warp_trilinear_backward(outer, 3, dims, inner, d_total, Some(&mut d_outer), &mut d_inner);
    (d_outer, d_inner)
}

/// phi_total = phi_outer o phi_inner, i.e.
/// u_total(x) = u_inner(x) + u_outer(x + u_inner(x)).
pub fn compose_fields(outer: &DeformationField, inner: &DeformationField) -> Result<DeformationField> {
    same_shape(outer.shape(), inner.shape(), "compose_fields")?;
    let out = compose_flat(outer.as_slice(), inner.as_slice(), outer.shape());
    DeformationField::from_flat(outer.shape(), out)
}

fn half_pixel_maps(from: Shape3, to: Shape3) -> [AxisMap; 3] {
    [
        AxisMap::half_pixel(from[0], to[0]),
        AxisMap::half_pixel(from[1], to[1]),
        AxisMap::half_pixel(from[2], to[2]),
    ]
}

/// Trilinear (half-pixel centred) resampling of a flat (C, ...) buffer.
pub(crate) fn resample_flat(data: &[f32], channels: usize, from: Shape3, to: Shape3) -> Vec<f32> {
    let m = half_pixel_maps(from, to);
    interp::resample_separable(data, channels, from, [&m[0], &m[1], &m[2]])
}

pub(crate) fn resample_flat_adjoint(d_out: &[f32], channels: usize, from: Shape3, to: Shape3) -> Vec<f32> {
    let m = half_pixel_maps(from, to);
    interp::resample_separable_adjoint(d_out, channels, from, [&m[0], &m[1], &m[2]])
}

fn field_scale(from: Shape3, to: Shape3) -> [f32; 3] {
    std::array::from_fn(|k| (to[k] as f64 / from[k] as f64) as f32)
}

pub(crate) fn resample_field_flat(disp: &[f32], from: Shape3, to: Shape3) -> Vec<f32> {
    let mut out = resample_flat(disp, 3, from, to);
    let n = interp::numel(to);
    for (k, s) in field_scale(from, to).into_iter().enumerate() {
        if s != 1.0 {
            out[k * n..(k + 1) * n].iter_mut().for_each(|v| *v *= s);
        }
    }
    out
}

pub(crate) fn resample_field_adjoint(d_out: &[f32], from: Shape3, to: Shape3) -> Vec<f32> {
    let n = interp::numel(to);
    let mut scaled = d_out.to_vec();
    for (k, s) in field_scale(from, to).into_iter().enumerate() {
        scaled[k * n..(k + 1) * n].iter_mut().for_each(|v| *v *= s);
    }
    resample_flat_adjoint(&scaled, 3, from, to)
}

/// Resamples a field to `new_shape`, scaling displacement channel k by
/// new_dim_k / old_dim_k so that voxel-unit displacements stay consistent.
pub fn resample_field(f: &DeformationField, new_shape: Shape3) -> Result<DeformationField> {
    check_shape(new_shape)?;
    let out = resample_field_flat(f.as_slice(), f.shape(), new_shape);
    DeformationField::from_flat(new_shape, out)
}

/// Trilinear resampling of a multi-channel array without value scaling.
pub fn resample_channels(data: &Array4<f32>, new_shape: Shape3) -> Result<Array4<f32>> {
    check_shape(new_shape)?;
    let s = data.shape();
    let data = data.as_standard_layout();
    let out = resample_flat(data.as_slice().expect("standard"), s[0], [s[1], s[2], s[3]], new_shape);
    Ok(Array4::from_shape_vec((s[0], new_shape[0], new_shape[1], new_shape[2]), out).expect("shape"))
}

/// Per-voxel determinant of I + du/dx, forward differences with a backward
/// difference at the far boundary of each axis.
pub fn jacobian_det(f: &DeformationField) -> Result<Volume> {
    let dims = f.shape();
    if dims.iter().any(|&d| d < 2) {
        return Err(FmirError::InvalidShape(format!(
            "jacobian needs >= 2 voxels per axis, got {dims:?}"
        )));
    }
    let u = f.as_slice();
    let n = interp::numel(dims);
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut out = Vec::with_capacity(n);
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let pos = [x, y, z];
                let i = (x * dims[1] + y) * dims[2] + z;
                // j[c][a] = d u_c / d x_a
                let mut j = [[0.0f64; 3]; 3];
                for a in 0..3 {
                    let (lo, hi) = if pos[a] + 1 < dims[a] {
                        (i, i + strides[a])
                    } else {
                        (i - strides[a], i)
                    };
                    for (c, row) in j.iter_mut().enumerate() {
                        row[a] = (u[c * n + hi] - u[c * n + lo]) as f64;
                    }
                }
                for (c, row) in j.iter_mut().enumerate() {
                    row[c] += 1.0;
                }
                let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                out.push(det as f32);
            }
        }
    }
    Volume::from_flat(dims, out, [1.0; 3])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape3) -> Volume {
        Volume::from_shape_fn(shape, |(x, y, z)| (x * 100 + y * 10 + z) as f32 * 0.37 - 4.0).unwrap()
    }

    #[test]
    fn identity_field_is_zero() {
        let f = identity_field([4, 4, 4]).unwrap();
        assert_eq!(f.disp().shape(), &[3, 4, 4, 4]);
        assert!(f.is_zero());
        assert!(identity_field([0, 4, 4]).is_err());
    }

    #[test]
    fn zero_field_warp_is_exact_for_both_modes() {
        let v = ramp([5, 6, 7]);
        let id = identity_field(v.shape()).unwrap();
        for mode in [Interpolation::Trilinear, Interpolation::Nearest] {
            assert_eq!(warp_volume(&v, &id, mode).unwrap(), v);
        }
    }

    #[test]
    fn linear_ramp_shift_is_exact_in_the_interior() {
        let v = Volume::from_shape_fn([8, 4, 4], |(x, _, _)| x as f32).unwrap();
        let f = DeformationField::constant([8, 4, 4], [1.0, 0.0, 0.0]).unwrap();
        let w = warp_volume(&v, &f, Interpolation::Trilinear).unwrap();
        assert_eq!(w.data()[[2, 1, 1]], 3.0);
        for x in 0..7 {
            assert_eq!(w.data()[[x, 2, 3]], (x + 1) as f32);
        }
        // clamped at the far border
        assert_eq!(w.data()[[7, 0, 0]], 7.0);
    }

    #[test]
    fn constant_volume_survives_any_field() {
        let v = Volume::from_shape_fn([6, 5, 4], |_| 7.0).unwrap();
        let f = DeformationField::from_shape_fn([6, 5, 4], |c, p| ((c + 1) * (p[0] + 2 * p[1] + 3 * p[2])) as f32 * 0.31 - 3.0).unwrap();
        let w = warp_volume(&v, &f, Interpolation::Trilinear).unwrap();
        assert!(w.as_slice().iter().all(|&x| x == 7.0));
    }

    #[test]
    fn unknown_interpolation_is_rejected() {
        assert!("cubic".parse::<Interpolation>().is_err());
        assert_eq!("nearest".parse::<Interpolation>().unwrap(), Interpolation::Nearest);
    }

    #[test]
    fn shape_mismatch_errors() {
        let v = ramp([4, 4, 4]);
        let f = identity_field([4, 4, 5]).unwrap();
        assert!(matches!(warp_volume(&v, &f, Interpolation::Trilinear), Err(FmirError::ShapeMismatch(_))));
        assert!(compose_fields(&f, &identity_field([4, 4, 4]).unwrap()).is_err());
    }

    #[test]
    fn translations_compose_additively() {
        let outer = DeformationField::constant([6, 6, 6], [0.0, 1.0, 0.0]).unwrap();
        let inner = DeformationField::constant([6, 6, 6], [2.0, 0.0, 0.0]).unwrap();
        let c = compose_fields(&outer, &inner).unwrap();
        assert_eq!(c, DeformationField::constant([6, 6, 6], [2.0, 1.0, 0.0]).unwrap());
    }

    #[test]
    fn constant_field_resamples_to_scaled_constant() {
        let f = DeformationField::constant([32, 32, 32], [2.0, 0.0, 0.0]).unwrap();
        let r = resample_field(&f, [16, 16, 16]).unwrap();
        assert_eq!(r, DeformationField::constant([16, 16, 16], [1.0, 0.0, 0.0]).unwrap());
        let g = DeformationField::constant([8, 6, 4], [0.5, -1.5, 3.0]).unwrap();
        let r = resample_field(&g, [16, 3, 4]).unwrap();
        assert_eq!(r, DeformationField::constant([16, 3, 4], [1.0, -0.75, 3.0]).unwrap());
    }

    #[test]
    fn jacobian_of_linear_fields() {
        let id = identity_field([4, 5, 6]).unwrap();
        assert!(jacobian_det(&id).unwrap().as_slice().iter().all(|&d| d == 1.0));
        let f = DeformationField::from_shape_fn([6, 5, 4], |c, p| if c == 0 { 0.1 * p[0] as f32 } else { 0.0 }).unwrap();
        for &d in jacobian_det(&f).unwrap().as_slice() {
            assert!((d - 1.1).abs() < 1e-6, "{d}");
        }
        assert!(jacobian_det(&identity_field([1, 4, 4]).unwrap()).is_err());
    }

    #[test]
    fn nearest_segmentation_warp_keeps_label_set() {
        let labels = Array3::from_shape_fn((6, 6, 6), |(x, y, _)| ((x + y) % 3) as i32);
        let s = Segmentation::new(labels).unwrap();
        let f = DeformationField::constant([6, 6, 6], [0.6, -1.4, 0.2]).unwrap();
        let w = warp_segmentation(&s, &f).unwrap();
        assert_eq!(w.label_set(), s.label_set());
        assert!(w.as_slice().iter().all(|l| *l == 0 || s.label_set().contains(l)));
    }

    #[test]
    fn invalid_volume_inputs() {
        assert!(Volume::new(Array3::from_elem((2, 2, 2), f32::NAN), [1.0; 3]).is_err());
        assert!(Volume::new(Array3::zeros((2, 2, 2)), [1.0, 0.0, 1.0]).is_err());
        assert!(Segmentation::with_label_set(Array3::from_elem((2, 2, 2), 3), vec![1, 2]).is_err());
    }

    fn brute_resample_field(f: &DeformationField, to: Shape3) -> DeformationField {
        let from = f.shape();
        let d = f.disp();
        let src = |k: usize, i: usize| -> f64 {
            let r = from[k] as f64 / to[k] as f64;
            ((i as f64 + 0.5) * r - 0.5).clamp(0.0, (from[k] - 1) as f64)
        };
        DeformationField::from_shape_fn(to, |c, [x, y, z]| {
            let p = [src(0, x), src(1, y), src(2, z)];
            let lo: [usize; 3] = std::array::from_fn(|k| p[k].floor() as usize);
            let mut acc = 0.0f64;
            for corner in 0..8 {
                let mut w = 1.0;
                let mut idx = [0usize; 3];
                for k in 0..3 {
                    let hi = (corner >> k) & 1 == 1;
                    let t = p[k] - lo[k] as f64;
                    idx[k] = if hi { (lo[k] + 1).min(from[k] - 1) } else { lo[k] };
                    w *= if hi { t } else { 1.0 - t };
                }
                acc += w * d[[c, idx[0], idx[1], idx[2]]] as f64;
            }
            (acc * to[c] as f64 / from[c] as f64) as f32
        })
        .unwrap()
    }

    #[test]
    fn upsample_then_downsample_round_trips_smooth_fields() {
        let w = std::f32::consts::TAU / 32.0;
        let f = DeformationField::from_shape_fn([16, 12, 8], |c, [x, y, z]| {
            ((x as f32 + 2.0 * c as f32) * w).sin() + 0.5 * ((y + z) as f32 * w).cos()
        })
        .unwrap();
        let up = resample_field(&f, [32, 24, 16]).unwrap();
        let back = resample_field(&up, [16, 12, 8]).unwrap();
        let reference = brute_resample_field(&brute_resample_field(&f, [32, 24, 16]), [16, 12, 8]);
        let max_diff = |a: &DeformationField, b: &DeformationField| {
            a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max)
        };
        assert!(max_diff(&up, &brute_resample_field(&f, [32, 24, 16])) < 1e-5);
        assert!(max_diff(&back, &reference) < 1e-5);
        assert!(max_diff(&back, &f) < 0.05, "{}", max_diff(&back, &f));
    }
}

//! Training objective: local squared NCC, soft Dice, and diffusion
//! smoothness, combined as w0 * NCC + w1 * Dice + w2 * smooth.
//!
//! Every loss has an analytic gradient. Internals accumulate in f64 so that
//! finite-difference checks on f32 inputs stay meaningful.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{FmirError, Result};
use crate::interp::{numel, Dims};
use crate::volume::{DeformationField, Volume};

pub const DICE_EPS: f64 = 1e-5;

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ncc: f32,
    pub dice: f32,
    pub smooth: f32,
}

impl LossWeights {
    /// All three weights at 1.
    pub fn weakly_supervised() -> Self {
        LossWeights { ncc: 1.0, dice: 1.0, smooth: 1.0 }
    }

    /// Dice switched off.
    pub fn unsupervised() -> Self {
        LossWeights { ncc: 1.0, dice: 0.0, smooth: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ncc", self.ncc), ("dice", self.dice), ("smooth", self.smooth)] {
            if !v.is_finite() || v < 0.0 {
                return Err(FmirError::Config(format!("loss weight {name}={v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NccConfig {
    pub window: usize,
    pub eps: f64,
}

impl Default for NccConfig {
    fn default() -> Self {
        NccConfig { window: 9, eps: 1e-5 }
    }
}

impl NccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(FmirError::Config(format!("ncc window {} must be odd and >= 3", self.window)));
        }
        if !(self.eps > 0.0) {
            return Err(FmirError::Config("ncc eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Zero-padded box sum over a cube of radius `r`.
fn box_sum(data: &[f64], dims: Dims, r: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut prefix = Vec::new();
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        let mut next = vec![0.0f64; cur.len()];
        let n = numel(dims);
        for start in 0..n {
            // visit each line once, from its first element
            if (start / stride) % len != 0 {
                continue;
            }
            prefix.clear();
            prefix.push(0.0);
            let mut acc = 0.0;
            for i in 0..len {
                acc += cur[start + i * stride];
                prefix.push(acc);
            }
            for i in 0..len {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(len - 1);
                next[start + i * stride] = prefix[hi + 1] - prefix[lo];
            }
        }
        cur = next;
    }
    cur
}

/// Number of in-bounds voxels in each voxel's window.
fn window_counts(dims: Dims, r: usize) -> Vec<f64> {
    let per_axis: Vec<Vec<f64>> = dims
        .iter()
        .map(|&n| (0..n).map(|i| ((i + r).min(n - 1) - i.saturating_sub(r) + 1) as f64).collect())
        .collect();
    let mut out = Vec::with_capacity(numel(dims));
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                out.push(per_axis[0][x] * per_axis[1][y] * per_axis[2][z]);
            }
        }
    }
    out
}

struct NccParts {
    cc: Vec<f64>,
    /// d cc / d(sum I), d cc / d(sum I^2), d cc / d(sum IJ) per voxel
    d_is: Vec<f64>,
    d_i2s: Vec<f64>,
    d_ijs: Vec<f64>,
}

fn ncc_parts(a: &[f32], b: &[f32], dims: Dims, cfg: &NccConfig, with_grad: bool) -> NccParts {
    let r = cfg.window / 2;
    let i: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let j: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let i2: Vec<f64> = i.iter().map(|v| v * v).collect();
    let j2: Vec<f64> = j.iter().map(|v| v * v).collect();
    let ij: Vec<f64> = i.iter().zip(&j).map(|(p, q)| p * q).collect();
    let is = box_sum(&i, dims, r);
    let js = box_sum(&j, dims, r);
    let i2s = box_sum(&i2, dims, r);
    let j2s = box_sum(&j2, dims, r);
    let ijs = box_sum(&ij, dims, r);
    let m = window_counts(dims, r);
    let n = i.len();
    let mut parts = NccParts {
        cc: Vec::with_capacity(n),
        d_is: Vec::new(),
        d_i2s: Vec::new(),
        d_ijs: Vec::new(),
    };
    for v in 0..n {
        let cross = ijs[v] - is[v] * js[v] / m[v];
        let ivar = (i2s[v] - is[v] * is[v] / m[v]).max(0.0);
        let jvar = (j2s[v] - js[v] * js[v] / m[v]).max(0.0);
        let den = ivar * jvar + cfg.eps;
        let cc = cross * cross / den;
        parts.cc.push(cc);
        if with_grad {
            let d_cross = 2.0 * cross / den;
            let d_ivar = -cross * cross * jvar / (den * den);
            parts.d_is.push(d_cross * (-js[v] / m[v]) + d_ivar * (-2.0 * is[v] / m[v]));
            parts.d_i2s.push(d_ivar);
            parts.d_ijs.push(d_cross);
        }
    }
    parts
}

pub(crate) fn ncc_value(warped: &[f32], fixed: &[f32], dims: Dims, cfg: &NccConfig) -> f64 {
    let p = ncc_parts(warped, fixed, dims, cfg, false);
    -p.cc.iter().sum::<f64>() / p.cc.len() as f64
}

/// NCC loss and its gradient with respect to `warped`.
pub(crate) fn ncc_value_grad(warped: &[f32], fixed: &[f32], dims: Dims, cfg: &NccConfig) -> (f64, Vec<f32>) {
    let p = ncc_parts(warped, fixed, dims, cfg, true);
    let n = p.cc.len() as f64;
    let loss = -p.cc.iter().sum::<f64>() / n;
    let r = cfg.window / 2;
    let ba = box_sum(&p.d_is, dims, r);
    let bb = box_sum(&p.d_i2s, dims, r);
    let bc = box_sum(&p.d_ijs, dims, r);
    let grad = (0..warped.len())
        .map(|k| (-(ba[k] + 2.0 * warped[k] as f64 * bb[k] + fixed[k] as f64 * bc[k]) / n) as f32)
        .collect();
    (loss, grad)
}

/// Negative mean of the local squared correlation coefficient.
/// Windows are zero-padded at the borders and normalised by their in-bounds
/// voxel count. Range [-1, 0].
pub fn ncc_loss(warped: &Volume, fixed: &Volume, cfg: &NccConfig) -> Result<f64> {
    cfg.validate()?;
    if warped.shape() != fixed.shape() {
        return Err(FmirError::ShapeMismatch(format!("ncc: {:?} vs {:?}", warped.shape(), fixed.shape())));
    }
    Ok(ncc_value(warped.as_slice(), fixed.as_slice(), warped.shape(), cfg))
}

/// [`ncc_loss`] and its gradient with respect to `warped`.
pub fn ncc_loss_grad(warped: &Volume, fixed: &Volume, cfg: &NccConfig) -> Result<(f64, Array3<f32>)> {
    ncc_loss(warped, fixed, cfg)?;
    let dims = warped.shape();
    let (loss, g) = ncc_value_grad(warped.as_slice(), fixed.as_slice(), dims, cfg);
    Ok((loss, Array3::from_shape_vec((dims[0], dims[1], dims[2]), g).expect("shape")))
}

fn dice_sums(a: &[f32], b: &[f32], labels: usize) -> Vec<(f64, f64)> {
    let n = a.len() / labels.max(1);
    (0..labels)
        .map(|l| {
            let (sa, sb) = (&a[l * n..(l + 1) * n], &b[l * n..(l + 1) * n]);
            let inter: f64 = sa.iter().zip(sb).map(|(x, y)| *x as f64 * *y as f64).sum();
            let total: f64 = sa.iter().map(|&x| x as f64).sum::<f64>() + sb.iter().map(|&x| x as f64).sum::<f64>();
            (inter, total)
        })
        .collect()
}

pub(crate) fn dice_value(a: &[f32], b: &[f32], labels: usize) -> f64 {
    let s = dice_sums(a, b, labels);
    1.0 - s.iter().map(|(p, t)| (2.0 * p + DICE_EPS) / (t + DICE_EPS)).sum::<f64>() / labels as f64
}

/// Soft Dice loss and its gradient with respect to `a`.
pub(crate) fn dice_value_grad(a: &[f32], b: &[f32], labels: usize) -> (f64, Vec<f32>) {
    let s = dice_sums(a, b, labels);
    let n = a.len() / labels;
    let mut grad = vec![0.0f32; a.len()];
    for (l, &(p, t)) in s.iter().enumerate() {
        let den = t + DICE_EPS;
        let num = 2.0 * p + DICE_EPS;
        for k in 0..n {
            let d = (2.0 * b[l * n + k] as f64 * den - num) / (den * den);
            grad[l * n + k] = (-d / labels as f64) as f32;
        }
    }
    (dice_value(a, b, labels), grad)
}

fn check_soft(a: &Array4<f32>, b: &Array4<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(FmirError::ShapeMismatch(format!("dice: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.iter().chain(b.iter()).any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(FmirError::InvalidArgument("dice inputs must lie in [0, 1]".into()));
    }
    Ok(())
}

/// 1 - mean over label channels of (2 sum ab + e) / (sum a + sum b + e).
/// Inputs are (labels, H, W, D) probability maps without a background channel.
pub fn dice_loss(warped_seg_soft: &Array4<f32>, fixed_seg_soft: &Array4<f32>) -> Result<f64> {
    check_soft(warped_seg_soft, fixed_seg_soft)?;
    let labels = warped_seg_soft.shape()[0];
    if labels == 0 {
        return Err(FmirError::InvalidArgument("dice needs at least one label channel".into()));
    }
    let a = warped_seg_soft.as_standard_layout();
    let b = fixed_seg_soft.as_standard_layout();
    Ok(dice_value(a.as_slice().expect("std"), b.as_slice().expect("std"), labels))
}

/// [`dice_loss`] and its gradient with respect to `warped_seg_soft`.
pub fn dice_loss_grad(warped_seg_soft: &Array4<f32>, fixed_seg_soft: &Array4<f32>) -> Result<(f64, Array4<f32>)> {
    dice_loss(warped_seg_soft, fixed_seg_soft)?;
    let labels = warped_seg_soft.shape()[0];
    let a = warped_seg_soft.as_standard_layout();
    let b = fixed_seg_soft.as_standard_layout();
    let (loss, g) = dice_value_grad(a.as_slice().expect("std"), b.as_slice().expect("std"), labels);
    Ok((loss, Array4::from_shape_vec(warped_seg_soft.raw_dim(), g).expect("shape")))
}

pub(crate) fn smooth_value_grad(disp: &[f32], dims: Dims, with_grad: bool) -> (f64, Vec<f32>) {
    let n = numel(dims);
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut loss = 0.0f64;
    let mut grad = if with_grad { vec![0.0f32; disp.len()] } else { Vec::new() };
    for a in 0..3 {
        let pairs = (n / dims[a]) * (dims[a] - 1);
        let scale = 1.0 / (9.0 * pairs as f64);
        for c in 0..3 {
            let u = &disp[c * n..(c + 1) * n];
            let mut acc = 0.0f64;
            for i in 0..n {
                if (i / strides[a]) % dims[a] + 1 == dims[a] {
                    continue;
                }
                let d = (u[i + strides[a]] - u[i]) as f64;
                acc += d * d;
                if with_grad {
                    let g = (2.0 * d * scale) as f32;
                    grad[c * n + i + strides[a]] += g;
                    grad[c * n + i] -= g;
                }
            }
            loss += acc * scale;
        }
    }
    (loss, grad)
}

/// Mean over channels and axes of the mean squared forward difference.
pub fn smoothness_loss(f: &DeformationField) -> Result<f64> {
    let dims = f.shape();
    if dims.iter().any(|&d| d < 2) {
        return Err(FmirError::InvalidShape(format!("smoothness needs >= 2 voxels per axis, got {dims:?}")));
    }
    Ok(smooth_value_grad(f.as_slice(), dims, false).0)
}

/// [`smoothness_loss`] and its gradient with respect to the displacements.
pub fn smoothness_loss_grad(f: &DeformationField) -> Result<(f64, Array4<f32>)> {
    smoothness_loss(f)?;
    let (loss, g) = smooth_value_grad(f.as_slice(), f.shape(), true);
    Ok((loss, Array4::from_shape_vec(f.disp().raw_dim(), g).expect("shape")))
}

/// Unweighted loss terms plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ncc: f64,
    pub dice: Option<f64>,
    pub smooth: f64,
    pub total: f64,
}

/// Gradients of the weighted total with respect to its inputs.
#[derive(Debug, Clone)]
pub(crate) struct LossGrads {
    pub warped: Vec<f32>,
    pub warped_seg: Option<Vec<f32>>,
    pub field: Vec<f32>,
}

pub(crate) struct LossInputs<'a> {
    pub warped: &'a [f32],
    pub fixed: &'a [f32],
    pub dims: Dims,
    pub seg: Option<(&'a [f32], &'a [f32], usize)>,
    pub field: &'a [f32],
}

pub(crate) fn total_value_grad(x: &LossInputs<'_>, w: &LossWeights, cfg: &NccConfig, with_grad: bool) -> Result<(LossBreakdown, Option<LossGrads>)> {
    w.validate()?;
    cfg.validate()?;
    let (ncc, mut g_img) = if with_grad {
        let (l, g) = ncc_value_grad(x.warped, x.fixed, x.dims, cfg);
        (l, g)
    } else {
        (ncc_value(x.warped, x.fixed, x.dims, cfg), Vec::new())
    };
    g_img.iter_mut().for_each(|g| *g *= w.ncc);

    let mut dice = None;
    let mut g_seg = None;
    if w.dice > 0.0 {
        let (a, b, labels) = x
            .seg
            .ok_or_else(|| FmirError::InvalidArgument("dice weight > 0 requires segmentations".into()))?;
        if labels > 0 {
            if with_grad {
                let (l, mut g) = dice_value_grad(a, b, labels);
                g.iter_mut().for_each(|v| *v *= w.dice);
                dice = Some(l);
                g_seg = Some(g);
            } else {
                dice = Some(dice_value(a, b, labels));
            }
        }
    }
    let (smooth, mut g_field) = smooth_value_grad(x.field, x.dims, with_grad);
    g_field.iter_mut().for_each(|g| *g *= w.smooth);
    let total = w.ncc as f64 * ncc + dice.map_or(0.0, |d| w.dice as f64 * d) + w.smooth as f64 * smooth;
    let grads = with_grad.then_some(LossGrads { warped: g_img, warped_seg: g_seg, field: g_field });
    Ok((LossBreakdown { ncc, dice, smooth, total }, grads))
}

/// Weighted objective with its per-term breakdown. Segmentations are
/// (labels, H, W, D) soft maps and may be omitted when the Dice weight is 0.
pub fn total_loss(
    warped: &Volume,
    fixed: &Volume,
    warped_seg: Option<&Array4<f32>>,
    fixed_seg: Option<&Array4<f32>>,
    field: &DeformationField,
    w: &LossWeights,
    cfg: &NccConfig,
) -> Result<LossBreakdown> {
    if warped.shape() != fixed.shape() || warped.shape() != field.shape() {
        return Err(FmirError::ShapeMismatch("total_loss inputs differ in shape".into()));
    }
    if field.shape().iter().any(|&d| d < 2) {
        return Err(FmirError::InvalidShape("total_loss needs >= 2 voxels per axis".into()));
    }
    let seg_std = match (warped_seg, fixed_seg) {
        (Some(a), Some(b)) => {
            check_soft(a, b)?;
            Some((a.as_standard_layout().into_owned(), b.as_standard_layout().into_owned()))
        }
        _ => None,
    };
    let seg = seg_std
        .as_ref()
        .map(|(a, b)| (a.as_slice().expect("std"), b.as_slice().expect("std"), a.shape()[0]));
    let inputs = LossInputs {
        warped: warped.as_slice(),
        fixed: fixed.as_slice(),
        dims: warped.shape(),
        seg,
        field: field.as_slice(),
    };
    total_value_grad(&inputs, w, cfg, false).map(|(b, _)| b)
}

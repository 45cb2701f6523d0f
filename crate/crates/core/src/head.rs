//! Coarse-to-fine registration head. Features are downsampled into a pyramid;
//! starting at the coarsest level, each level warps the moving features by the
//! upsampled coarser field, predicts a residual field from the concatenated
//! (warped moving, fixed) features, and composes it under the coarse field.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureVolume;
use crate::error::{FmirError, Result};
use crate::interp::{self, numel};
use crate::nn::{BlockCache, ConvBlock};
use crate::seed;
use crate::volume::{self, DeformationField, Shape3};

pub const HEAD_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub levels: usize,
    pub min_size: usize,
    pub factor: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig { levels: 5, min_size: 4, factor: 2 }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.min_size < 2 || self.factor < 2 {
            return Err(FmirError::Config(format!(
                "pyramid needs levels >= 1, min_size >= 2, factor >= 2 (got {self:?})"
            )));
        }
        Ok(())
    }

    /// Per-level grid shapes, finest first. An axis shorter than `min_size`
    /// keeps its own length.
    pub fn level_shapes(&self, base: Shape3) -> Vec<Shape3> {
        (0..self.levels)
            .map(|i| {
                let f = self.factor.pow(i as u32);
                std::array::from_fn(|a| base[a].div_ceil(f).max(self.min_size.min(base[a])))
            })
            .collect()
    }
}

/// One conv block per pyramid level (index 0 = finest), each 2n -> h -> h -> 3
/// with a zero-initialised last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub levels: Vec<ConvBlock>,
}

impl HeadParams {
    pub fn n(&self) -> usize {
        self.levels[0].in_channels() / 2
    }

    pub fn zeros_like(&self) -> Self {
        HeadParams { levels: self.levels.iter().map(ConvBlock::zeros_like).collect() }
    }

    pub fn tensors(&self) -> Vec<&[f32]> {
        self.levels.iter().flat_map(|b| b.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.levels.iter_mut().flat_map(|b| b.tensors_mut()).collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.levels
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.tensor_names(&format!("head.level{i}")))
            .collect()
    }
}

pub fn init_head_params(n: usize, levels: usize, seed_v: u64) -> Result<HeadParams> {
    init_head_params_with_width(n, levels, HEAD_HIDDEN, seed_v)
}

pub fn init_head_params_with_width(n: usize, levels: usize, hidden: usize, seed_v: u64) -> Result<HeadParams> {
    if n == 0 || levels == 0 || hidden == 0 {
        return Err(FmirError::InvalidArgument(format!(
            "head needs n, levels, hidden >= 1 (got {n}, {levels}, {hidden})"
        )));
    }
    let mut rng = seed::rng(seed::derive(seed_v, &[seed::tag::HEAD]));
    let levels = (0..levels)
        .map(|_| ConvBlock::init(&[2 * n, hidden, hidden, 3], true, &mut rng))
        .collect();
    Ok(HeadParams { levels })
}

fn check_pair(fm: &FeatureVolume, ff: &FeatureVolume) -> Result<()> {
    if fm.data().shape() != ff.data().shape() {
        return Err(FmirError::ShapeMismatch(format!(
            "feature pair {:?} vs {:?}",
            fm.data().shape(),
            ff.data().shape()
        )));
    }
    Ok(())
}

fn to_feature(data: Vec<f32>, c: usize, s: Shape3, like: &FeatureVolume) -> FeatureVolume {
    let arr = Array4::from_shape_vec((c, s[0], s[1], s[2]), data).expect("shape");
    FeatureVolume::new(arr, like.stage()).expect("finite features stay finite")
}

/// Trilinear feature pyramid, level 0 (the inputs) to `levels - 1`.
pub fn build_pyramid(fm: &FeatureVolume, ff: &FeatureVolume, cfg: &PyramidConfig) -> Result<Vec<(FeatureVolume, FeatureVolume)>> {
    cfg.validate()?;
    check_pair(fm, ff)?;
    let c = fm.channels();
    let shapes = cfg.level_shapes(fm.spatial_shape());
    let mut out = vec![(fm.clone(), ff.clone())];
    for i in 1..shapes.len() {
        let (pm, pf) = &out[i - 1];
        let m = volume::resample_flat(pm.as_slice(), c, shapes[i - 1], shapes[i]);
        let f = volume::resample_flat(pf.as_slice(), c, shapes[i - 1], shapes[i]);
        out.push((to_feature(m, c, shapes[i], fm), to_feature(f, c, shapes[i], ff)));
    }
    Ok(out)
}

/// Residual field from one level's block over concat(warped moving, fixed).
pub fn predict_residual(params_i: &ConvBlock, fm_warped: &FeatureVolume, ff: &FeatureVolume) -> Result<DeformationField> {
    check_pair(fm_warped, ff)?;
    let c = fm_warped.channels();
    if 2 * c != params_i.in_channels() {
        return Err(FmirError::ChannelMismatch { expected: params_i.in_channels(), got: 2 * c });
    }
    let dims = fm_warped.spatial_shape();
    let mut input = fm_warped.as_slice().to_vec();
    input.extend_from_slice(ff.as_slice());
    let out = params_i.forward_output(&input, dims);
    DeformationField::from_flat(dims, out)
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug)]
pub(crate) struct HeadTrace {
    channels: usize,
    shapes: Vec<Shape3>,
    fm: Vec<Vec<f32>>,
    coarse: Vec<Option<Vec<f32>>>,
    caches: Vec<BlockCache>,
    residual: Vec<Vec<f32>>,
    phi: Vec<f32>,
}

impl HeadTrace {
    pub fn field(&self) -> &[f32] {
        &self.phi
    }
}

pub(crate) fn head_forward(fm: &[f32], ff: &[f32], channels: usize, base: Shape3, params: &HeadParams, cfg: &PyramidConfig) -> Result<HeadTrace> {
    cfg.validate()?;
    if params.levels.len() != cfg.levels {
        return Err(FmirError::Config(format!(
            "head has {} levels, pyramid wants {}",
            params.levels.len(),
            cfg.levels
        )));
    }
    if params.levels.iter().any(|b| b.in_channels() != 2 * channels || b.out_channels() != 3) {
        return Err(FmirError::ChannelMismatch { expected: params.levels[0].in_channels(), got: 2 * channels });
    }
    let shapes = cfg.level_shapes(base);
    let l = shapes.len();
    let mut pm = vec![fm.to_vec()];
    let mut pf = vec![ff.to_vec()];
    for i in 1..l {
        pm.push(volume::resample_flat(&pm[i - 1], channels, shapes[i - 1], shapes[i]));
        pf.push(volume::resample_flat(&pf[i - 1], channels, shapes[i - 1], shapes[i]));
    }
    let mut coarse = vec![None; l];
    let mut caches: Vec<Option<BlockCache>> = (0..l).map(|_| None).collect();
    let mut residual = vec![Vec::new(); l];
    let mut phi: Vec<f32> = Vec::new();
    for i in (0..l).rev() {
        let dims = shapes[i];
        let (warped, phi_c) = if i + 1 == l {
            (pm[i].clone(), None)
        } else {
            let phi_c = volume::resample_field_flat(&phi, shapes[i + 1], dims);
            (interp::warp_trilinear(&pm[i], channels, dims, &phi_c), Some(phi_c))
        };
        let mut input = warped;
        input.extend_from_slice(&pf[i]);
        let cache = params.levels[i].forward(&input, dims);
        let r = cache.output().to_vec();
        if let Some(bad) = r.iter().position(|v| !v.is_finite()) {
            return Err(FmirError::NonFinite(format!("residual field at level {i}, flat index {bad}")));
        }
        phi = match &phi_c {
            Some(c) => volume::compose_flat(c, &r, dims),
            None => r.clone(),
        };
        coarse[i] = phi_c;
        caches[i] = Some(cache);
        residual[i] = r;
    }
    Ok(HeadTrace {
        channels,
        shapes,
        fm: pm,
        coarse,
        caches: caches.into_iter().map(|c| c.expect("every level visited")).collect(),
        residual,
        phi,
    })
}

/// Backpropagates d(loss)/d(final field) through the head. Accumulates
/// parameter gradients into `grads` and returns the gradients with respect to
/// the level-0 moving and fixed features.
pub(crate) fn head_backward(trace: &HeadTrace, params: &HeadParams, d_phi0: &[f32], grads: &mut HeadParams) -> (Vec<f32>, Vec<f32>) {
    let c = trace.channels;
    let l = trace.shapes.len();
    let mut d_fm: Vec<Vec<f32>> = trace.shapes.iter().map(|s| vec![0.0; c * numel(*s)]).collect();
    let mut d_ff = d_fm.clone();
    let mut d_phi = d_phi0.to_vec();
    for i in 0..l {
        let dims = trace.shapes[i];
        let n = numel(dims);
        let (d_coarse, d_res) = match &trace.coarse[i] {
            Some(phi_c) => {
                let (d_outer, d_inner) = volume::compose_backward_flat(phi_c, &trace.residual[i], dims, &d_phi);
                (Some(d_outer), d_inner)
            }
            None => (None, d_phi.clone()),
        };
        let d_in = params.levels[i]
            .backward(&trace.caches[i], &d_res, &mut grads.levels[i], true)
            .expect("input gradient requested");
        let (d_warped, d_fixed) = d_in.split_at(c * n);
        d_ff[i].iter_mut().zip(d_fixed).for_each(|(a, b)| *a += b);
        match (d_coarse, &trace.coarse[i]) {
            (Some(mut d_c), Some(phi_c)) => {
                interp::warp_trilinear_backward(&trace.fm[i], c, dims, phi_c, d_warped, Some(&mut d_fm[i]), &mut d_c);
                d_phi = volume::resample_field_adjoint(&d_c, trace.shapes[i + 1], dims);
            }
            _ => d_fm[i].iter_mut().zip(d_warped).for_each(|(a, b)| *a += b),
        }
    }
    for i in (1..l).rev() {
        let up_m = volume::resample_flat_adjoint(&d_fm[i], c, trace.shapes[i - 1], trace.shapes[i]);
        let up_f = volume::resample_flat_adjoint(&d_ff[i], c, trace.shapes[i - 1], trace.shapes[i]);
        d_fm[i - 1].iter_mut().zip(&up_m).for_each(|(a, b)| *a += b);
        d_ff[i - 1].iter_mut().zip(&up_f).for_each(|(a, b)| *a += b);
    }
    (d_fm.swap_remove(0), d_ff.swap_remove(0))
}

/// Full-resolution field registering `fm` onto `ff`.
pub fn register(fm: &FeatureVolume, ff: &FeatureVolume, params: &HeadParams, cfg: &PyramidConfig) -> Result<DeformationField> {
    check_pair(fm, ff)?;
    let base = fm.spatial_shape();
    let trace = head_forward(fm.as_slice(), ff.as_slice(), fm.channels(), base, params, cfg)?;
    DeformationField::from_flat(base, trace.phi)
}

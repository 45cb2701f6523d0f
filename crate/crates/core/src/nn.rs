//! Minimal trainable building blocks: 3x3x3 same-padded convolutions with
//! explicit backward passes, leaky-rectifier conv blocks, and Adam.
//!
//! Convolutions run as 27 shifted GEMMs over a zero-padded copy of the input,
//! so every tap is one strided `sgemm` over the flattened padded volume.

use rand::Rng;

use crate::interp::{numel, Dims};

pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Debug, Clone, Copy)]
struct PadGeom {
    dims: Dims,
    sa: usize,
    sb: usize,
    npad: usize,
    first: usize,
    len: usize,
}

impl PadGeom {
    fn new(dims: Dims) -> Self {
        let p = [dims[0] + 2, dims[1] + 2, dims[2] + 2];
        let sa = p[1] * p[2];
        let sb = p[2];
        let first = sa + sb + 1;
        let last = dims[0] * sa + dims[1] * sb + dims[2];
        PadGeom { dims, sa, sb, npad: p[0] * sa, first, len: last - first + 1 }
    }

    /// Flat offset of tap `k` (0..27) relative to the centre voxel.
    fn tap_offset(&self, k: usize) -> isize {
        let (a, b, c) = ((k / 9) as isize - 1, ((k / 3) % 3) as isize - 1, (k % 3) as isize - 1);
        a * self.sa as isize + b * self.sb as isize + c
    }

    fn pad(&self, x: &[f32], channels: usize) -> Vec<f32> {
        let [h, w, d] = self.dims;
        let mut out = vec![0.0f32; channels * self.npad];
        for c in 0..channels {
            let src = &x[c * h * w * d..];
            let dst = &mut out[c * self.npad..];
            for i in 0..h {
                for j in 0..w {
                    let s = (i * w + j) * d;
                    let t = (i + 1) * self.sa + (j + 1) * self.sb + 1;
                    dst[t..t + d].copy_from_slice(&src[s..s + d]);
                }
            }
        }
        out
    }

    /// Index into a `len`-wide row buffer for interior voxel (i, j, 0).
    fn row_start(&self, i: usize, j: usize) -> usize {
        (i + 1) * self.sa + (j + 1) * self.sb + 1 - self.first
    }

    fn gather(&self, buf: &[f32], channels: usize, row_stride: usize, base: usize) -> Vec<f32> {
        let [h, w, d] = self.dims;
        let mut out = Vec::with_capacity(channels * h * w * d);
        for c in 0..channels {
            let row = &buf[c * row_stride + base..];
            for i in 0..h {
                for j in 0..w {
                    let s = self.row_start(i, j);
                    out.extend_from_slice(&row[s..s + d]);
                }
            }
        }
        out
    }

    fn scatter(&self, x: &[f32], channels: usize) -> Vec<f32> {
        let [h, w, d] = self.dims;
        let mut out = vec![0.0f32; channels * self.len];
        for c in 0..channels {
            let src = &x[c * h * w * d..];
            let dst = &mut out[c * self.len..];
            for i in 0..h {
                for j in 0..w {
                    let s = (i * w + j) * d;
                    let t = self.row_start(i, j);
                    dst[t..t + d].copy_from_slice(&src[s..s + d]);
                }
            }
        }
        out
    }
}

/// Column tiles small enough that all 27 taps of a tile hit cache.
fn chunks(len: usize) -> impl Iterator<Item = (usize, usize)> {
    const TILE: usize = 4096;
    (0..len).step_by(TILE).map(move |c0| (c0, TILE.min(len - c0)))
}

/// C += A * B with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_off: usize,
    rsa: usize,
    csa: usize,
    b: &[f32],
    b_off: usize,
    rsb: usize,
    csb: usize,
    c: &mut [f32],
    c_off: usize,
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(a_off + (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(b_off + (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(c_off + (m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserted bounds keep every strided access inside the slices,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(a_off),
            rsa as isize,
            csa as isize,
            b.as_ptr().add(b_off),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}

/// 3x3x3 convolution, stride 1, zero same-padding. Weights are laid out
/// (cout, cin, 3, 3, 3).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv3d {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Conv3d { cin, cout, weight: vec![0.0; cout * cin * 27], bias: vec![0.0; cout] }
    }

    /// He-style uniform init scaled by fan-in, zero bias.
    pub fn init_uniform(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (cin * 27) as f32;
        let bound = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
        let weight = (0..cout * cin * 27).map(|_| rng.random_range(-bound..bound)).collect();
        Conv3d { cin, cout, weight, bias: vec![0.0; cout] }
    }

    pub fn forward(&self, x: &[f32], dims: Dims) -> Vec<f32> {
        let g = PadGeom::new(dims);
        debug_assert_eq!(x.len(), self.cin * numel(dims));
        let xp = g.pad(x, self.cin);
        let mut acc = vec![0.0f32; self.cout * g.len];
        for (c0, cl) in chunks(g.len) {
            for k in 0..27 {
                let off = (g.first as isize + g.tap_offset(k)) as usize + c0;
                gemm(
                    self.cout, self.cin, cl,
                    &self.weight, k, self.cin * 27, 27,
                    &xp, off, g.npad, 1,
                    &mut acc, c0, g.len, 1,
                );
            }
        }
        let mut out = g.gather(&acc, self.cout, g.len, 0);
        let n = numel(dims);
        for (o, b) in self.bias.iter().enumerate() {
            out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += b);
        }
        out
    }

    /// Accumulates weight/bias gradients into `grad` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(&self, x: &[f32], dims: Dims, d_out: &[f32], grad: &mut Conv3d, need_input_grad: bool) -> Option<Vec<f32>> {
        let g = PadGeom::new(dims);
        let n = numel(dims);
        for o in 0..self.cout {
            grad.bias[o] += d_out[o * n..(o + 1) * n].iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
        let xp = g.pad(x, self.cin);
        let dp = g.scatter(d_out, self.cout);
        for (c0, cl) in chunks(g.len) {
            for k in 0..27 {
                let off = (g.first as isize + g.tap_offset(k)) as usize + c0;
                gemm(
                    self.cout, cl, self.cin,
                    &dp, c0, g.len, 1,
                    &xp, off, 1, g.npad,
                    &mut grad.weight, k, self.cin * 27, 27,
                );
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut dxp = vec![0.0f32; self.cin * g.npad];
        for (c0, cl) in chunks(g.len) {
            for k in 0..27 {
                let off = (g.first as isize + g.tap_offset(k)) as usize + c0;
                gemm(
                    self.cin, self.cout, cl,
                    &self.weight, k, 27, self.cin * 27,
                    &dp, c0, g.len, 1,
                    &mut dxp, off, g.npad, 1,
                );
            }
        }
        Some(g.gather(&dxp, self.cin, g.npad, g.first))
    }
}

/// Activations kept from a block's forward pass for its backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    dims: Dims,
    /// inputs[l] is the input of layer l; the last entry is the block output.
    inputs: Vec<Vec<f32>>,
}

impl BlockCache {
    pub fn output(&self) -> &[f32] {
        self.inputs.last().expect("non-empty")
    }

    pub fn into_output(mut self) -> Vec<f32> {
        self.inputs.pop().expect("non-empty")
    }
}

/// A stack of 3x3x3 convolutions with a leaky rectifier after every layer but
/// the last.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub layers: Vec<Conv3d>,
}

impl ConvBlock {
    /// Seeded block along `widths` (input, hidden..., output). With
    /// `zero_last` the final layer starts at zero.
    pub fn init(widths: &[usize], zero_last: bool, rng: &mut impl Rng) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                if zero_last && l + 1 == n {
                    Conv3d::zeros(widths[l], widths[l + 1])
                } else {
                    Conv3d::init_uniform(widths[l], widths[l + 1], rng)
                }
            })
            .collect();
        ConvBlock { layers }
    }

    pub fn zeros_like(&self) -> Self {
        ConvBlock { layers: self.layers.iter().map(|l| Conv3d::zeros(l.cin, l.cout)).collect() }
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].cin
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().expect("non-empty").cout
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.in_channels()).chain(self.layers.iter().map(|l| l.cout)).collect()
    }

    pub fn forward(&self, x: &[f32], dims: Dims) -> BlockCache {
        let mut inputs = vec![x.to_vec()];
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(inputs.last().expect("non-empty"), dims);
            if l + 1 < self.layers.len() {
                y.iter_mut().for_each(|v| {
                    if *v < 0.0 {
                        *v *= LEAKY_SLOPE
                    }
                });
            }
            inputs.push(y);
        }
        BlockCache { dims, inputs }
    }

    pub fn forward_output(&self, x: &[f32], dims: Dims) -> Vec<f32> {
        self.forward(x, dims).into_output()
    }

    pub fn backward(&self, cache: &BlockCache, d_out: &[f32], grad: &mut ConvBlock, need_input_grad: bool) -> Option<Vec<f32>> {
        let mut g = d_out.to_vec();
        let last = self.layers.len() - 1;
        for l in (0..self.layers.len()).rev() {
            if l < last {
                for (gv, &y) in g.iter_mut().zip(&cache.inputs[l + 1]) {
                    if y < 0.0 {
                        *gv *= LEAKY_SLOPE;
                    }
                }
            }
            let need = l > 0 || need_input_grad;
            match self.layers[l].backward(&cache.inputs[l], cache.dims, &g, &mut grad.layers[l], need) {
                Some(dx) => g = dx,
                None => return None,
            }
        }
        Some(g)
    }

    pub fn tensors(&self) -> Vec<&[f32]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn tensor_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|l| [format!("{prefix}.{l}.weight"), format!("{prefix}.{l}.bias")])
            .collect()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: &[&[f32]], lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        let step = (lr as f64 * bc2.sqrt() / bc1) as f32;
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= step * m[i] / (v[i].sqrt() + self.eps);
            }
        }
    }
}

/// Scales gradients in place so that their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f32]], max_norm: f32) -> f32 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
    norm
}

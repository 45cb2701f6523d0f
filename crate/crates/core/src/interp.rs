//! Flat-slice interpolation kernels shared by warping, composition and
//! resampling. Data is laid out C-contiguous as (channels, H, W, D).
//!
//! Interpolation is written in `a + t * (b - a)` form so that constant data and
//! integer-grid sampling are reproduced bit-exactly.

pub(crate) type Dims = [usize; 3];

#[inline]
pub(crate) fn numel(d: Dims) -> usize {
    d[0] * d[1] * d[2]
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Linear interpolation stencil along one axis with clamp-to-border.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Stencil {
    pub i0: usize,
    pub i1: usize,
    pub t: f32,
    /// Whether the coordinate lies inside the grid, i.e. the interpolant has a
    /// non-zero derivative with respect to the coordinate.
    pub active: bool,
}

#[inline]
pub(crate) fn stencil(c: f32, n: usize) -> Stencil {
    let max = (n - 1) as f32;
    let inside = c >= 0.0 && c <= max;
    let cc = if c.is_nan() { 0.0 } else { c.clamp(0.0, max) };
    let f = cc.floor();
    let i0 = f as usize;
    if i0 + 1 >= n {
        Stencil { i0: n - 1, i1: n - 1, t: 0.0, active: false }
    } else {
        Stencil { i0, i1: i0 + 1, t: cc - f, active: inside }
    }
}

#[inline]
pub(crate) fn nearest(c: f32, n: usize) -> usize {
    let max = (n - 1) as f32;
    let cc = if c.is_nan() { 0.0 } else { c.clamp(0.0, max) };
    ((cc + 0.5).floor() as usize).min(n - 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Point {
    pub sx: Stencil,
    pub sy: Stencil,
    pub sz: Stencil,
}

impl Point {
    #[inline]
    pub fn new(p: [f32; 3], dims: Dims) -> Self {
        Point {
            sx: stencil(p[0], dims[0]),
            sy: stencil(p[1], dims[1]),
            sz: stencil(p[2], dims[2]),
        }
    }

    #[inline]
    fn corners(&self, dims: Dims) -> [usize; 8] {
        let (w, d) = (dims[1], dims[2]);
        let ix = |x: usize, y: usize, z: usize| (x * w + y) * d + z;
        let (x0, x1, y0, y1, z0, z1) = (
            self.sx.i0, self.sx.i1, self.sy.i0, self.sy.i1, self.sz.i0, self.sz.i1,
        );
        [
            ix(x0, y0, z0),
            ix(x0, y0, z1),
            ix(x0, y1, z0),
            ix(x0, y1, z1),
            ix(x1, y0, z0),
            ix(x1, y0, z1),
            ix(x1, y1, z0),
            ix(x1, y1, z1),
        ]
    }

    /// Trilinear value at this point of a single channel.
    #[inline]
    pub fn sample(&self, data: &[f32], dims: Dims) -> f32 {
        let c = self.corners(dims);
        let (tx, ty, tz) = (self.sx.t, self.sy.t, self.sz.t);
        let e00 = lerp(data[c[0]], data[c[1]], tz);
        let e01 = lerp(data[c[2]], data[c[3]], tz);
        let e10 = lerp(data[c[4]], data[c[5]], tz);
        let e11 = lerp(data[c[6]], data[c[7]], tz);
        lerp(lerp(e00, e01, ty), lerp(e10, e11, ty), tx)
    }

    /// Trilinear value and its derivative with respect to the sample position.
    #[inline]
    pub fn sample_with_grad(&self, data: &[f32], dims: Dims) -> (f32, [f32; 3]) {
        let c = self.corners(dims);
        let v: [f32; 8] = std::array::from_fn(|k| data[c[k]]);
        let (tx, ty, tz) = (self.sx.t, self.sy.t, self.sz.t);
        let e00 = lerp(v[0], v[1], tz);
        let e01 = lerp(v[2], v[3], tz);
        let e10 = lerp(v[4], v[5], tz);
        let e11 = lerp(v[6], v[7], tz);
        let f0 = lerp(e00, e01, ty);
        let f1 = lerp(e10, e11, ty);
        let value = lerp(f0, f1, tx);
        let gx = if self.sx.active { f1 - f0 } else { 0.0 };
        let gy = if self.sy.active {
            lerp(e01 - e00, e11 - e10, tx)
        } else {
            0.0
        };
        let gz = if self.sz.active {
            lerp(
                lerp(v[1] - v[0], v[3] - v[2], ty),
                lerp(v[5] - v[4], v[7] - v[6], ty),
                tx,
            )
        } else {
            0.0
        };
        (value, [gx, gy, gz])
    }

    /// Adds `g` times the interpolation weights into `grad` (adjoint of `sample`).
    #[inline]
    pub fn scatter(&self, grad: &mut [f32], dims: Dims, g: f32) {
        let c = self.corners(dims);
        let (tx, ty, tz) = (self.sx.t, self.sy.t, self.sz.t);
        let wx = [1.0 - tx, tx];
        let wy = [1.0 - ty, ty];
        let wz = [1.0 - tz, tz];
        for (k, &ci) in c.iter().enumerate() {
            grad[ci] += g * wx[k >> 2] * wy[(k >> 1) & 1] * wz[k & 1];
        }
    }
}

/// Sample positions x + u(x) for every voxel of a displacement buffer.
#[inline]
pub(crate) fn displaced(disp: &[f32], dims: Dims, flat: usize) -> [f32; 3] {
    let n = numel(dims);
    let (w, d) = (dims[1], dims[2]);
    let x = flat / (w * d);
    let y = (flat / d) % w;
    let z = flat % d;
    [
        x as f32 + disp[flat],
        y as f32 + disp[n + flat],
        z as f32 + disp[2 * n + flat],
    ]
}

/// Warps every channel of `data` by the displacement `disp` (trilinear).
pub(crate) fn warp_trilinear(data: &[f32], channels: usize, dims: Dims, disp: &[f32]) -> Vec<f32> {
    let n = numel(dims);
    let mut out = vec![0.0f32; channels * n];
    for i in 0..n {
        let p = Point::new(displaced(disp, dims, i), dims);
        for c in 0..channels {
            out[c * n + i] = p.sample(&data[c * n..(c + 1) * n], dims);
        }
    }
    out
}

/// Backward pass of [`warp_trilinear`]. Accumulates into `d_data` (when given)
/// and into `d_disp`.
pub(crate) fn warp_trilinear_backward(
    data: &[f32],
    channels: usize,
    dims: Dims,
    disp: &[f32],
    d_out: &[f32],
    mut d_data: Option<&mut [f32]>,
    d_disp: &mut [f32],
) {
    let n = numel(dims);
    for i in 0..n {
        let p = Point::new(displaced(disp, dims, i), dims);
        let mut acc = [0.0f32; 3];
        for c in 0..channels {
            let g = d_out[c * n + i];
            if g == 0.0 {
                continue;
            }
            let (_, dp) = p.sample_with_grad(&data[c * n..(c + 1) * n], dims);
            acc[0] += g * dp[0];
            acc[1] += g * dp[1];
            acc[2] += g * dp[2];
            if let Some(dd) = d_data.as_deref_mut() {
                p.scatter(&mut dd[c * n..(c + 1) * n], dims, g);
            }
        }
        d_disp[i] += acc[0];
        d_disp[n + i] += acc[1];
        d_disp[2 * n + i] += acc[2];
    }
}

/// One-axis linear resampling table: output index -> stencil into the source.
#[derive(Debug, Clone)]
pub(crate) struct AxisMap {
    pub src_len: usize,
    pub stencils: Vec<Stencil>,
}

impl AxisMap {
    /// Half-pixel-centred mapping from `src` to `dst` samples:
    /// `s = (i + 0.5) * src / dst - 0.5`.
    pub fn half_pixel(src: usize, dst: usize) -> Self {
        let ratio = src as f64 / dst as f64;
        let stencils = (0..dst)
            .map(|i| stencil(((i as f64 + 0.5) * ratio - 0.5) as f32, src))
            .collect();
        AxisMap { src_len: src, stencils }
    }

    /// Restricts the map to output indices `offset..offset + len`.
    pub fn crop(mut self, offset: usize, len: usize) -> Self {
        self.stencils = self.stencils[offset..offset + len].to_vec();
        self
    }

    pub fn dst_len(&self) -> usize {
        self.stencils.len()
    }
}

/// Separable trilinear resampling of a (channels, H, W, D) buffer.
pub(crate) fn resample_separable(data: &[f32], channels: usize, src: Dims, maps: [&AxisMap; 3]) -> Vec<f32> {
    debug_assert!(maps.iter().zip(src).all(|(m, s)| m.src_len == s));
    let dst = [maps[0].dst_len(), maps[1].dst_len(), maps[2].dst_len()];
    let mut out = Vec::with_capacity(channels * numel(dst));
    let mut tmp_a = Vec::new();
    let mut tmp_b = Vec::new();
    for c in 0..channels {
        let ch = &data[c * numel(src)..(c + 1) * numel(src)];
        // along z
        tmp_a.clear();
        for row in ch.chunks_exact(src[2]) {
            for s in &maps[2].stencils {
                tmp_a.push(lerp(row[s.i0], row[s.i1], s.t));
            }
        }
        // along y: tmp_a is (H, W, D')
        tmp_b.clear();
        let plane = src[1] * dst[2];
        for x in 0..src[0] {
            let base = x * plane;
            for s in &maps[1].stencils {
                let (r0, r1) = (base + s.i0 * dst[2], base + s.i1 * dst[2]);
                for z in 0..dst[2] {
                    tmp_b.push(lerp(tmp_a[r0 + z], tmp_a[r1 + z], s.t));
                }
            }
        }
        // along x: tmp_b is (H, W', D')
        let plane = dst[1] * dst[2];
        for s in &maps[0].stencils {
            let (r0, r1) = (s.i0 * plane, s.i1 * plane);
            for k in 0..plane {
                out.push(lerp(tmp_b[r0 + k], tmp_b[r1 + k], s.t));
            }
        }
    }
    out
}

/// Adjoint of [`resample_separable`]: maps a gradient on the destination grid
/// back onto the source grid.
pub(crate) fn resample_separable_adjoint(d_out: &[f32], channels: usize, src: Dims, maps: [&AxisMap; 3]) -> Vec<f32> {
    let dst = [maps[0].dst_len(), maps[1].dst_len(), maps[2].dst_len()];
    let mut d_in = vec![0.0f32; channels * numel(src)];
    for c in 0..channels {
        let g = &d_out[c * numel(dst)..(c + 1) * numel(dst)];
        // x adjoint: (H', W', D') -> (H, W', D')
        let plane = dst[1] * dst[2];
        let mut tmp_b = vec![0.0f32; src[0] * plane];
        for (o, s) in maps[0].stencils.iter().enumerate() {
            let (r0, r1) = (s.i0 * plane, s.i1 * plane);
            for k in 0..plane {
                let v = g[o * plane + k];
                tmp_b[r0 + k] += (1.0 - s.t) * v;
                tmp_b[r1 + k] += s.t * v;
            }
        }
        // y adjoint: (H, W', D') -> (H, W, D')
        let mut tmp_a = vec![0.0f32; src[0] * src[1] * dst[2]];
        for x in 0..src[0] {
            for (o, s) in maps[1].stencils.iter().enumerate() {
                let src_base = (x * dst[1] + o) * dst[2];
                let (r0, r1) = (
                    (x * src[1] + s.i0) * dst[2],
                    (x * src[1] + s.i1) * dst[2],
                );
                for z in 0..dst[2] {
                    let v = tmp_b[src_base + z];
                    tmp_a[r0 + z] += (1.0 - s.t) * v;
                    tmp_a[r1 + z] += s.t * v;
                }
            }
        }
        // z adjoint
        let out = &mut d_in[c * numel(src)..(c + 1) * numel(src)];
        for (row_out, row_in) in out.chunks_exact_mut(src[2]).zip(tmp_a.chunks_exact(dst[2])) {
            for (s, &v) in maps[2].stencils.iter().zip(row_in) {
                row_out[s.i0] += (1.0 - s.t) * v;
                row_out[s.i1] += s.t * v;
            }
        }
    }
    d_in
}

//! Channel regularization: a fresh random channel subset per training forward
//! pass, and a deterministic PCA projection to the same channel count at
//! inference.

use std::path::Path;

use ndarray::{Array2, Array4, ArrayView2};
use rand::seq::index;

use crate::encoder::{FeatureStage, FeatureVolume};
use crate::error::{FmirError, Result};
use crate::io::{Container, Dtype, Header, Kind};
use crate::seed;

/// Default cap on the number of voxel feature vectors used to fit PCA.
pub const PCA_MAX_SAMPLES: usize = 20_000;

/// Sorted, distinct channel indices.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ChannelSelection {
    total: usize,
    indices: Vec<usize>,
}

impl ChannelSelection {
    pub fn new(total: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) || indices.iter().any(|&i| i >= total) {
            return Err(FmirError::InvalidArgument(format!(
                "channel selection must hold distinct ids below {total}"
            )));
        }
        Ok(ChannelSelection { total, indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Uniform sample of `c_prime` of `c` channels without replacement.
pub fn sample_channel_subset(c: usize, c_prime: usize, rng_seed: u64) -> Result<ChannelSelection> {
    if c_prime == 0 || c_prime > c {
        return Err(FmirError::InvalidArgument(format!(
            "cannot select {c_prime} of {c} channels"
        )));
    }
    let mut rng = seed::rng(rng_seed);
    let picked = index::sample(&mut rng, c, c_prime).into_vec();
    ChannelSelection::new(c, picked)
}

/// Mean vector plus an orthonormal c' x c projection basis.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f32>,
    /// Rows are principal directions, strongest first.
    pub basis: Array2<f32>,
    pub explained_variance: Vec<f32>,
}

impl PcaModel {
    pub fn in_channels(&self) -> usize {
        self.mean.len()
    }

    pub fn out_channels(&self) -> usize {
        self.basis.nrows()
    }

    pub fn project(&self, v: &[f32]) -> Vec<f32> {
        let centered: Vec<f32> = v.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        self.basis
            .rows()
            .into_iter()
            .map(|r| r.iter().zip(&centered).map(|(b, c)| b * c).sum())
            .collect()
    }

    pub fn to_container(&self) -> Container {
        let (cp, c) = self.basis.dim();
        let mut h = Header::new(Kind::Pca, vec![cp + 1, c], Dtype::F32, [1.0; 3]);
        h.extra.insert("explained_variance".into(), serde_json::json!(self.explained_variance));
        let mut data = self.mean.clone();
        data.extend(self.basis.iter());
        Container::from_f32(h, &data)
    }

    pub fn from_container(cont: &Container) -> Result<Self> {
        cont.header.expect_kind(Kind::Pca)?;
        let &[rows, c] = cont.header.shape.as_slice() else {
            return Err(FmirError::Format("pca shape must be [c' + 1, c]".into()));
        };
        if rows < 2 {
            return Err(FmirError::Format("pca needs a mean row and at least one basis row".into()));
        }
        let data = cont.f32_data()?;
        let mean = data[..c].to_vec();
        let basis = Array2::from_shape_vec((rows - 1, c), data[c..].to_vec())
            .map_err(|e| FmirError::Format(e.to_string()))?;
        let explained_variance = match cont.header.extra.get("explained_variance") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => vec![0.0; rows - 1],
        };
        Ok(PcaModel { mean, basis, explained_variance })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        PcaModel::from_container(&Container::read(path)?)
    }
}

/// Fits PCA on `samples` (one row per sample, c columns) keeping `c_prime`
/// directions.
pub fn fit_pca(samples: ArrayView2<'_, f32>, c_prime: usize) -> Result<PcaModel> {
    let (n, c) = samples.dim();
    if c_prime == 0 || c_prime > c {
        return Err(FmirError::InvalidArgument(format!("cannot keep {c_prime} of {c} components")));
    }
    if n < c_prime {
        return Err(FmirError::InvalidArgument(format!(
            "pca needs at least {c_prime} samples, got {n}"
        )));
    }
    let mut mean = vec![0.0f64; c];
    for row in samples.rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    // Covariance, accumulated over samples in row order.
    let mut cov = vec![0.0f64; c * c];
    let mut centered = vec![0.0f64; c];
    for row in samples.rows() {
        for ((dst, &v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *dst = v as f64 - m;
        }
        for i in 0..c {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let out = &mut cov[i * c..i * c + i + 1];
            for (o, &cj) in out.iter_mut().zip(&centered[..=i]) {
                *o += ci * cj;
            }
        }
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    for i in 0..c {
        for j in 0..=i {
            let v = cov[i * c + j] / denom;
            cov[i * c + j] = v;
            cov[j * c + i] = v;
        }
    }

    let (values, vectors) = symmetric_eigen(&cov, c);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let argmax = |k: usize| -> usize {
        let mut best = 0;
        for i in 1..c {
            if vectors[i * c + k].abs() > vectors[best * c + k].abs() {
                best = i;
            }
        }
        best
    };
    // Within runs of numerically equal eigenvalues, order by the channel index
    // of each direction's largest-magnitude entry.
    let scale = values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-9 * scale;
    let mut start = 0;
    while start < c {
        let mut end = start + 1;
        while end < c && (values[order[end - 1]] - values[order[end]]).abs() <= tol {
            end += 1;
        }
        order[start..end].sort_by_key(|&k| argmax(k));
        start = end;
    }

    let mut basis = Array2::<f32>::zeros((c_prime, c));
    let mut explained = Vec::with_capacity(c_prime);
    for (r, &k) in order.iter().take(c_prime).enumerate() {
        let sign = if vectors[argmax(k) * c + k] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..c {
            basis[[r, i]] = (sign * vectors[i * c + k]) as f32;
        }
        explained.push(values[k].max(0.0) as f32);
    }
    Ok(PcaModel { mean: mean.into_iter().map(|m| m as f32).collect(), basis, explained_variance: explained })
}

/// Eigen-decomposition of a dense symmetric matrix (row-major, n x n) by
/// Householder tridiagonalisation followed by implicit QL iterations.
/// Returns (eigenvalues, eigenvectors) with eigenvector k stored in column k.
pub(crate) fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = a.to_vec();
    let mut d = vec![0.0f64; n];
    let mut e = vec![0.0f64; n];
    if n == 0 {
        return (d, v);
    }
    let at = |i: usize, j: usize| i * n + j;

    // Householder reduction to tridiagonal form.
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
                v[at(j, i)] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[at(j, i)] = f;
                g = e[j] + v[at(j, j)] * f;
                for k in j + 1..i {
                    g += v[at(k, j)] * d[k];
                    e[k] += v[at(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[at(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    // Accumulate transformations.
    for i in 0..n - 1 {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[at(k, i + 1)] * v[at(k, j)];
                }
                for k in 0..=i {
                    v[at(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = 0.0;
    }
    v[at(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;

    // Implicit QL on the tridiagonal matrix.
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0f64;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            loop {
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v[at(k, i + 1)];
                        v[at(k, i + 1)] = s * v[at(k, i)] + c * h;
                        v[at(k, i)] = c * v[at(k, i)] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    (d, v)
}

fn voxel_rows(fv: &FeatureVolume) -> Array2<f32> {
    let c = fv.channels();
    let n = fv.as_slice().len() / c;
    let flat = fv.as_slice();
    Array2::from_shape_fn((n, c), |(i, k)| flat[k * n + i])
}

/// Fits one PCA model on the voxel feature vectors of both volumes of a pair,
/// using a seeded uniform subsample of at most `max_samples` vectors.
pub fn fit_pca_for_pair(
    a: &FeatureVolume,
    b: &FeatureVolume,
    c_prime: usize,
    max_samples: usize,
    rng_seed: u64,
) -> Result<PcaModel> {
    if a.channels() != b.channels() {
        return Err(FmirError::ChannelMismatch { expected: a.channels(), got: b.channels() });
    }
    let ra = voxel_rows(a);
    let rb = voxel_rows(b);
    let all = ndarray::concatenate(ndarray::Axis(0), &[ra.view(), rb.view()])
        .map_err(|e| FmirError::ShapeMismatch(e.to_string()))?;
    if all.nrows() <= max_samples {
        return fit_pca(all.view(), c_prime);
    }
    let mut rng = seed::rng(seed::derive(rng_seed, &[seed::tag::PCA_SUBSAMPLE]));
    let mut picked = index::sample(&mut rng, all.nrows(), max_samples).into_vec();
    picked.sort_unstable();
    let sub = all.select(ndarray::Axis(0), &picked);
    fit_pca(sub.view(), c_prime)
}

fn expect_stage(fv: &FeatureVolume, stage: FeatureStage) -> Result<()> {
    if fv.stage() != stage {
        return Err(FmirError::InvalidArgument(format!(
            "expected {stage} features, got {}",
            fv.stage()
        )));
    }
    Ok(())
}

/// Projects each voxel's channel vector v to basis * (v - mean).
pub fn apply_pca(fv: &FeatureVolume, m: &PcaModel) -> Result<FeatureVolume> {
    expect_stage(fv, FeatureStage::RawC)?;
    if fv.channels() != m.in_channels() {
        return Err(FmirError::ChannelMismatch { expected: m.in_channels(), got: fv.channels() });
    }
    let c = fv.channels();
    let cp = m.out_channels();
    let [h, w, d] = fv.spatial_shape();
    let n = h * w * d;
    let flat = fv.as_slice();
    let mut centered = vec![0.0f32; c * n];
    for k in 0..c {
        for i in 0..n {
            centered[k * n + i] = flat[k * n + i] - m.mean[k];
        }
    }
    let centered = Array2::from_shape_vec((c, n), centered).expect("shape");
    let out = m.basis.dot(&centered);
    let data = Array4::from_shape_vec((cp, h, w, d), out.into_raw_vec_and_offset().0).expect("shape");
    FeatureVolume::new(data, FeatureStage::ReducedC).map(|f| f.with_geometry(fv.geometry().cloned()))
}

/// Keeps only the selected channels.
pub fn apply_subset(fv: &FeatureVolume, sel: &ChannelSelection) -> Result<FeatureVolume> {
    expect_stage(fv, FeatureStage::RawC)?;
    if fv.channels() != sel.total() {
        return Err(FmirError::ChannelMismatch { expected: sel.total(), got: fv.channels() });
    }
    let data = fv.data().select(ndarray::Axis(0), sel.indices());
    FeatureVolume::new(data, FeatureStage::ReducedC).map(|f| f.with_geometry(fv.geometry().cloned()))
}

/// A channel reduction c -> c'.
#[derive(Debug, Clone, PartialEq)]
pub enum Reduction {
    Subset(ChannelSelection),
    Pca(PcaModel),
}

impl Reduction {
    pub fn in_channels(&self) -> usize {
        match self {
            Reduction::Subset(s) => s.total(),
            Reduction::Pca(m) => m.in_channels(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Reduction::Subset(s) => s.len(),
            Reduction::Pca(m) => m.out_channels(),
        }
    }

    pub fn apply(&self, fv: &FeatureVolume) -> Result<FeatureVolume> {
        match self {
            Reduction::Subset(s) => apply_subset(fv, s),
            Reduction::Pca(m) => apply_pca(fv, m),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_sym(n: usize, seed_v: u64) -> Vec<f64> {
        let mut rng = seed::rng(seed_v);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = rng.random_range(-1.0..1.0);
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        a
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        for n in [1, 2, 5, 17] {
            let a = random_sym(n, n as u64);
            let (d, v) = symmetric_eigen(&a, n);
            for i in 0..n {
                for j in 0..n {
                    let r: f64 = (0..n).map(|k| v[i * n + k] * d[k] * v[j * n + k]).sum();
                    assert!((r - a[i * n + j]).abs() < 1e-10, "n={n} ({i},{j})");
                    let o: f64 = (0..n).map(|k| v[k * n + i] * v[k * n + j]).sum();
                    assert!((o - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn subset_properties() {
        let s = sample_channel_subset(768, 256, 5).unwrap();
        assert_eq!(s.len(), 256);
        assert!(s.indices().windows(2).all(|w| w[0] < w[1]));
        assert!(s.indices().iter().all(|&i| i < 768));
        assert_eq!(s, sample_channel_subset(768, 256, 5).unwrap());
        let full = sample_channel_subset(10, 10, 1).unwrap();
        assert_eq!(full.indices(), (0..10).collect::<Vec<_>>().as_slice());
        assert!(sample_channel_subset(4, 5, 0).is_err());
    }

    #[test]
    fn identical_samples_project_to_zero() {
        let s = Array2::from_shape_fn((10, 4), |(_, k)| k as f32 + 0.5);
        let m = fit_pca(s.view(), 2).unwrap();
        for row in s.rows() {
            assert!(m.project(row.as_slice().unwrap()).iter().all(|v| v.abs() < 1e-6));
        }
        assert!(m.explained_variance.iter().all(|&v| v >= -1e-7));
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let s = Array2::<f32>::zeros((2, 5));
        assert!(fit_pca(s.view(), 3).is_err());
    }

    #[test]
    fn pca_container_round_trip() {
        let mut rng = seed::rng(9);
        let s = Array2::from_shape_fn((40, 6), |_| rng.random_range(-1.0f32..1.0));
        let m = fit_pca(s.view(), 3).unwrap();
        let back = PcaModel::from_container(&Container::from_bytes(&m.to_container().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    fn subspace_samples(n: usize, seed_v: u64) -> Array2<f32> {
        let mut rng = seed::rng(seed_v);
        let origin = [0.3f32, -1.0, 2.0, 0.5, 0.0];
        let (a, b) = ([1.0f32, 0.5, 0.0, -0.5, 0.25], [0.0f32, 1.0, 1.0, 0.5, -1.0]);
        let mut s = Array2::zeros((n, 5));
        for mut row in s.rows_mut() {
            let (p, q): (f32, f32) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            for k in 0..5 {
                row[k] = origin[k] + p * a[k] + q * b[k];
            }
        }
        s
    }

    fn reconstruction_mse(s: &Array2<f32>, m: &PcaModel) -> f64 {
        let mut err = 0.0f64;
        for row in s.rows() {
            let v = row.as_slice().unwrap();
            let z = m.project(v);
            for k in 0..v.len() {
                let back = m.mean[k] + (0..z.len()).map(|r| m.basis[[r, k]] * z[r]).sum::<f32>();
                err += ((back - v[k]) as f64).powi(2);
            }
        }
        err / s.nrows() as f64
    }

    #[test]
    fn affine_subspace_is_recovered_and_beats_subsets() {
        let s = subspace_samples(200, 1);
        let m = fit_pca(s.view(), 2).unwrap();
        let pca_err = reconstruction_mse(&s, &m);
        assert!(pca_err < 1e-8, "{pca_err}");
        let gram = m.basis.dot(&m.basis.t());
        for i in 0..2 {
            for j in 0..2 {
                assert!((gram[[i, j]] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-5);
            }
        }
        for t in 0..100 {
            let sel = sample_channel_subset(5, 2, 100 + t).unwrap();
            let err: f64 = s
                .rows()
                .into_iter()
                .map(|row| {
                    (0..5)
                        .filter(|k| !sel.indices().contains(k))
                        .map(|k| ((row[k] - m.mean[k]) as f64).powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / s.nrows() as f64;
            assert!(pca_err <= err, "selection {:?}", sel.indices());
        }
    }

    #[test]
    fn matches_nalgebra_eigendecomposition() {
        let mut rng = seed::rng(3);
        let c = 12;
        let mix = Array2::from_shape_fn((c, c), |_| rng.random_range(-1.0f32..1.0));
        let z = Array2::from_shape_fn((500, c), |_| rng.random_range(-1.0f32..1.0));
        let s = z.dot(&mix);
        let m = fit_pca(s.view(), 5).unwrap();
        let n = s.nrows() as f64;
        let mean: Vec<f64> = (0..c).map(|k| s.column(k).iter().map(|&v| v as f64).sum::<f64>() / n).collect();
        let cov = nalgebra::DMatrix::from_fn(c, c, |i, j| {
            s.rows().into_iter().map(|r| (r[i] as f64 - mean[i]) * (r[j] as f64 - mean[j])).sum::<f64>() / (n - 1.0)
        });
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut idx: Vec<usize> = (0..c).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (r, &k) in idx.iter().take(5).enumerate() {
            let want = eig.eigenvalues[k];
            assert!((m.explained_variance[r] as f64 - want).abs() <= 1e-4 * want.max(1.0));
            let dot: f64 = (0..c).map(|i| m.basis[[r, i]] as f64 * eig.eigenvectors[(i, k)]).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-4, "direction {r}: {dot}");
            let big = (0..c).max_by(|&a, &b| m.basis[[r, a]].abs().total_cmp(&m.basis[[r, b]].abs())).unwrap();
            assert!(m.basis[[r, big]] > 0.0);
        }
        assert!(m.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn sample_order_does_not_matter() {
        let mut rng = seed::rng(8);
        let s = Array2::from_shape_fn((300, 7), |(i, k)| rng.random_range(-1.0f32..1.0) * (k + 1) as f32 + (i % 3) as f32);
        let m = fit_pca(s.view(), 3).unwrap();
        for t in 0..3 {
            let mut order: Vec<usize> = (0..s.nrows()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seed::rng(t));
            let p = fit_pca(s.select(ndarray::Axis(0), &order).view(), 3).unwrap();
            assert_eq!(p, m);
        }
    }

    #[test]
    fn per_step_subsets_are_fresh() {
        let subsets: Vec<ChannelSelection> = (0..50u64)
            .map(|step| sample_channel_subset(64, 16, seed::derive(0, &[seed::tag::CHANNEL_SUBSET, step])).unwrap())
            .collect();
        assert!(subsets.windows(2).all(|w| w[0] != w[1]));
    }
}

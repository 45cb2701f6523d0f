//! Slice-wise feature encoding. A volume is cut into its D axial slices, each
//! slice is padded to K x K and passed through a frozen 2D encoder of stride
//! 16, channels are reduced, and the slices are reassembled, upsampled back to
//! K x K and cropped to the original H x W. A trainable 3D conv block then
//! compresses the channels to n.

use std::fmt;
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::channel_reg::Reduction;
use crate::error::{FmirError, Result};
use crate::interp::{self, AxisMap};
use crate::io::{self, Container, Dtype, Header, Kind};
use crate::nn::ConvBlock;
use crate::seed;
use crate::volume::{Shape3, Volume};

/// Spatial reduction factor of every 2D encoder.
pub const ENCODER_STRIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureStage {
    #[serde(rename = "raw_c")]
    RawC,
    #[serde(rename = "reduced_c_prime")]
    ReducedC,
    #[serde(rename = "compressed_n")]
    CompressedN,
}

impl fmt::Display for FeatureStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureStage::RawC => "raw_c",
            FeatureStage::ReducedC => "reduced_c_prime",
            FeatureStage::CompressedN => "compressed_n",
        };
        f.write_str(s)
    }
}

/// How slice-grid features map back onto the source volume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceGeometry {
    pub source_shape: Shape3,
    pub k: usize,
}

impl SliceGeometry {
    pub fn offsets(&self) -> (usize, usize) {
        ((self.k - self.source_shape[0]) / 2, (self.k - self.source_shape[1]) / 2)
    }

    pub fn grid(&self) -> usize {
        self.k / ENCODER_STRIDE
    }
}

/// A multi-channel feature map (C, H, W, D) tagged with its pipeline stage.
/// Raw and reduced features on the slice grid carry a [`SliceGeometry`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    data: Array4<f32>,
    stage: FeatureStage,
    geometry: Option<SliceGeometry>,
}

impl FeatureVolume {
    pub fn new(data: Array4<f32>, stage: FeatureStage) -> Result<Self> {
        if data.shape().iter().any(|&d| d == 0) {
            return Err(FmirError::InvalidShape(format!("feature shape {:?}", data.shape())));
        }
        let data = data.as_standard_layout().into_owned();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FmirError::NonFinite("feature value".into()));
        }
        Ok(FeatureVolume { data, stage, geometry: None })
    }

    pub fn with_geometry(mut self, geometry: Option<SliceGeometry>) -> Self {
        self.geometry = geometry;
        self
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn as_slice(&self) -> &[f32] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn stage(&self) -> FeatureStage {
        self.stage
    }

    pub fn geometry(&self) -> Option<&SliceGeometry> {
        self.geometry.as_ref()
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial_shape(&self) -> Shape3 {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn to_container(&self) -> Container {
        let s = self.data.shape();
        let mut h = Header::new(Kind::Features, s.to_vec(), Dtype::F32, [1.0; 3]);
        h.extra.insert("stage".into(), serde_json::json!(self.stage));
        if let Some(g) = &self.geometry {
            h.extra.insert("geometry".into(), serde_json::json!(g));
        }
        Container::from_f32(h, self.as_slice())
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.header.expect_kind(Kind::Features)?;
        let shape = c.header.shape4()?;
        let stage: FeatureStage = match c.header.extra.get("stage") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|_| FmirError::Format(format!("unknown feature stage {v}")))?,
            None => return Err(FmirError::Format("features header lacks a stage".into())),
        };
        let geometry = match c.header.extra.get("geometry") {
            Some(v) => Some(serde_json::from_value(v.clone())?),
            None => None,
        };
        let data = io::array4_from(shape, c.f32_data()?)?;
        Ok(FeatureVolume::new(data, stage)?.with_geometry(geometry))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }
}

/// Reads a `.fmv` features file, e.g. foundation-model features exported
/// offline.
pub fn load_precomputed_features(path: impl AsRef<Path>) -> Result<FeatureVolume> {
    FeatureVolume::from_container(&Container::read(path)?)
}

/// Encoder geometry and channel widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Square input side of the 2D encoder.
    pub k: usize,
    /// 2D encoder output channels.
    pub c: usize,
    /// Channels after reduction.
    pub c_prime: usize,
    /// Channels after the 3D block.
    pub n: usize,
    pub stride: usize,
    /// Hidden width of the 3D block.
    pub hidden: usize,
}

impl EncoderConfig {
    pub const DINO_B: &'static str = "dino-b";
    pub const SAM_B: &'static str = "sam-b";
    pub const TOY: &'static str = "toy";

    pub fn dino_b() -> Self {
        EncoderConfig { k: 512, c: 768, c_prime: 256, n: 32, stride: ENCODER_STRIDE, hidden: 64 }
    }

    pub fn sam_b() -> Self {
        EncoderConfig { k: 512, c: 256, c_prime: 256, n: 32, stride: ENCODER_STRIDE, hidden: 64 }
    }

    /// Desk-scale profile used for synthetic experiments.
    pub fn toy() -> Self {
        EncoderConfig { k: 64, c: 32, c_prime: 16, n: 8, stride: ENCODER_STRIDE, hidden: 16 }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            Self::DINO_B => Ok(Self::dino_b()),
            Self::SAM_B => Ok(Self::sam_b()),
            Self::TOY => Ok(Self::toy()),
            other => Err(FmirError::Config(format!("unknown encoder profile '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != ENCODER_STRIDE {
            return Err(FmirError::Config(format!("stride must be {ENCODER_STRIDE}")));
        }
        if self.k == 0 || self.k % self.stride != 0 {
            return Err(FmirError::Config(format!("K={} must be a positive multiple of {}", self.k, self.stride)));
        }
        if self.n == 0 || self.hidden == 0 || self.n > self.c_prime || self.c_prime > self.c {
            return Err(FmirError::Config(format!(
                "channel widths must satisfy 0 < n <= c' <= c (n={}, c'={}, c={})",
                self.n, self.c_prime, self.c
            )));
        }
        Ok(())
    }
}

/// A frozen 2D slice encoder: K x K single-channel slice to a
/// (c, K/16, K/16) feature map.
pub trait Encoder2D: Send + Sync {
    fn channels(&self) -> usize;

    /// Encodes a K x K slice; the output is flattened (c, K/16, K/16).
    fn encode_slice(&self, slice: &Array2<f32>) -> Result<Array3<f32>>;
}

/// A zero-padded slice and where its content sits inside the K x K canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSlice {
    pub data: Array2<f32>,
    pub offset: (usize, usize),
}

/// Zero-pads an H x W slice to K x K with the content centred at
/// ((K - H) / 2, (K - W) / 2).
pub fn pad_slice(s: &Array2<f32>, k: usize) -> Result<PaddedSlice> {
    let (h, w) = s.dim();
    if h > k || w > k {
        return Err(FmirError::InvalidShape(format!("slice {h}x{w} does not fit in {k}x{k}")));
    }
    let offset = ((k - h) / 2, (k - w) / 2);
    if offset == (0, 0) {
        return Ok(PaddedSlice { data: s.clone(), offset });
    }
    let mut data = Array2::zeros((k, k));
    data.slice_mut(s![offset.0..offset.0 + h, offset.1..offset.1 + w]).assign(s);
    Ok(PaddedSlice { data, offset })
}

/// 3x3 convolution with stride 2 and zero padding 1.
#[derive(Debug, Clone, PartialEq)]
struct Conv2dS2 {
    cin: usize,
    cout: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Conv2dS2 {
    fn forward(&self, x: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
        let (oh, ow) = ((h + 1) / 2, (w + 1) / 2);
        let np = oh * ow;
        let kk = self.cin * 9;
        let mut cols = vec![0.0f32; kk * np];
        for c in 0..self.cin {
            for t in 0..9 {
                let (dy, dx) = ((t / 3) as isize - 1, (t % 3) as isize - 1);
                let row = &mut cols[(c * 9 + t) * np..(c * 9 + t + 1) * np];
                for oy in 0..oh {
                    let iy = 2 * oy as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = 2 * ox as isize + dx;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        row[oy * ow + ox] = x[(c * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
        let weight = Array2::from_shape_vec((self.cout, kk), self.weight.clone()).expect("shape");
        let cols = Array2::from_shape_vec((kk, np), cols).expect("shape");
        let mut out = weight.dot(&cols);
        for (mut row, b) in out.rows_mut().into_iter().zip(&self.bias) {
            row.mapv_inplace(|v| v + b);
        }
        (out.into_raw_vec_and_offset().0, oh, ow)
    }
}

/// Deterministic stand-in for a frozen foundation encoder: four seeded stride-2
/// convolution stages (total stride 16) with tanh between stages.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    seed: u64,
    stages: Vec<Conv2dS2>,
}

impl ToyEncoder {
    pub const WIDTHS: [usize; 3] = [16, 32, 64];

    pub fn new(c: usize, seed_v: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed_v, &[seed::tag::ENCODER]));
        let widths = [1, Self::WIDTHS[0], Self::WIDTHS[1], Self::WIDTHS[2], c];
        let stages = widths
            .windows(2)
            .map(|w| {
                let (cin, cout) = (w[0], w[1]);
                let normal = Normal::new(0.0, (1.0 / (cin * 9) as f32).sqrt() * 1.6).expect("finite std");
                Conv2dS2 {
                    cin,
                    cout,
                    weight: (0..cout * cin * 9).map(|_| normal.sample(&mut rng)).collect(),
                    bias: (0..cout).map(|_| rng.random_range(-0.2..0.2)).collect(),
                }
            })
            .collect();
        ToyEncoder { seed: seed_v, stages }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Hash of all frozen parameters; used to check that nothing mutates them.
    pub fn param_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for st in &self.stages {
            for v in st.weight.iter().chain(&st.bias) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

impl Encoder2D for ToyEncoder {
    fn channels(&self) -> usize {
        self.stages.last().expect("stages").cout
    }

    fn encode_slice(&self, slice: &Array2<f32>) -> Result<Array3<f32>> {
        let (h, w) = slice.dim();
        if h != w || h == 0 || h % ENCODER_STRIDE != 0 {
            return Err(FmirError::InvalidShape(format!(
                "encoder input must be square with side a multiple of {ENCODER_STRIDE}, got {h}x{w}"
            )));
        }
        let mut x = slice.as_standard_layout().iter().copied().collect::<Vec<f32>>();
        let (mut hh, mut ww) = (h, w);
        let last = self.stages.len() - 1;
        for (i, st) in self.stages.iter().enumerate() {
            let (y, oh, ow) = st.forward(&x, hh, ww);
            x = y;
            if i < last {
                x.iter_mut().for_each(|v| *v = v.tanh());
            }
            hh = oh;
            ww = ow;
        }
        Ok(Array3::from_shape_vec((self.channels(), hh, ww), x).expect("shape"))
    }
}

/// Convenience wrapper: encode one K x K slice with a toy encoder built from
/// `seed`.
pub fn toy_encode_slice(s: &Array2<f32>, c: usize, seed_v: u64) -> Result<Array3<f32>> {
    ToyEncoder::new(c, seed_v).encode_slice(s)
}

/// Runs the frozen 2D encoder over every axial slice of the min-max normalised
/// volume. Output: raw features (c, K/16, K/16, D) on the slice grid.
pub fn encode_raw(v: &Volume, enc: &dyn Encoder2D, cfg: &EncoderConfig) -> Result<FeatureVolume> {
    cfg.validate()?;
    let [h, w, d] = v.shape();
    if h > cfg.k || w > cfg.k {
        return Err(FmirError::InvalidShape(format!("slices {h}x{w} exceed K={}", cfg.k)));
    }
    if enc.channels() != cfg.c {
        return Err(FmirError::ChannelMismatch { expected: cfg.c, got: enc.channels() });
    }
    let norm = v.normalized();
    let g = cfg.k / cfg.stride;
    let mut out = Array4::<f32>::zeros((cfg.c, g, g, d));
    for z in 0..d {
        let slice = norm.data().slice(s![.., .., z]).to_owned();
        let padded = pad_slice(&slice, cfg.k)?;
        let feat = enc.encode_slice(&padded.data)?;
        if feat.dim() != (cfg.c, g, g) {
            return Err(FmirError::InvalidShape(format!(
                "encoder produced {:?}, expected ({}, {g}, {g})",
                feat.dim(),
                cfg.c
            )));
        }
        out.slice_mut(s![.., .., .., z]).assign(&feat);
    }
    Ok(FeatureVolume::new(out, FeatureStage::RawC)?
        .with_geometry(Some(SliceGeometry { source_shape: [h, w, d], k: cfg.k })))
}

/// Upsamples reduced slice-grid features to K x K in-plane and crops the pad
/// offsets, giving (c', H, W, D).
pub fn reassemble(reduced: &FeatureVolume) -> Result<FeatureVolume> {
    let geo = reduced
        .geometry()
        .ok_or_else(|| FmirError::InvalidArgument("slice-grid features need a geometry to reassemble".into()))?;
    let [gh, gw, d] = reduced.spatial_shape();
    let [h, w, sd] = geo.source_shape;
    if gh != geo.grid() || gw != geo.grid() || d != sd {
        return Err(FmirError::ShapeMismatch(format!(
            "features {:?} do not match geometry {:?}",
            reduced.spatial_shape(),
            geo
        )));
    }
    let (oh, ow) = geo.offsets();
    let mx = AxisMap::half_pixel(gh, geo.k).crop(oh, h);
    let my = AxisMap::half_pixel(gw, geo.k).crop(ow, w);
    let mz = AxisMap::half_pixel(d, d);
    let c = reduced.channels();
    let out = interp::resample_separable(reduced.as_slice(), c, [gh, gw, d], [&mx, &my, &mz]);
    let data = Array4::from_shape_vec((c, h, w, d), out).expect("shape");
    FeatureVolume::new(data, reduced.stage())
}

/// Seeded 3D block c' -> hidden -> hidden -> n.
pub fn init_encoder_block(cfg: &EncoderConfig, seed_v: u64) -> ConvBlock {
    let mut rng = seed::rng(seed::derive(seed_v, &[seed::tag::BLOCK]));
    ConvBlock::init(&[cfg.c_prime, cfg.hidden, cfg.hidden, cfg.n], false, &mut rng)
}

/// Applies the 3D block to full-resolution reduced features.
pub fn compress(reduced_full: &FeatureVolume, block: &ConvBlock) -> Result<FeatureVolume> {
    if reduced_full.channels() != block.in_channels() {
        return Err(FmirError::ChannelMismatch { expected: block.in_channels(), got: reduced_full.channels() });
    }
    let dims = reduced_full.spatial_shape();
    let out = block.forward_output(reduced_full.as_slice(), dims);
    let data = Array4::from_shape_vec((block.out_channels(), dims[0], dims[1], dims[2]), out).expect("shape");
    FeatureVolume::new(data, FeatureStage::CompressedN)
}

/// Full pipeline: slice, pad, encode, reduce, reassemble, compress.
pub fn encode_volume(
    v: &Volume,
    enc: &dyn Encoder2D,
    reducer: &Reduction,
    block: &ConvBlock,
    cfg: &EncoderConfig,
) -> Result<FeatureVolume> {
    if v.shape()[2] == 0 {
        return Err(FmirError::InvalidShape("volume has no slices".into()));
    }
    let raw = encode_raw(v, enc, cfg)?;
    encode_from_raw(&raw, reducer, block, cfg)
}

/// The pipeline tail for raw features that were computed earlier or imported.
pub fn encode_from_raw(raw: &FeatureVolume, reducer: &Reduction, block: &ConvBlock, cfg: &EncoderConfig) -> Result<FeatureVolume> {
    if reducer.out_channels() != cfg.c_prime {
        return Err(FmirError::ChannelMismatch { expected: cfg.c_prime, got: reducer.out_channels() });
    }
    let reduced = reducer.apply(raw)?;
    let full = reassemble(&reduced)?;
    compress(&full, block)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_slice_cases() {
        let a = Array2::from_elem((512, 512), 1.0f32);
        let p = pad_slice(&a, 512).unwrap();
        assert_eq!(p.offset, (0, 0));
        assert_eq!(p.data, a);
        let b = Array2::from_elem((128, 128), 2.0f32);
        let p = pad_slice(&b, 512).unwrap();
        assert_eq!(p.offset, (192, 192));
        assert_eq!(p.data.dim(), (512, 512));
        assert_eq!(p.data[[192, 192]], 2.0);
        assert_eq!(p.data[[191, 200]], 0.0);
        assert_eq!(p.data[[319, 319]], 2.0);
        assert_eq!(p.data[[320, 319]], 0.0);
        assert!(pad_slice(&Array2::zeros((600, 600)), 512).is_err());
    }

    #[test]
    fn toy_encoder_geometry_and_determinism() {
        let s = Array2::from_shape_fn((64, 64), |(i, j)| ((i * 7 + j * 3) % 11) as f32 / 10.0);
        let a = toy_encode_slice(&s, 8, 3).unwrap();
        assert_eq!(a.dim(), (8, 4, 4));
        assert_eq!(a, toy_encode_slice(&s, 8, 3).unwrap());
        assert!(toy_encode_slice(&Array2::zeros((64, 48)), 8, 3).is_err());
        assert!(toy_encode_slice(&Array2::zeros((40, 40)), 8, 3).is_err());
    }

    #[test]
    fn presets_unify_to_256() {
        assert_eq!(EncoderConfig::preset("dino-b").unwrap().c, 768);
        assert_eq!(EncoderConfig::preset("sam-b").unwrap().c, 256);
        for p in ["dino-b", "sam-b"] {
            let cfg = EncoderConfig::preset(p).unwrap();
            assert_eq!(cfg.c_prime, 256);
            assert_eq!(cfg.k, 512);
            assert_eq!(cfg.n, 32);
            cfg.validate().unwrap();
        }
        assert!(EncoderConfig::preset("clip").is_err());
        let mut bad = EncoderConfig::toy();
        bad.k = 50;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unknown_stage_is_a_format_error() {
        let fv = FeatureVolume::new(Array4::zeros((2, 2, 2, 2)), FeatureStage::RawC).unwrap();
        let mut c = fv.to_container();
        c.header.extra.insert("stage".into(), serde_json::json!("mystery"));
        assert!(matches!(FeatureVolume::from_container(&c), Err(FmirError::Format(_))));
    }

    #[test]
    fn patch_change_stays_in_its_receptive_field() {
        let base = Array2::from_shape_fn((128, 128), |(i, j)| ((i * 13 + j * 7) % 23) as f32 / 23.0);
        let mut moved = base.clone();
        for i in 48..64 {
            for j in 64..80 {
                moved[[i, j]] += 0.5;
            }
        }
        let enc = ToyEncoder::new(16, 2);
        let (a, b) = (enc.encode_slice(&base).unwrap(), enc.encode_slice(&moved).unwrap());
        let mut touched = 0;
        for (((_, y, x), &p), &q) in a.indexed_iter().zip(b.iter()) {
            if p != q {
                assert!((3..=4).contains(&y) && (4..=5).contains(&x), "change leaked to ({y}, {x})");
                touched += 1;
            }
        }
        assert!(touched > 0);
    }

    #[test]
    fn slices_are_encoded_independently() {
        let v = Volume::from_shape_fn([40, 36, 5], |(x, y, z)| ((x * 3 + y * 5 + z * 11) % 17) as f32).unwrap();
        let rev = Volume::from_shape_fn([40, 36, 5], |(x, y, z)| v.data()[[x, y, 4 - z]]).unwrap();
        let cfg = EncoderConfig::toy();
        let enc = ToyEncoder::new(cfg.c, 4);
        let a = encode_raw(&v, &enc, &cfg).unwrap();
        let b = encode_raw(&rev, &enc, &cfg).unwrap();
        assert_eq!(a.data(), &b.data().slice(s![.., .., .., ..;-1]));
    }

    #[test]
    fn full_pipeline_shape() {
        let cfg = EncoderConfig { k: 512, c: 64, c_prime: 32, n: 32, stride: 16, hidden: 8 };
        let v = Volume::from_shape_fn([128, 128, 16], |(x, y, z)| ((x / 8 + y / 8 + z) % 5) as f32).unwrap();
        let enc = ToyEncoder::new(cfg.c, 1);
        let red = Reduction::Subset(crate::channel_reg::sample_channel_subset(cfg.c, cfg.c_prime, 3).unwrap());
        let block = init_encoder_block(&cfg, 5);
        let out = encode_volume(&v, &enc, &red, &block, &cfg).unwrap();
        assert_eq!(out.data().shape(), &[32, 128, 128, 16]);
        assert_eq!(out.stage(), FeatureStage::CompressedN);
        let again = encode_volume(&v, &enc, &red, &block, &cfg).unwrap();
        assert_eq!(out, again);
    }
}

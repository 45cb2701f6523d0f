//! Training and evaluation: the per-step channel-subset training loop with
//! Adam and polynomial decay, checkpoints, and split evaluation.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel_reg::{fit_pca_for_pair, sample_channel_subset, PcaModel, Reduction, PCA_MAX_SAMPLES};
use crate::dataset::LoadedPair;
use crate::encoder::{encode_from_raw, encode_raw, init_encoder_block, load_precomputed_features, reassemble, EncoderConfig, FeatureStage, FeatureVolume, ToyEncoder};
use crate::error::{FmirError, Result};
use crate::head::{head_backward, head_forward, init_head_params_with_width, register, HeadParams, PyramidConfig};
use crate::interp::{self, numel};
use crate::losses::{total_value_grad, LossBreakdown, LossInputs, LossWeights, NccConfig};
use crate::metrics::{AggregateReport, MetricsReport};
use crate::nn::{clip_global_norm, Adam, Conv3d, ConvBlock};
use crate::seed;
use crate::volume::{warp_segmentation, warp_volume, DeformationField, Interpolation, Segmentation, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Supervision {
    Unsupervised,
    WeaklySupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReductionMode {
    RandomSubset,
    Pca,
}

impl fmt::Display for ReductionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReductionMode::RandomSubset => "random-subset",
            ReductionMode::Pca => "pca",
        })
    }
}

impl FromStr for ReductionMode {
    type Err = FmirError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random-subset" => Ok(ReductionMode::RandomSubset),
            "pca" => Ok(ReductionMode::Pca),
            other => Err(FmirError::InvalidArgument(format!("unknown reduction mode {other:?}"))),
        }
    }
}

/// Where raw c-channel slice features come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureSource {
    /// The seeded toy encoder, run on the fly.
    Toy { seed: u64 },
    /// `<dir>/<pair id>_moving.fmv` and `<dir>/<pair id>_fixed.fmv`.
    Precomputed { dir: PathBuf },
}

impl FeatureSource {
    /// Raw features of (moving, fixed) for one pair.
    pub fn raw_pair(&self, pair: &LoadedPair, enc: &EncoderConfig) -> Result<(FeatureVolume, FeatureVolume)> {
        match self {
            FeatureSource::Toy { seed: s } => {
                let e = ToyEncoder::new(enc.c, *s);
                Ok((encode_raw(&pair.sample.moving, &e, enc)?, encode_raw(&pair.sample.fixed, &e, enc)?))
            }
            FeatureSource::Precomputed { dir } => {
                let load = |which: &str| -> Result<FeatureVolume> {
                    let f = load_precomputed_features(dir.join(format!("{}_{which}.fmv", pair.id)))?;
                    if f.stage() != FeatureStage::RawC || f.channels() != enc.c {
                        return Err(FmirError::ChannelMismatch { expected: enc.c, got: f.channels() });
                    }
                    Ok(f)
                };
                Ok((load("moving")?, load("fixed")?))
            }
        }
    }
}

/// Every field is written out explicitly in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f32,
    pub poly_power: f32,
    pub total_steps: usize,
    pub batch_size: usize,
    pub lambda: LossWeights,
    pub supervision: Supervision,
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
    pub pyramid: PyramidConfig,
    pub reduction_train: ReductionMode,
    pub reduction_eval: ReductionMode,
    pub ncc: NccConfig,
    pub grad_clip: f32,
    pub seed: u64,
    pub features: FeatureSource,
}

impl TrainConfig {
    /// Reference settings: lr 1e-4, decay power 0.9, unit loss weights
    /// (Dice off when unsupervised), toy encoder.
    pub fn reference(total_steps: usize, supervision: Supervision) -> Self {
        let lambda = match supervision {
            Supervision::Unsupervised => LossWeights::unsupervised(),
            Supervision::WeaklySupervised => LossWeights::weakly_supervised(),
        };
        TrainConfig {
            base_lr: 1e-4,
            poly_power: 0.9,
            total_steps,
            batch_size: 1,
            lambda,
            supervision,
            encoder: EncoderConfig::toy(),
            head_hidden: crate::head::HEAD_HIDDEN,
            pyramid: PyramidConfig::default(),
            reduction_train: ReductionMode::RandomSubset,
            reduction_eval: ReductionMode::Pca,
            ncc: NccConfig::default(),
            grad_clip: 1.0,
            seed: 0,
            features: FeatureSource::Toy { seed: 0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps < 1 {
            return Err(FmirError::Config("total_steps must be >= 1".into()));
        }
        if self.batch_size != 1 {
            return Err(FmirError::Config(format!("batch_size must be 1, got {}", self.batch_size)));
        }
        if !(self.base_lr > 0.0) || !(self.poly_power >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(FmirError::Config("base_lr and grad_clip must be > 0, poly_power >= 0".into()));
        }
        if self.supervision == Supervision::Unsupervised && self.lambda.dice != 0.0 {
            return Err(FmirError::Config("unsupervised training requires lambda.dice = 0".into()));
        }
        if self.head_hidden == 0 {
            return Err(FmirError::Config("head_hidden must be >= 1".into()));
        }
        self.lambda.validate()?;
        self.ncc.validate()?;
        self.encoder.validate()?;
        self.pyramid.validate()
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// lr = base_lr * (1 - step/total_steps)^power.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f32, power: f32) -> Result<f32> {
    if total_steps == 0 || step > total_steps {
        return Err(FmirError::InvalidArgument(format!("step {step} outside 0..={total_steps}")));
    }
    let frac = 1.0 - step as f64 / total_steps as f64;
    Ok((base_lr as f64 * frac.powf(power as f64)) as f32)
}

/// Trainable parameters: the 3D encoder block and the registration head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub block: ConvBlock,
    pub head: HeadParams,
}

impl Model {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            block: init_encoder_block(&cfg.encoder, cfg.seed),
            head: init_head_params_with_width(cfg.encoder.n, cfg.pyramid.levels, cfg.head_hidden, cfg.seed)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Model { block: self.block.zeros_like(), head: self.head.zeros_like() }
    }

    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut t = self.block.tensors();
        t.extend(self.head.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut t = self.block.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut n = self.block.tensor_names("block");
        n.extend(self.head.tensor_names());
        n
    }

    /// Inference: reduce raw features, compress them and register.
    pub fn register_raw(&self, raw_m: &FeatureVolume, raw_f: &FeatureVolume, reducer: &Reduction, cfg: &TrainConfig) -> Result<DeformationField> {
        let fm = encode_from_raw(raw_m, reducer, &self.block, &cfg.encoder)?;
        let ff = encode_from_raw(raw_f, reducer, &self.block, &cfg.encoder)?;
        register(&fm, &ff, &self.head, &cfg.pyramid)
    }
}

fn pair_labels(p: &LoadedPair) -> Vec<i32> {
    crate::metrics::union_labels(&p.sample.moving_seg, &p.sample.fixed_seg)
}

/// Loss of one pair under a given reducer, with parameter gradients when
/// requested.
pub(crate) fn pair_loss(
    model: &Model,
    raw: &(FeatureVolume, FeatureVolume),
    reducer: &Reduction,
    pair: &LoadedPair,
    cfg: &TrainConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Model>)> {
    let dims = pair.sample.moving.shape();
    let red_m = reassemble(&reducer.apply(&raw.0)?)?;
    let red_f = reassemble(&reducer.apply(&raw.1)?)?;
    if red_m.spatial_shape() != dims {
        return Err(FmirError::ShapeMismatch(format!(
            "{}: features {:?} vs image {dims:?}",
            pair.id,
            red_m.spatial_shape()
        )));
    }
    let cache_m = model.block.forward(red_m.as_slice(), dims);
    let cache_f = model.block.forward(red_f.as_slice(), dims);
    let n = model.block.out_channels();
    let trace = head_forward(cache_m.output(), cache_f.output(), n, dims, &model.head, &cfg.pyramid)?;
    let phi = trace.field();
    let moving = pair.sample.moving.as_slice();
    let warped = interp::warp_trilinear(moving, 1, dims, phi);

    let weak = cfg.supervision == Supervision::WeaklySupervised && cfg.lambda.dice > 0.0;
    let labels = pair_labels(pair);
    let seg = if weak {
        let m = pair.sample.moving_seg.one_hot(&labels);
        let f = pair.sample.fixed_seg.one_hot(&labels);
        let w = interp::warp_trilinear(&m, labels.len(), dims, phi);
        Some((m, w, f))
    } else {
        None
    };
    let inputs = LossInputs {
        warped: &warped,
        fixed: pair.sample.fixed.as_slice(),
        dims,
        seg: seg.as_ref().map(|(_, w, f)| (w.as_slice(), f.as_slice(), labels.len())),
        field: phi,
    };
    let (loss, grads) = total_value_grad(&inputs, &cfg.lambda, &cfg.ncc, with_grad)?;
    if !loss.total.is_finite() {
        return Err(FmirError::NonFinite(format!(
            "loss on {}: ncc {} dice {:?} smooth {} (max |u| {})",
            pair.id,
            loss.ncc,
            loss.dice,
            loss.smooth,
            phi.iter().fold(0.0f32, |a, v| a.max(v.abs()))
        )));
    }
    let Some(g) = grads else {
        return Ok((loss, None));
    };
    let mut d_phi = g.field;
    interp::warp_trilinear_backward(moving, 1, dims, phi, &g.warped, None, &mut d_phi);
    if let (Some((m, _, _)), Some(gs)) = (&seg, &g.warped_seg) {
        interp::warp_trilinear_backward(m, labels.len(), dims, phi, gs, None, &mut d_phi);
    }
    let mut grad = model.zeros_like();
    let (d_fm, d_ff) = head_backward(&trace, &model.head, &d_phi, &mut grad.head);
    model.block.backward(&cache_m, &d_fm, &mut grad.block, false);
    model.block.backward(&cache_f, &d_ff, &mut grad.block, false);
    debug_assert_eq!(d_fm.len(), n * numel(dims));
    Ok((loss, Some(grad)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub pair: String,
    pub ncc: f64,
    pub dice: Option<f64>,
    pub smooth: f64,
    pub total: f64,
    pub lr: f32,
    pub grad_norm: f32,
    /// Channel subset used for this step, absent under PCA training.
    pub subset: Option<Vec<usize>>,
}

/// The mutable training state. The random streams are pure functions of
/// (config seed, step), so the step counter is the whole RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
}

const CKPT_MAGIC: &[u8; 8] = b"FMIRCKP1";

#[derive(Debug, Serialize, Deserialize)]
struct CkptMeta {
    step: usize,
    config: TrainConfig,
    config_hash: String,
    block_widths: Vec<usize>,
    head_widths: Vec<Vec<usize>>,
    adam: AdamMeta,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamMeta {
    t: u64,
    beta1: f32,
    beta2: f32,
    eps: f32,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    len: usize,
}

fn block_from_widths(w: &[usize]) -> Result<ConvBlock> {
    if w.len() < 2 || w.contains(&0) {
        return Err(FmirError::Format(format!("bad block widths {w:?}")));
    }
    Ok(ConvBlock { layers: w.windows(2).map(|p| Conv3d::zeros(p[0], p[1])).collect() })
}

impl Checkpoint {
    pub fn fresh(cfg: &TrainConfig) -> Result<Self> {
        let model = Model::init(cfg)?;
        let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        Ok(Checkpoint { config: cfg.clone(), adam: Adam::new(&sizes), model, step: 0 })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names = self.model.tensor_names();
        let params = self.model.tensors();
        let mut tensors: Vec<TensorMeta> = Vec::new();
        let mut blobs: Vec<&[f32]> = Vec::new();
        for (prefix, set) in [("", &params), ("adam.m.", &self.adam.m.iter().map(Vec::as_slice).collect()), ("adam.v.", &self.adam.v.iter().map(Vec::as_slice).collect())] {
            for (name, t) in names.iter().zip(set.iter()) {
                tensors.push(TensorMeta { name: format!("{prefix}{name}"), len: t.len() });
                blobs.push(t);
            }
        }
        let meta = CkptMeta {
            step: self.step,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            block_widths: self.model.block.widths(),
            head_widths: self.model.head.levels.iter().map(ConvBlock::widths).collect(),
            adam: AdamMeta { t: self.adam.t, beta1: self.adam.beta1, beta2: self.adam.beta2, eps: self.adam.eps },
            tensors,
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * blobs.iter().map(|b| b.len()).sum::<usize>());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for b in blobs {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
            return Err(FmirError::Format("not a checkpoint (bad magic)".into()));
        }
        let jlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + jlen).ok_or_else(|| FmirError::Format("truncated checkpoint header".into()))?;
        let meta: CkptMeta = serde_json::from_slice(body)?;
        if meta.config.hash() != meta.config_hash {
            return Err(FmirError::Format("checkpoint config hash mismatch".into()));
        }
        let mut model = Model {
            block: block_from_widths(&meta.block_widths)?,
            head: HeadParams { levels: meta.head_widths.iter().map(|w| block_from_widths(w)).collect::<Result<_>>()? },
        };
        let names = model.tensor_names();
        let k = names.len();
        if meta.tensors.len() != 3 * k {
            return Err(FmirError::Format(format!("checkpoint lists {} tensors, expected {}", meta.tensors.len(), 3 * k)));
        }
        let payload = &bytes[16 + jlen..];
        let total: usize = meta.tensors.iter().map(|t| t.len).sum();
        if payload.len() != 4 * total {
            return Err(FmirError::SizeMismatch { expected: 4 * total, found: payload.len() });
        }
        let mut floats = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut read = |meta_t: &TensorMeta, expect_name: &str, expect_len: usize| -> Result<Vec<f32>> {
            if meta_t.name != expect_name || meta_t.len != expect_len {
                return Err(FmirError::Format(format!(
                    "checkpoint tensor {} ({}) where {expect_name} ({expect_len}) was expected",
                    meta_t.name, meta_t.len
                )));
            }
            Ok(floats.by_ref().take(expect_len).collect())
        };
        let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        let mut params = Vec::with_capacity(k);
        for i in 0..k {
            params.push(read(&meta.tensors[i], &names[i], sizes[i])?);
        }
        let mut adam = Adam::new(&sizes);
        for i in 0..k {
            adam.m[i] = read(&meta.tensors[k + i], &format!("adam.m.{}", names[i]), sizes[i])?;
        }
        for i in 0..k {
            adam.v[i] = read(&meta.tensors[2 * k + i], &format!("adam.v.{}", names[i]), sizes[i])?;
        }
        for (dst, src) in model.tensors_mut().into_iter().zip(params) {
            dst.copy_from_slice(&src);
        }
        adam.t = meta.adam.t;
        adam.beta1 = meta.adam.beta1;
        adam.beta2 = meta.adam.beta2;
        adam.eps = meta.adam.eps;
        Ok(Checkpoint { config: meta.config, model, adam, step: meta.step })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| FmirError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| FmirError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| FmirError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            FmirError::Format(m) => FmirError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Owns the training state over an in-memory training split.
pub struct Trainer<'a> {
    pub state: Checkpoint,
    pairs: &'a [LoadedPair],
    raw: Vec<(FeatureVolume, FeatureVolume)>,
    pca: Vec<Option<PcaModel>>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, pairs: &'a [LoadedPair]) -> Result<Self> {
        Self::resume(Checkpoint::fresh(cfg)?, pairs)
    }

    /// Continues from a checkpoint. Raw features are computed once, since the
    /// 2D encoder is frozen.
    pub fn resume(state: Checkpoint, pairs: &'a [LoadedPair]) -> Result<Self> {
        state.config.validate()?;
        if pairs.is_empty() {
            return Err(FmirError::InvalidArgument("training split is empty".into()));
        }
        if state.step > state.config.total_steps {
            return Err(FmirError::Config(format!(
                "checkpoint step {} beyond total_steps {}",
                state.step, state.config.total_steps
            )));
        }
        let raw = pairs
            .iter()
            .map(|p| state.config.features.raw_pair(p, &state.config.encoder))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer { pca: vec![None; pairs.len()], state, pairs, raw })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.state.config.total_steps
    }

    /// Index of the pair used at `step`: a fresh seeded permutation per epoch.
    pub fn pair_index(&self, step: usize) -> usize {
        let n = self.pairs.len();
        let epoch = (step / n) as u64;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed::derive(self.state.config.seed, &[seed::tag::PAIR_ORDER, epoch])));
        order[step % n]
    }

    fn reducer(&mut self, i: usize, step: usize) -> Result<Reduction> {
        let cfg = &self.state.config;
        match cfg.reduction_train {
            ReductionMode::RandomSubset => Ok(Reduction::Subset(sample_channel_subset(
                cfg.encoder.c,
                cfg.encoder.c_prime,
                seed::derive(cfg.seed, &[seed::tag::CHANNEL_SUBSET, step as u64]),
            )?)),
            ReductionMode::Pca => {
                if self.pca[i].is_none() {
                    let (m, f) = &self.raw[i];
                    let s = seed::derive(cfg.seed, &[seed::tag::PCA_SUBSAMPLE, self.pairs[i].sample.seed]);
                    self.pca[i] = Some(fit_pca_for_pair(m, f, cfg.encoder.c_prime, PCA_MAX_SAMPLES, s)?);
                }
                Ok(Reduction::Pca(self.pca[i].clone().expect("fitted")))
            }
        }
    }

    /// One optimisation step.
    pub fn step(&mut self) -> Result<StepLog> {
        if self.is_done() {
            return Err(FmirError::InvalidArgument("training already finished".into()));
        }
        let step = self.state.step;
        let i = self.pair_index(step);
        let reducer = self.reducer(i, step)?;
        let cfg = self.state.config.clone();
        let (loss, grad) = pair_loss(&self.state.model, &self.raw[i], &reducer, &self.pairs[i], &cfg, true)?;
        let mut grad = grad.expect("gradient requested");
        let lr = lr_schedule(step, cfg.total_steps, cfg.base_lr, cfg.poly_power)?;
        let grad_norm = clip_global_norm(&mut grad.tensors_mut(), cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(FmirError::NonFinite(format!("gradient norm at step {step} on {}", self.pairs[i].id)));
        }
        let grads = grad.tensors();
        self.state.adam.step(self.state.model.tensors_mut(), &grads, lr);
        self.state.step += 1;
        Ok(StepLog {
            step,
            pair: self.pairs[i].id.clone(),
            ncc: loss.ncc,
            dice: loss.dice,
            smooth: loss.smooth,
            total: loss.total,
            lr,
            grad_norm,
            subset: match reducer {
                Reduction::Subset(s) => Some(s.indices().to_vec()),
                Reduction::Pca(_) => None,
            },
        })
    }

    /// Runs until `total_steps`, passing each log record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&StepLog) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let log = self.step()?;
            sink(&log)?;
        }
        Ok(())
    }
}

/// Per-pair reports plus the split aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub reduction: ReductionMode,
    pub reports: Vec<MetricsReport>,
    pub aggregate: AggregateReport,
}

/// Reducer used at inference for one pair.
pub fn eval_reducer(mode: ReductionMode, raw: &(FeatureVolume, FeatureVolume), pair_seed: u64, cfg: &TrainConfig) -> Result<Reduction> {
    match mode {
        ReductionMode::Pca => {
            let s = seed::derive(cfg.seed, &[seed::tag::PCA_SUBSAMPLE, pair_seed]);
            Ok(Reduction::Pca(fit_pca_for_pair(&raw.0, &raw.1, cfg.encoder.c_prime, PCA_MAX_SAMPLES, s)?))
        }
        ReductionMode::RandomSubset => Ok(Reduction::Subset(sample_channel_subset(
            cfg.encoder.c,
            cfg.encoder.c_prime,
            seed::derive(cfg.seed, &[seed::tag::EVAL_SUBSET, pair_seed]),
        )?)),
    }
}

/// Registers one pair and returns the field and the wall time spent on
/// feature extraction, reduction and the head.
pub fn infer_pair(model: &Model, cfg: &TrainConfig, source: &FeatureSource, mode: ReductionMode, pair: &LoadedPair) -> Result<(DeformationField, f64)> {
    let t0 = Instant::now();
    let raw = source.raw_pair(pair, &cfg.encoder)?;
    let reducer = eval_reducer(mode, &raw, pair.sample.seed, cfg)?;
    let field = model.register_raw(&raw.0, &raw.1, &reducer, cfg)?;
    Ok((field, t0.elapsed().as_secs_f64()))
}

/// Warped moving image and segmentation for a predicted field.
pub fn apply_field(moving: &Volume, moving_seg: &Segmentation, field: &DeformationField) -> Result<(Volume, Segmentation)> {
    Ok((warp_volume(moving, field, Interpolation::Trilinear)?, warp_segmentation(moving_seg, field)?))
}

/// Evaluates a model over pairs with the given feature source and reduction.
pub fn evaluate(model: &Model, cfg: &TrainConfig, pairs: &[LoadedPair], source: &FeatureSource, mode: ReductionMode) -> Result<EvalResult> {
    cfg.validate()?;
    let mut reports = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (field, time_s) = infer_pair(model, cfg, source, mode, p)?;
        let warped_seg = warp_segmentation(&p.sample.moving_seg, &field)?;
        let r = MetricsReport::compute(
            p.id.clone(),
            &warped_seg,
            &p.sample.fixed_seg,
            &p.sample.moving_seg,
            &field,
            Some(&p.sample.gt_field),
            p.sample.fixed.spacing(),
            time_s,
        )?;
        reports.push(r);
    }
    let aggregate = AggregateReport::from_reports(&reports);
    Ok(EvalResult { reduction: mode, reports, aggregate })
}

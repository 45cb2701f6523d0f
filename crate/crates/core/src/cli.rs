//! Command-line front end. Every command that writes files also writes a
//! `run.json` with its full configuration, seeds and input hashes.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::dataset::{write_dataset, Dataset, DatasetSpec, Split};
use crate::encoder::{encode_raw, load_precomputed_features, EncoderConfig, FeatureVolume, ToyEncoder};
use crate::error::{FmirError, Result};
use crate::io::{file_sha256, load_segmentation, load_volume, save_field, save_segmentation, save_volume};
use crate::training::{apply_field, evaluate, eval_reducer, Checkpoint, FeatureSource, ReductionMode, Trainer, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "fmir", version, about = "Deformable 3D registration on frozen 2D slice features")]
struct Cli {
    /// Compute backend hint, recorded in run.json.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    Synth(SynthArgs),
    /// Train the 3D block and registration head.
    Train(TrainArgs),
    /// Register a moving volume to a fixed volume.
    Register(RegisterArgs),
    /// Evaluate a checkpoint on a dataset split.
    Evaluate(EvalArgs),
    /// Write per-channel mid-slice images of a feature volume as a PGM grid.
    ExportChannels(ExportArgs),
    /// Feature file import and export.
    #[command(subcommand)]
    Features(FeaturesCmd),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Dataset spec JSON.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory or manifest.json.
    #[arg(long)]
    data: PathBuf,
    /// Training config JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides total_steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the freshly initialised checkpoint without training.
    #[arg(long)]
    init_only: bool,
}

#[derive(Debug, Args)]
struct RegisterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    /// Optional moving segmentation, warped with nearest neighbour.
    #[arg(long)]
    moving_seg: Option<PathBuf>,
    #[arg(long, default_value = "pca")]
    reduction: ReductionMode,
    /// Overrides the checkpoint seed used by the reducer.
    #[arg(long)]
    seed: Option<u64>,
    /// Toy encoder seed; defaults to the checkpoint's.
    #[arg(long)]
    encoder_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value = "pca")]
    reduction: ReductionMode,
    #[arg(long)]
    seed: Option<u64>,
    /// Toy encoder seed; defaults to the checkpoint's.
    #[arg(long)]
    encoder_seed: Option<u64>,
    /// Directory of precomputed raw features named `<pair>_{moving,fixed}.fmv`.
    #[arg(long, conflicts_with = "encoder_seed")]
    features_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    features: PathBuf,
    /// Slice index along D; defaults to the middle slice.
    #[arg(long)]
    slice: Option<usize>,
    /// Number of leading channels to draw; defaults to all.
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum FeaturesCmd {
    /// Encode a volume with the toy encoder into raw features.
    Export(FeatExportArgs),
    /// Validate an externally produced features file and store it canonically.
    Import(FeatImportArgs),
}

#[derive(Debug, Args)]
struct FeatExportArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long, default_value = "toy")]
    profile: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FeatImportArgs {
    #[arg(long)]
    input: PathBuf,
    /// Expected channel count.
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct RunRecord {
    command: String,
    device: String,
    config: Value,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl RunRecord {
    fn new(command: &str, device: &str) -> Self {
        RunRecord {
            command: command.into(),
            device: device.into(),
            config: Value::Null,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("run.json"), self)
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    std::fs::write(path, text).map_err(|e| FmirError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| FmirError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FmirError::Format(format!("{}: {e}", path.display())))
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| FmirError::io(p, e))
}

fn rel(out: &Path, name: &str) -> String {
    out.join(name).display().to_string()
}

fn cmd_synth(a: &SynthArgs, device: &str) -> Result<()> {
    let spec: DatasetSpec = read_json(&a.spec)?;
    mkdir(&a.out)?;
    let m = write_dataset(&spec, a.seed, &a.out)?;
    let mut run = RunRecord::new("synth", device);
    run.config = serde_json::to_value(&spec)?;
    run.seeds.insert("root".into(), a.seed);
    run.input(&a.spec)?;
    run.outputs.push(rel(&a.out, crate::dataset::MANIFEST));
    for e in &m.pairs {
        for f in [&e.fixed, &e.moving, &e.fixed_seg, &e.moving_seg, &e.gt_field] {
            run.outputs.push(rel(&a.out, f));
        }
    }
    run.write(&a.out)?;
    println!("wrote {} pairs to {}", m.pairs.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs, device: &str) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let state = match &a.resume {
        Some(p) => Checkpoint::load(p)?,
        None => {
            let mut cfg: TrainConfig = read_json(&a.config)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(n) = a.steps {
                cfg.total_steps = n;
            }
            cfg.validate()?;
            Checkpoint::fresh(&cfg)?
        }
    };
    mkdir(&a.out)?;
    let cfg = state.config.clone();
    write_json(&a.out.join("config.json"), &cfg)?;
    let mut run = RunRecord::new("train", device);
    run.config = serde_json::to_value(&cfg)?;
    run.seeds.insert("train".into(), cfg.seed);
    if let FeatureSource::Toy { seed } = cfg.features {
        run.seeds.insert("encoder".into(), seed);
    }
    run.input(&a.config)?;
    run.input(&ds.root.join(crate::dataset::MANIFEST))?;
    if let Some(p) = &a.resume {
        run.input(p)?;
    }
    let ckpt_path = a.out.join("checkpoint.ckpt");
    run.outputs.push(ckpt_path.display().to_string());
    if a.init_only {
        state.save(&ckpt_path)?;
        run.write(&a.out)?;
        println!("wrote initial checkpoint {}", ckpt_path.display());
        return Ok(());
    }
    let pairs = ds.load_split(Split::Train)?;
    let mut trainer = Trainer::resume(state, &pairs)?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log = std::fs::File::create(&log_path).map_err(|e| FmirError::io(&log_path, e))?;
    trainer.run(|l| {
        let line = serde_json::to_string(l)?;
        writeln!(log, "{line}").map_err(|e| FmirError::io(&log_path, e))
    })?;
    trainer.state.save(&ckpt_path)?;
    run.outputs.push(log_path.display().to_string());
    run.write(&a.out)?;
    println!("trained {} steps, checkpoint {}", trainer.state.step, ckpt_path.display());
    Ok(())
}

fn checkpoint_with_overrides(path: &Path, seed: Option<u64>, encoder_seed: Option<u64>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::load(path)?;
    if let Some(s) = seed {
        ck.config.seed = s;
    }
    if let Some(s) = encoder_seed {
        ck.config.features = FeatureSource::Toy { seed: s };
    }
    Ok(ck)
}

fn toy_raw(v: &crate::volume::Volume, cfg: &TrainConfig) -> Result<FeatureVolume> {
    match &cfg.features {
        FeatureSource::Toy { seed } => encode_raw(v, &ToyEncoder::new(cfg.encoder.c, *seed), &cfg.encoder),
        FeatureSource::Precomputed { .. } => Err(FmirError::Config(
            "register encodes volumes directly; pass --encoder-seed for a toy encoder".into(),
        )),
    }
}

fn cmd_register(a: &RegisterArgs, device: &str) -> Result<()> {
    let ck = checkpoint_with_overrides(&a.checkpoint, a.seed, a.encoder_seed)?;
    let cfg = &ck.config;
    let moving = load_volume(&a.moving)?;
    let fixed = load_volume(&a.fixed)?;
    if moving.shape() != fixed.shape() {
        return Err(FmirError::ShapeMismatch(format!(
            "{} {:?} vs {} {:?}",
            a.moving.display(),
            moving.shape(),
            a.fixed.display(),
            fixed.shape()
        )));
    }
    let raw = (toy_raw(&moving, cfg)?, toy_raw(&fixed, cfg)?);
    let pair_seed = crate::seed::derive(cfg.seed, &[]);
    let reducer = eval_reducer(a.reduction, &raw, pair_seed, cfg)?;
    let field = ck.model.register_raw(&raw.0, &raw.1, &reducer, cfg)?;
    mkdir(&a.out)?;
    let mut run = RunRecord::new("register", device);
    run.config = json!({ "train_config": cfg, "reduction": a.reduction });
    run.seeds.insert("eval".into(), cfg.seed);
    for p in [&a.checkpoint, &a.moving, &a.fixed] {
        run.input(p)?;
    }
    save_field(a.out.join("field.fmv"), &field, moving.spacing())?;
    run.outputs.push(rel(&a.out, "field.fmv"));
    let seg = match &a.moving_seg {
        Some(p) => {
            run.input(p)?;
            Some(load_segmentation(p)?)
        }
        None => None,
    };
    let dummy;
    let seg_ref = match &seg {
        Some(s) => s,
        None => {
            dummy = crate::volume::Segmentation::new(ndarray::Array3::zeros(moving.shape()))?;
            &dummy
        }
    };
    let (warped, warped_seg) = apply_field(&moving, seg_ref, &field)?;
    save_volume(a.out.join("warped.fmv"), &warped)?;
    run.outputs.push(rel(&a.out, "warped.fmv"));
    if seg.is_some() {
        save_segmentation(a.out.join("warped_seg.fmv"), &warped_seg, moving.spacing())?;
        run.outputs.push(rel(&a.out, "warped_seg.fmv"));
    }
    run.write(&a.out)?;
    println!("max displacement {:.4} voxels", field.max_norm());
    Ok(())
}

fn cmd_evaluate(a: &EvalArgs, device: &str) -> Result<()> {
    let mut ck = checkpoint_with_overrides(&a.checkpoint, a.seed, a.encoder_seed)?;
    if let Some(d) = &a.features_dir {
        ck.config.features = FeatureSource::Precomputed { dir: d.clone() };
    }
    let ds = Dataset::open(&a.data)?;
    let pairs = ds.load_split(a.split)?;
    if pairs.is_empty() {
        return Err(FmirError::InvalidArgument(format!("split {} of {} is empty", a.split, a.data.display())));
    }
    let res = evaluate(&ck.model, &ck.config, &pairs, &ck.config.features, a.reduction)?;
    mkdir(&a.out)?;
    write_json(&a.out.join("metrics.json"), &res)?;
    let csv = a.out.join("metrics.csv");
    std::fs::write(&csv, res.aggregate.to_csv()).map_err(|e| FmirError::io(&csv, e))?;
    let mut run = RunRecord::new("evaluate", device);
    run.config = json!({ "train_config": ck.config, "split": a.split, "reduction": a.reduction });
    run.seeds.insert("eval".into(), ck.config.seed);
    run.input(&a.checkpoint)?;
    run.input(&ds.root.join(crate::dataset::MANIFEST))?;
    run.outputs.push(rel(&a.out, "metrics.json"));
    run.outputs.push(rel(&a.out, "metrics.csv"));
    run.write(&a.out)?;
    let m = &res.aggregate;
    println!(
        "{} pairs: dice {:.2} (initial {:.2}), sdlogj {:.4}",
        m.pairs,
        m.mean("dice_mean").unwrap_or(f64::NAN),
        m.mean("initial_dice_mean").unwrap_or(f64::NAN),
        m.mean("sdlogj").unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Binary PGM (P5) grid of one slice per channel, each min-max scaled to 0..255.
pub fn channel_grid_pgm(fv: &FeatureVolume, slice: usize, channels: usize) -> Result<Vec<u8>> {
    let [h, w, d] = fv.spatial_shape();
    if slice >= d {
        return Err(FmirError::InvalidArgument(format!("slice {slice} out of range 0..{d}")));
    }
    let c = channels.min(fv.channels()).max(1);
    let cols = (c as f64).sqrt().ceil() as usize;
    let rows = c.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) - 1, rows * (h + 1) - 1);
    let mut img = vec![0u8; gw * gh];
    let data = fv.data();
    for ch in 0..c {
        let plane = data.slice(ndarray::s![ch, .., .., slice]);
        let (lo, hi) = plane.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
        let (r0, c0) = ((ch / cols) * (h + 1), (ch % cols) * (w + 1));
        for x in 0..h {
            for y in 0..w {
                img[(r0 + x) * gw + c0 + y] = ((plane[[x, y]] - lo) * scale).round() as u8;
            }
        }
    }
    let mut out = format!("P5\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&img);
    Ok(out)
}

fn cmd_export(a: &ExportArgs, device: &str) -> Result<()> {
    let fv = load_precomputed_features(&a.features)?;
    let slice = a.slice.unwrap_or(fv.spatial_shape()[2] / 2);
    let bytes = channel_grid_pgm(&fv, slice, a.channels.unwrap_or(fv.channels()))?;
    std::fs::write(&a.out, bytes).map_err(|e| FmirError::io(&a.out, e))?;
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut run = RunRecord::new("export-channels", device);
    run.config = json!({ "slice": slice, "channels": a.channels });
    run.input(&a.features)?;
    run.outputs.push(a.out.display().to_string());
    run.write(dir)
}

fn parent_dir(p: &Path) -> &Path {
    p.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn cmd_features(cmd: &FeaturesCmd, device: &str) -> Result<()> {
    match cmd {
        FeaturesCmd::Export(a) => {
            let cfg = EncoderConfig::preset(&a.profile)?;
            if a.profile != EncoderConfig::TOY {
                return Err(FmirError::Config(format!(
                    "profile {} has no bundled weights; import its features instead",
                    a.profile
                )));
            }
            let v = load_volume(&a.volume)?;
            let fv = encode_raw(&v, &ToyEncoder::new(cfg.c, a.seed), &cfg)?;
            fv.save(&a.out)?;
            let mut run = RunRecord::new("features export", device);
            run.config = serde_json::to_value(&cfg)?;
            run.seeds.insert("encoder".into(), a.seed);
            run.input(&a.volume)?;
            run.outputs.push(a.out.display().to_string());
            run.write(parent_dir(&a.out))
        }
        FeaturesCmd::Import(a) => {
            let fv = load_precomputed_features(&a.input)?;
            if let Some(c) = a.channels {
                if fv.channels() != c {
                    return Err(FmirError::ChannelMismatch { expected: c, got: fv.channels() });
                }
            }
            fv.save(&a.out)?;
            let mut run = RunRecord::new("features import", device);
            run.config = json!({ "stage": fv.stage().to_string(), "shape": fv.data().shape() });
            run.input(&a.input)?;
            run.outputs.push(a.out.display().to_string());
            run.write(parent_dir(&a.out))
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 on success, 2 for usage errors and 1 for
/// failures such as unreadable or invalid input files.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let d = cli.device.as_str();
    let res = match &cli.command {
        Command::Synth(a) => cmd_synth(a, d),
        Command::Train(a) => cmd_train(a, d),
        Command::Register(a) => cmd_register(a, d),
        Command::Evaluate(a) => cmd_evaluate(a, d),
        Command::ExportChannels(a) => cmd_export(a, d),
        Command::Features(c) => cmd_features(c, d),
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

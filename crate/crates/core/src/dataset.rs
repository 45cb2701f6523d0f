//! Synthetic datasets: generation from a spec and root seed, and the on-disk
//! layout of one directory per pair plus `manifest.json`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FmirError, Result};
use crate::io::{load_field, load_segmentation, load_volume, save_field, save_segmentation, save_volume};
use crate::seed;
use crate::synth::{make_pair, Family, PairSample, PhantomSpec};
use crate::volume::Shape3;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = FmirError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(FmirError::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Dataset recipe. With more than one family, pair `i` uses
/// `families[i % families.len()]`, which interleaves them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub shape: Shape3,
    pub families: Vec<Family>,
    pub labels: usize,
    pub noise_sigma: f32,
    pub spacing_mm: [f32; 3],
    pub max_magnitude: f32,
    pub smooth_sigma: f32,
    pub split: SplitSizes,
}

impl DatasetSpec {
    pub fn default_for(family: Family) -> Self {
        let p = PhantomSpec::default();
        DatasetSpec {
            shape: p.shape,
            families: vec![family],
            labels: p.labels,
            noise_sigma: p.noise_sigma,
            spacing_mm: p.spacing_mm,
            max_magnitude: 6.0,
            smooth_sigma: 8.0,
            split: SplitSizes { train: 30, val: 0, test: 10 },
        }
    }

    pub fn hybrid() -> Self {
        DatasetSpec { families: vec![Family::CardiacLike, Family::AbdomenLike], ..Self::default_for(Family::CardiacLike) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(FmirError::Config("dataset spec lists no families".into()));
        }
        if self.split.train + self.split.val + self.split.test == 0 {
            return Err(FmirError::Config("dataset spec has no pairs".into()));
        }
        self.phantom(0).validate()
    }

    pub fn len(&self) -> usize {
        self.split.train + self.split.val + self.split.test
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn family_of(&self, index: usize) -> Family {
        self.families[index % self.families.len()]
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.split.train {
            Split::Train
        } else if index < self.split.train + self.split.val {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn phantom(&self, index: usize) -> PhantomSpec {
        PhantomSpec {
            shape: self.shape,
            family: self.family_of(index),
            labels: self.labels,
            noise_sigma: self.noise_sigma,
            spacing_mm: self.spacing_mm,
        }
    }
}

pub fn pair_seed(root_seed: u64, index: usize) -> u64 {
    seed::derive(root_seed, &[seed::tag::PAIR, index as u64])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub split: Split,
    pub family: Family,
    pub seed: u64,
    pub fixed: String,
    pub moving: String,
    pub fixed_seg: String,
    pub moving_seg: String,
    pub gt_field: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub root_seed: u64,
    pub spec: DatasetSpec,
    pub pairs: Vec<PairEntry>,
}

/// A pair held in memory together with its manifest identity.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub id: String,
    pub family: Family,
    pub sample: PairSample,
}

fn entry(spec: &DatasetSpec, root_seed: u64, i: usize) -> PairEntry {
    let id = format!("pair_{i:03}");
    let file = |n: &str| format!("{id}/{n}.fmv");
    PairEntry {
        split: spec.split_of(i),
        family: spec.family_of(i),
        seed: pair_seed(root_seed, i),
        fixed: file("fixed"),
        moving: file("moving"),
        fixed_seg: file("fixed_seg"),
        moving_seg: file("moving_seg"),
        gt_field: file("gt_field"),
        id,
    }
}

/// Generates every pair of the spec in memory, in manifest order.
pub fn generate(spec: &DatasetSpec, root_seed: u64) -> Result<(Manifest, Vec<LoadedPair>)> {
    spec.validate()?;
    let mut entries = Vec::with_capacity(spec.len());
    let mut pairs = Vec::with_capacity(spec.len());
    for i in 0..spec.len() {
        let e = entry(spec, root_seed, i);
        let sample = make_pair(&spec.phantom(i), spec.max_magnitude, spec.smooth_sigma, e.seed)?;
        pairs.push(LoadedPair { id: e.id.clone(), family: e.family, sample });
        entries.push(e);
    }
    Ok((Manifest { version: 1, root_seed, spec: spec.clone(), pairs: entries }, pairs))
}

/// Generates the dataset and writes it under `out`.
pub fn write_dataset(spec: &DatasetSpec, root_seed: u64, out: &Path) -> Result<Manifest> {
    let (manifest, pairs) = generate(spec, root_seed)?;
    for (e, p) in manifest.pairs.iter().zip(&pairs) {
        let dir = out.join(&e.id);
        std::fs::create_dir_all(&dir).map_err(|err| FmirError::io(&dir, err))?;
        let sp = spec.spacing_mm;
        save_volume(out.join(&e.fixed), &p.sample.fixed)?;
        save_volume(out.join(&e.moving), &p.sample.moving)?;
        save_segmentation(out.join(&e.fixed_seg), &p.sample.fixed_seg, sp)?;
        save_segmentation(out.join(&e.moving_seg), &p.sample.moving_seg, sp)?;
        save_field(out.join(&e.gt_field), &p.sample.gt_field, sp)?;
    }
    let path = out.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|err| FmirError::io(&path, err))?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    /// Opens a dataset directory, or a manifest file directly.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (root, mpath) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST))
        } else {
            (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
        };
        let text = std::fs::read_to_string(&mpath).map_err(|e| FmirError::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| FmirError::Format(format!("{}: {e}", mpath.display())))?;
        manifest.spec.validate()?;
        Ok(Dataset { root, manifest })
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &PairEntry> {
        self.manifest.pairs.iter().filter(move |e| e.split == split)
    }

    pub fn load_pair(&self, e: &PairEntry) -> Result<LoadedPair> {
        let p = |f: &str| self.root.join(f);
        let sample = PairSample {
            fixed: load_volume(p(&e.fixed))?,
            moving: load_volume(p(&e.moving))?,
            fixed_seg: load_segmentation(p(&e.fixed_seg))?,
            moving_seg: load_segmentation(p(&e.moving_seg))?,
            gt_field: load_field(p(&e.gt_field))?,
            seed: e.seed,
        };
        if sample.fixed.shape() != self.manifest.spec.shape {
            return Err(FmirError::ShapeMismatch(format!(
                "{}: shape {:?} differs from manifest {:?}",
                e.fixed,
                sample.fixed.shape(),
                self.manifest.spec.shape
            )));
        }
        Ok(LoadedPair { id: e.id.clone(), family: e.family, sample })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<LoadedPair>> {
        self.entries(split).map(|e| self.load_pair(e)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetSpec {
        DatasetSpec {
            shape: [24, 24, 8],
            split: SplitSizes { train: 2, val: 1, test: 1 },
            ..DatasetSpec::hybrid()
        }
    }

    #[test]
    fn splits_and_families_interleave() {
        let (m, pairs) = generate(&tiny(), 7).unwrap();
        let splits: Vec<Split> = m.pairs.iter().map(|e| e.split).collect();
        assert_eq!(splits, [Split::Train, Split::Train, Split::Val, Split::Test]);
        let fams: Vec<Family> = pairs.iter().map(|p| p.family).collect();
        assert_eq!(fams, [Family::CardiacLike, Family::AbdomenLike, Family::CardiacLike, Family::AbdomenLike]);
        let seeds: std::collections::HashSet<u64> = m.pairs.iter().map(|e| e.seed).collect();
        assert_eq!(seeds.len(), 4);
    }

    #[test]
    fn disk_round_trip_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = write_dataset(&tiny(), 7, a.path()).unwrap();
        write_dataset(&tiny(), 7, b.path()).unwrap();
        for e in &m.pairs {
            for f in [&e.fixed, &e.moving, &e.fixed_seg, &e.moving_seg, &e.gt_field] {
                assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
            }
        }
        assert_eq!(std::fs::read(a.path().join(MANIFEST)).unwrap(), std::fs::read(b.path().join(MANIFEST)).unwrap());
        let ds = Dataset::open(a.path()).unwrap();
        assert_eq!(ds.manifest, m);
        let (_, mem) = generate(&tiny(), 7).unwrap();
        let loaded = ds.load_split(Split::Test).unwrap();
        assert_eq!(loaded[0].sample, mem[3].sample);
    }
}

//! The `.fmv` container: 8-byte magic `FMIRVOL1`, a little-endian u32 header
//! length, a UTF-8 JSON header, then a raw little-endian payload in
//! C-contiguous (channels, H, W, D) order.

use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FmirError, Result};
use crate::volume::{DeformationField, Segmentation, Shape3, Volume};

pub const MAGIC: &[u8; 8] = b"FMIRVOL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Volume,
    Field,
    Seg,
    Features,
    Pca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    I32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: Kind,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub spacing_mm: Vec<f32>,
    /// Kind-specific keys (feature stage, label set, PCA variances, ...).
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Header {
    pub fn new(kind: Kind, shape: Vec<usize>, dtype: Dtype, spacing_mm: [f32; 3]) -> Self {
        Header { kind, shape, dtype, spacing_mm: spacing_mm.to_vec(), extra: Default::default() }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn spacing3(&self) -> Result<[f32; 3]> {
        <[f32; 3]>::try_from(self.spacing_mm.as_slice())
            .map_err(|_| FmirError::Format(format!("spacing_mm needs 3 entries, got {:?}", self.spacing_mm)))
    }

    pub fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.kind != kind {
            return Err(FmirError::Format(format!("expected kind {kind:?}, found {:?}", self.kind)));
        }
        Ok(())
    }

    /// Interprets the shape as (C, H, W, D); a 3-entry shape means C = 1.
    pub fn shape4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[h, w, d] => Ok([1, h, w, d]),
            &[c, h, w, d] => Ok([c, h, w, d]),
            other => Err(FmirError::Format(format!("shape must have 3 or 4 entries, got {other:?}"))),
        }
    }
}

/// A decoded container: header plus raw payload bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl Container {
    pub fn from_f32(header: Header, data: &[f32]) -> Self {
        let payload = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        Container { header, payload }
    }

    pub fn from_i32(header: Header, data: &[i32]) -> Self {
        let payload = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        Container { header, payload }
    }

    pub fn f32_data(&self) -> Result<Vec<f32>> {
        if self.header.dtype != Dtype::F32 {
            return Err(FmirError::Format("expected dtype f32".into()));
        }
        Ok(self
            .payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    pub fn i32_data(&self) -> Result<Vec<i32>> {
        if self.header.dtype != Dtype::I32 {
            return Err(FmirError::Format("expected dtype i32".into()));
        }
        Ok(self
            .payload
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.header)?;
        let len = u32::try_from(json.len()).map_err(|_| FmirError::Format("header too large".into()))?;
        let mut out = Vec::with_capacity(12 + json.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(FmirError::Format("bad magic: not an FMIRVOL1 file".into()));
        }
        let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let body = &bytes[12..];
        if body.len() < len {
            return Err(FmirError::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..len])?;
        let expected = header
            .shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FmirError::Format("shape overflows".into()))?;
        let payload = &body[len..];
        if payload.len() != expected {
            return Err(FmirError::SizeMismatch { expected, found: payload.len() });
        }
        Ok(Container { header, payload: payload.to_vec() })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| FmirError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| FmirError::io(path, e))?;
        Container::from_bytes(&bytes).map_err(|e| match e {
            FmirError::Format(m) => FmirError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn shape3(s: [usize; 4]) -> Shape3 {
    [s[1], s[2], s[3]]
}

pub fn volume_container(v: &Volume) -> Container {
    let s = v.shape();
    Container::from_f32(Header::new(Kind::Volume, vec![1, s[0], s[1], s[2]], Dtype::F32, v.spacing()), v.as_slice())
}

pub fn volume_from_container(c: &Container) -> Result<Volume> {
    c.header.expect_kind(Kind::Volume)?;
    let s = c.header.shape4()?;
    if s[0] != 1 {
        return Err(FmirError::Format(format!("volume must have 1 channel, got {}", s[0])));
    }
    Volume::from_flat(shape3(s), c.f32_data()?, c.header.spacing3()?)
}

pub fn field_container(f: &DeformationField, spacing: [f32; 3]) -> Container {
    let s = f.shape();
    Container::from_f32(Header::new(Kind::Field, vec![3, s[0], s[1], s[2]], Dtype::F32, spacing), f.as_slice())
}

pub fn field_from_container(c: &Container) -> Result<DeformationField> {
    c.header.expect_kind(Kind::Field)?;
    let s = c.header.shape4()?;
    if s[0] != 3 {
        return Err(FmirError::Format(format!("field must have 3 channels, got {}", s[0])));
    }
    DeformationField::from_flat(shape3(s), c.f32_data()?)
}

pub fn seg_container(s: &Segmentation, spacing: [f32; 3]) -> Container {
    let d = s.shape();
    let mut h = Header::new(Kind::Seg, vec![1, d[0], d[1], d[2]], Dtype::I32, spacing);
    h.extra.insert("label_set".into(), serde_json::json!(s.label_set()));
    Container::from_i32(h, s.as_slice())
}

pub fn seg_from_container(c: &Container) -> Result<Segmentation> {
    c.header.expect_kind(Kind::Seg)?;
    let s = c.header.shape4()?;
    let labels = Array3::from_shape_vec(shape3(s), c.i32_data()?)
        .map_err(|e| FmirError::Format(e.to_string()))?;
    match c.header.extra.get("label_set") {
        Some(v) => {
            let set: Vec<i32> = serde_json::from_value(v.clone())?;
            Segmentation::with_label_set(labels, set)
        }
        None => Segmentation::new(labels),
    }
}

pub fn save_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    volume_container(v).write(path)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    volume_from_container(&Container::read(path)?)
}

pub fn save_field(path: impl AsRef<Path>, f: &DeformationField, spacing: [f32; 3]) -> Result<()> {
    field_container(f, spacing).write(path)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DeformationField> {
    field_from_container(&Container::read(path)?)
}

pub fn save_segmentation(path: impl AsRef<Path>, s: &Segmentation, spacing: [f32; 3]) -> Result<()> {
    seg_container(s, spacing).write(path)
}

pub fn load_segmentation(path: impl AsRef<Path>) -> Result<Segmentation> {
    seg_from_container(&Container::read(path)?)
}

pub(crate) fn array4_from(shape: [usize; 4], data: Vec<f32>) -> Result<Array4<f32>> {
    Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), data)
        .map_err(|e| FmirError::Format(e.to_string()))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FmirError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

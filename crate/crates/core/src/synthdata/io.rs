//! Volume files: a JSON sidecar header next to a raw little-endian payload.
//!
//! `case003_image.json` describes `case003_image.raw`. Axis order is always `dhw`
//! (depth-major).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::fsutil::write_atomic;
use crate::voxelgeom::{BinaryMask, Grid, SignedDistanceMap, Volume, VolumeShape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Uint8,
    Float32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::Uint8 => 1,
            Dtype::Float32 => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Mask,
    Sdm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub id: String,
    pub shape: [usize; 3],
    pub dtype: Dtype,
    pub order: String,
    pub kind: VolumeKind,
}

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    Image(Volume),
    Mask(BinaryMask),
    Sdm(SignedDistanceMap),
}

impl VolumeData {
    pub fn kind(&self) -> VolumeKind {
        match self {
            VolumeData::Image(_) => VolumeKind::Image,
            VolumeData::Mask(_) => VolumeKind::Mask,
            VolumeData::Sdm(_) => VolumeKind::Sdm,
        }
    }

    pub fn shape(&self) -> VolumeShape {
        match self {
            VolumeData::Image(v) => v.shape(),
            VolumeData::Mask(m) => m.shape(),
            VolumeData::Sdm(s) => s.shape,
        }
    }

    pub fn into_image(self) -> Result<Volume, SynthError> {
        match self {
            VolumeData::Image(v) => Ok(v),
            other => Err(SynthError::KindMismatch {
                expected: VolumeKind::Image,
                found: other.kind(),
            }),
        }
    }

    pub fn into_mask(self) -> Result<BinaryMask, SynthError> {
        match self {
            VolumeData::Mask(m) => Ok(m),
            other => Err(SynthError::KindMismatch {
                expected: VolumeKind::Mask,
                found: other.kind(),
            }),
        }
    }

    pub fn into_sdm(self) -> Result<SignedDistanceMap, SynthError> {
        match self {
            VolumeData::Sdm(s) => Ok(s),
            other => Err(SynthError::KindMismatch {
                expected: VolumeKind::Sdm,
                found: other.kind(),
            }),
        }
    }
}

/// Payload path for a header path: same stem, `.raw` extension.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `<path>` (JSON header) and its `.raw` payload, each atomically.
pub fn save_volume(path: &Path, id: &str, data: &VolumeData) -> Result<(), SynthError> {
    let (dtype, bytes) = match data {
        VolumeData::Image(v) => (Dtype::Float32, f32_bytes(v.as_slice().iter().copied())),
        VolumeData::Mask(m) => (Dtype::Uint8, m.as_slice().to_vec()),
        VolumeData::Sdm(s) => (Dtype::Float32, f32_bytes(s.values.iter().map(|&v| v as f32))),
    };
    let header = VolumeHeader {
        id: id.to_string(),
        shape: data.shape().dims(),
        dtype,
        order: "dhw".into(),
        kind: data.kind(),
    };
    let raw = payload_path(path);
    write_atomic(&raw, &bytes).map_err(io_err(&raw))?;
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");
    write_atomic(path, &json).map_err(io_err(path))?;
    Ok(())
}

fn f32_bytes(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(f32::to_le_bytes).collect()
}

pub fn read_header(path: &Path) -> Result<VolumeHeader, SynthError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| SynthError::Header {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if let Some(dtype) = value.get("dtype").and_then(|d| d.as_str()) {
        if !matches!(dtype, "uint8" | "float32") {
            return Err(SynthError::UnknownDtype(dtype.to_string()));
        }
    }
    let header: VolumeHeader = serde_json::from_value(value).map_err(|e| SynthError::Header {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if header.order != "dhw" {
        return Err(SynthError::Header {
            path: path.to_path_buf(),
            message: format!("unsupported axis order {:?}", header.order),
        });
    }
    let [d, h, w] = header.shape;
    VolumeShape::new(d, h, w).map_err(|_| SynthError::InvalidShape(header.shape))?;
    let expected = match header.kind {
        VolumeKind::Mask => Dtype::Uint8,
        VolumeKind::Image | VolumeKind::Sdm => Dtype::Float32,
    };
    if header.dtype != expected {
        return Err(SynthError::Header {
            path: path.to_path_buf(),
            message: format!("{:?} volumes are stored as {:?}", header.kind, expected),
        });
    }
    Ok(header)
}

pub fn load_volume(path: &Path) -> Result<(VolumeHeader, VolumeData), SynthError> {
    let header = read_header(path)?;
    let [d, h, w] = header.shape;
    let shape = VolumeShape::new(d, h, w).map_err(|_| SynthError::InvalidShape(header.shape))?;
    let raw = payload_path(path);
    let bytes = fs::read(&raw).map_err(io_err(&raw))?;
    let expected = shape.len() * header.dtype.size();
    if bytes.len() != expected {
        return Err(SynthError::SizeMismatch {
            path: raw,
            expected,
            got: bytes.len(),
        });
    }
    let floats = || {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
    };
    let data = match header.kind {
        VolumeKind::Image => VolumeData::Image(Grid::from_vec(shape, floats().collect()).expect("length checked")),
        VolumeKind::Mask => VolumeData::Mask(BinaryMask::from_vec(shape, bytes.clone()).map_err(|e| {
            SynthError::Header {
                path: raw.clone(),
                message: e.to_string(),
            }
        })?),
        VolumeKind::Sdm => {
            let values: Vec<f64> = floats().map(f64::from).collect();
            let normalized = values.iter().all(|v| (-1.0..=1.0).contains(v));
            let degenerate = values.iter().all(|&v| v == 1.0) || values.iter().all(|&v| v == -1.0);
            VolumeData::Sdm(SignedDistanceMap {
                shape,
                values,
                normalized,
                degenerate,
            })
        }
    };
    Ok((header, data))
}

//! Per-frame visual feature matrices and the `VSFT` file format.
//!
//! Layout (little-endian): magic `VSFT`, version `u16`, frames `u32`,
//! dim `u32`, kind `u8`, then `frames · dim` `f32` values, row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VSFT";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Appearance,
    Flow,
    AppearanceFlow,
}

impl FeatureKind {
    fn to_byte(self) -> u8 {
        match self {
            FeatureKind::Appearance => 0,
            FeatureKind::Flow => 1,
            FeatureKind::AppearanceFlow => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(FeatureKind::Appearance),
            1 => Ok(FeatureKind::Flow),
            2 => Ok(FeatureKind::AppearanceFlow),
            other => Err(Error::Format(format!("feature kind byte {other} is not 0, 1 or 2"))),
        }
    }
}

/// `frames × dim` matrix of finite reals, one row per video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    kind: FeatureKind,
    frames: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureTrack {
    pub fn new(kind: FeatureKind, frames: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Contract(format!("feature track must be non-empty, got {frames}x{dim}")));
        }
        if values.len() != frames * dim {
            return Err(Error::Dimension(format!("{} values for a {frames}x{dim} feature track", values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("feature value at row {} column {} is not finite", i / dim, i % dim)));
        }
        Ok(FeatureTrack { kind, frames, dim, values })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.dim..(frame + 1) * self.dim]
    }

    /// Joins appearance and flow tracks column-wise, row by row.
    pub fn concat(appearance: &FeatureTrack, flow: &FeatureTrack) -> Result<FeatureTrack> {
        if appearance.frames != flow.frames {
            return Err(Error::Dimension(format!(
                "appearance has {} frames but flow has {}",
                appearance.frames, flow.frames
            )));
        }
        let dim = appearance.dim + flow.dim;
        let mut values = Vec::with_capacity(appearance.frames * dim);
        for f in 0..appearance.frames {
            values.extend_from_slice(appearance.row(f));
            values.extend_from_slice(flow.row(f));
        }
        FeatureTrack::new(FeatureKind::AppearanceFlow, appearance.frames, dim, values)
    }

    /// Repeats rows end to end and truncates to `target` frames, mirroring
    /// the audio padding rule.
    pub fn pad_rows(&self, target: usize) -> Result<FeatureTrack> {
        if target == 0 {
            return Err(Error::Contract("feature padding target must be at least 1".into()));
        }
        let mut values = Vec::with_capacity(target * self.dim);
        for f in 0..target {
            values.extend_from_slice(self.row(f % self.frames));
        }
        Ok(FeatureTrack { kind: self.kind, frames: target, dim: self.dim, values })
    }

    /// Replaces one row, used by perturbation tests and tooling.
    pub fn with_row(&self, frame: usize, row: &[f64]) -> Result<FeatureTrack> {
        if frame >= self.frames || row.len() != self.dim {
            return Err(Error::Index(format!("row {frame} of length {} in a {}x{} track", row.len(), self.frames, self.dim)));
        }
        let mut values = self.values.clone();
        values[frame * self.dim..(frame + 1) * self.dim].copy_from_slice(row);
        FeatureTrack::new(self.kind, self.frames, self.dim, values)
    }
}

pub fn encode_features(track: &FeatureTrack) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + track.values.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(track.frames as u32).to_le_bytes());
    out.extend_from_slice(&(track.dim as u32).to_le_bytes());
    out.push(track.kind.to_byte());
    for &v in &track.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureTrack> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("feature header truncated: {} of {HEADER_LEN} bytes", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("feature magic mismatch: expected VSFT".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("feature version {version} is not supported (expected {VERSION})")));
    }
    let frames = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    let kind = FeatureKind::from_byte(bytes[14])?;
    if frames == 0 || dim == 0 {
        return Err(Error::Data(format!("feature file declares an empty {frames}x{dim} track")));
    }
    let expected = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("feature size {frames}x{dim} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::Format(format!("feature payload truncated: {} of {expected} bytes", payload.len())));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!("feature payload has {} trailing bytes", payload.len() - expected)));
    }
    let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    FeatureTrack::new(kind, frames, dim, values)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureTrack> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

/// Values are stored as `f32`; tracks whose values are `f32`-representable
/// round-trip exactly.
pub fn save_features(path: impl AsRef<Path>, track: &FeatureTrack) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(track)).map_err(|e| Error::io(path, e))
}

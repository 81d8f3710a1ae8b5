//! Model checkpoints.
//!
//! Layout (little-endian): magic `VSCK`, version `u16`, then length-prefixed
//! (`u32`) UTF-8 blocks for the generator config (JSON) and free-form
//! metadata, a `u32` parameter count and per parameter its name (`u16`
//! length + bytes), rank (`u8`), dims (`u32` each) and `f64` values. An
//! optimizer section (`u8` flag; Adam config as four `f64`, step `u64`,
//! first and second moments in parameter order) and a training cursor
//! block (`u8` flag + length-prefixed JSON) follow.

use std::fs;
use std::path::Path;

use super::config::GeneratorConfig;
use super::model::GeneratorModel;
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Tensor};

const MAGIC: &[u8; 4] = b"VSCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: GeneratorModel,
    pub optimizer: Option<AdamState>,
    /// Resolved run configuration, as JSON, for provenance.
    pub metadata: String,
    /// Serialized training position for exact resumption.
    pub cursor: Option<String>,
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &GeneratorModel, optimizer: Option<&AdamState>, metadata: &str, cursor: Option<&str>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_string(model.config()).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    put_block(&mut out, config.as_bytes());
    put_block(&mut out, metadata.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f64s(&mut out, t.data());
    }
    match optimizer {
        Some(adam) => {
            out.push(1);
            let AdamConfig { learning_rate, beta1, beta2, epsilon } = adam.config;
            put_f64s(&mut out, &[learning_rate, beta1, beta2, epsilon]);
            out.extend_from_slice(&adam.step_count().to_le_bytes());
            for m in adam.first_moments().iter().chain(adam.second_moments()) {
                put_f64s(&mut out, m);
            }
        }
        None => out.push(0),
    }
    match cursor {
        Some(c) => {
            out.push(1);
            put_block(&mut out, c.as_bytes());
        }
        None => out.push(0),
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {field} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("{field} length overflows")))?;
        let raw = self.take(len, field)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn text(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)? as usize;
        let raw = self.take(n, field)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint(format!("{field} is not UTF-8")))
    }

    fn flag(&mut self, field: &str) -> Result<bool> {
        match self.u8(field)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Checkpoint(format!("{field} flag is {other}, expected 0 or 1"))),
        }
    }
}

/// Decodes and validates a checkpoint; nothing is returned unless every
/// section is intact.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("magic mismatch: expected VSCK".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("version {version} is not supported (expected {VERSION})")));
    }
    let config_text = r.text("config")?;
    let config: GeneratorConfig =
        serde_json::from_str(&config_text).map_err(|e| Error::Checkpoint(format!("config does not parse: {e}")))?;
    let metadata = r.text("metadata")?;
    let mut model = GeneratorModel::new(config, 0).map_err(|e| Error::Checkpoint(format!("config is invalid: {e}")))?;

    let count = r.u32("parameter count")? as usize;
    if count != model.params().len() {
        return Err(Error::Checkpoint(format!("parameter count {count}, config implies {}", model.params().len())));
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u16("parameter name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "parameter name")?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("parameter {i} name is not UTF-8")))?;
        let rank = r.u8("parameter rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("parameter shape").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r.f64s(n, &format!("parameter {name} values"))?;
        let tensor = Tensor::new(shape.clone(), data).map_err(|_| Error::Checkpoint(format!("parameter {name} has invalid shape {shape:?}")))?;
        values.push((name, tensor));
    }
    model.load_values(values)?;

    let optimizer = if r.flag("optimizer")? {
        let c = r.f64s(4, "optimizer config")?;
        let config = AdamConfig { learning_rate: c[0], beta1: c[1], beta2: c[2], epsilon: c[3] };
        let step = r.u64("optimizer step")?;
        let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.len()).collect();
        let mut first = Vec::with_capacity(sizes.len());
        for &n in &sizes {
            first.push(r.f64s(n, "optimizer first moments")?);
        }
        let mut second = Vec::with_capacity(sizes.len());
        for &n in &sizes {
            second.push(r.f64s(n, "optimizer second moments")?);
        }
        Some(AdamState::from_parts(config, step, first, second, model.params())?)
    } else {
        None
    };
    let cursor = if r.flag("cursor")? { Some(r.text("cursor")?) } else { None };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the cursor section", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { model, optimizer, metadata, cursor })
}

/// Writes through a temporary file and renames, so a failed save never
/// leaves a partial checkpoint at `path`.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &GeneratorModel, optimizer: Option<&AdamState>, metadata: &str, cursor: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, optimizer, metadata, cursor)?;
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

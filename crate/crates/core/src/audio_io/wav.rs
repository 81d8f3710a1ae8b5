//! 16-bit linear PCM RIFF/WAVE files.
//!
//! The writer always emits the canonical 44-byte header (RIFF, 16-byte
//! `fmt `, `data`), mono, little-endian. The reader accepts mono or stereo
//! and skips unknown chunks between `fmt ` and `data`.

use std::fs;
use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

const PCM_FORMAT: u16 = 1;
const FULL_SCALE: f64 = 32767.0;

/// Raw interleaved 16-bit samples as stored in a file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pcm16 {
    pub sample_rate: u32,
    pub channels: u16,
    pub samples: Vec<i16>,
}

fn format_err(field: &str, detail: impl std::fmt::Display) -> Error {
    Error::Format(format!("wav {field}: {detail}"))
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode_pcm16(bytes: &[u8]) -> Result<Pcm16> {
    if bytes.len() < 12 {
        return Err(format_err("header", format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(format_err("riff id", "missing RIFF magic"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(format_err("wave id", "missing WAVE form type"));
    }

    let mut pos = 12;
    let mut fmt: Option<(u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if size < 16 || body + size > bytes.len() {
                return Err(format_err("fmt chunk size", size));
            }
            let audio_format = u16_at(bytes, body);
            let channels = u16_at(bytes, body + 2);
            let sample_rate = u32_at(bytes, body + 4);
            let block_align = u16_at(bytes, body + 12);
            let bits = u16_at(bytes, body + 14);
            if audio_format != PCM_FORMAT {
                return Err(format_err("audio_format", format!("{audio_format} is not linear PCM (1)")));
            }
            if bits != 16 {
                return Err(format_err("bits_per_sample", format!("{bits} (only 16 is supported)")));
            }
            if !(1..=2).contains(&channels) {
                return Err(format_err("channels", format!("{channels} (mono or stereo only)")));
            }
            if sample_rate == 0 {
                return Err(format_err("sample_rate", 0));
            }
            if block_align != channels * 2 {
                return Err(format_err("block_align", block_align));
            }
            fmt = Some((channels, sample_rate, block_align));
        } else if id == b"data" {
            let (channels, sample_rate, block_align) = fmt.ok_or_else(|| format_err("fmt chunk", "data chunk precedes fmt"))?;
            if body + size > bytes.len() {
                return Err(format_err("data chunk size", format!("{size} bytes declared, {} present", bytes.len() - body)));
            }
            if size % block_align as usize != 0 {
                return Err(format_err("data chunk size", format!("{size} is not a whole number of frames")));
            }
            let samples = bytes[body..body + size].chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
            return Ok(Pcm16 { sample_rate, channels, samples });
        }
        pos = body + size + (size & 1);
    }
    Err(format_err("data chunk", "not found"))
}

pub fn read_pcm16(path: impl AsRef<Path>) -> Result<Pcm16> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pcm16(&bytes)
}

/// Canonical 44-byte-header encoding of mono or interleaved samples.
pub fn encode_pcm16(pcm: &Pcm16) -> Vec<u8> {
    let data_len = (pcm.samples.len() * 2) as u32;
    let block_align = pcm.channels * 2;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    out.extend_from_slice(&pcm.channels.to_le_bytes());
    out.extend_from_slice(&pcm.sample_rate.to_le_bytes());
    out.extend_from_slice(&(pcm.sample_rate * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in &pcm.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn write_pcm16(path: impl AsRef<Path>, pcm: &Pcm16) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pcm16(pcm)).map_err(|e| Error::io(path, e))
}

/// Reads a PCM file as reals `v / 32767`, averaging stereo to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    from_pcm16(&read_pcm16(path)?)
}

pub fn from_pcm16(pcm: &Pcm16) -> Result<Waveform> {
    let samples = match pcm.channels {
        1 => pcm.samples.iter().map(|&s| s as f64 / FULL_SCALE).collect(),
        _ => pcm
            .samples
            .chunks_exact(2)
            .map(|lr| (lr[0] as f64 + lr[1] as f64) / (2.0 * FULL_SCALE))
            .collect(),
    };
    Waveform::new(samples, pcm.sample_rate).map_err(|e| match e {
        Error::Contract(_) => format_err("data chunk", "no samples"),
        other => other,
    })
}

pub fn to_pcm16(w: &Waveform) -> Pcm16 {
    let samples = w.samples().iter().map(|&x| (x.clamp(-1.0, 1.0) * FULL_SCALE).round() as i16).collect();
    Pcm16 { sample_rate: w.sample_rate(), channels: 1, samples }
}

/// Writes a mono file with `round(x · 32767)` samples.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    write_pcm16(path, &to_pcm16(w))
}

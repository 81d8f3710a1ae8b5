//! Frame/sample alignment, feature files, manifests, clip loading and the
//! synthetic corpus.

mod features;
mod manifest;
mod synth;

pub use features::{decode_features, encode_features, load_features, save_features, FeatureKind, FeatureTrack};
pub use manifest::{ClipRecord, Manifest, Split, COLUMNS};
pub use synth::{synth_clip, Envelope, Phase, SynthClip, SynthConfig};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio_io::{self, pad_to_length, quantize, QuantizedClip, Waveform};
use crate::error::{Error, Result};

/// Ratios this close to an integer count as exact, so that a nominal
/// 15974.4 Hz / 15.6 fps gives 1024 despite floating-point division.
const INTEGER_RATIO_TOLERANCE: f64 = 1e-9;

/// `⌈sr_audio / sr_video⌉`: audio samples per video frame.
pub fn step_size(sr_audio: f64, sr_video: f64) -> Result<usize> {
    if !(sr_audio > 0.0 && sr_video > 0.0) || !sr_audio.is_finite() || !sr_video.is_finite() {
        return Err(Error::Contract(format!("rates must be positive, got audio {sr_audio} and video {sr_video}")));
    }
    let ratio = sr_audio / sr_video;
    let nearest = ratio.round();
    let s = if (ratio - nearest).abs() <= INTEGER_RATIO_TOLERANCE * ratio { nearest } else { ratio.ceil() };
    Ok(s.max(1.0) as usize)
}

/// The video frame that sample `t` is aligned with.
pub fn frame_index_for_sample(t: usize, step: usize) -> usize {
    t / step
}

/// Fixed clip grid: every loaded clip is padded to `clip_frames` frames of
/// `step` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    /// Rate written in (and required of) WAV headers.
    pub sample_rate: u32,
    pub step: usize,
    pub clip_frames: usize,
}

impl Grid {
    /// 4 kHz audio, 12.5 fps video, 2-second clips.
    pub fn desk() -> Self {
        Grid { sample_rate: 4000, step: 320, clip_frames: 25 }
    }

    /// 16 kHz files at an effective 15974.4 Hz, 15.6 fps, 10-second clips.
    pub fn full() -> Self {
        Grid { sample_rate: 16000, step: 1024, clip_frames: 156 }
    }

    pub fn clip_samples(&self) -> usize {
        self.step * self.clip_frames
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.step == 0 || self.clip_frames == 0 {
            return Err(Error::Config(format!("grid fields must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// One clip ready for the model: padded codes and aligned features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipData {
    pub id: String,
    pub category: usize,
    pub split: Split,
    pub audio: QuantizedClip,
    pub appearance: FeatureTrack,
    pub flow: Option<FeatureTrack>,
}

impl ClipData {
    /// Appearance and flow joined column-wise.
    pub fn appearance_flow(&self) -> Result<FeatureTrack> {
        let flow = self
            .flow
            .as_ref()
            .ok_or_else(|| Error::Config(format!("clip {} has no flow features", self.id)))?;
        FeatureTrack::concat(&self.appearance, flow)
    }

    /// Checks `frames · step = samples`.
    pub fn check_alignment(&self, grid: &Grid) -> Result<()> {
        let frames = self.appearance.frames();
        let flow_ok = self.flow.as_ref().map_or(true, |f| f.frames() == frames);
        if frames * grid.step != self.audio.len() || !flow_ok {
            return Err(Error::Data(format!(
                "clip {}: {frames} frames × step {} ≠ {} samples",
                self.id,
                grid.step,
                self.audio.len()
            )));
        }
        Ok(())
    }
}

/// Reads, quantizes and pads one manifest record onto `grid`.
pub fn load_clip(manifest: &Manifest, record: &ClipRecord, grid: &Grid) -> Result<ClipData> {
    let missing = |what: &str| Error::Data(format!("clip {}: no {what} file", record.id));
    let audio_path = manifest.resolve(record.audio.as_ref().ok_or_else(|| missing("audio"))?);
    let wave = audio_io::read_wav(&audio_path)?;
    if wave.sample_rate() != grid.sample_rate {
        return Err(Error::Data(format!(
            "clip {}: {} is {} Hz but the grid expects {} Hz",
            record.id,
            audio_path.display(),
            wave.sample_rate(),
            grid.sample_rate
        )));
    }
    let appearance = load_features(manifest.resolve(record.appearance.as_ref().ok_or_else(|| missing("appearance"))?))?;
    let flow = record.flow.as_ref().map(|p| load_features(manifest.resolve(p))).transpose()?;
    let clip = ClipData {
        id: record.id.clone(),
        category: record.category,
        split: record.split,
        audio: pad_to_length(&quantize(&wave), grid.clip_samples())?,
        appearance: appearance.pad_rows(grid.clip_frames)?,
        flow: flow.map(|f| f.pad_rows(grid.clip_frames)).transpose()?,
    };
    clip.check_alignment(grid)?;
    Ok(clip)
}

pub fn load_split(manifest: &Manifest, split: Split, grid: &Grid) -> Result<Vec<ClipData>> {
    manifest.split(split).map(|r| load_clip(manifest, r, grid)).collect()
}

pub fn category_name(c: usize) -> String {
    format!("tone{c}")
}

fn clip_id(category: usize, index: usize) -> String {
    format!("{}_{index:03}", category_name(category))
}

fn clip_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64 + 1).wrapping_mul(0x2545_F491_4F6C_DD1D))
}

/// Rounds the way a 16-bit file and an `f32` feature file would, so
/// in-memory clips equal clips read back from disk.
fn as_stored(clip: &SynthClip) -> Result<(Waveform, FeatureTrack, FeatureTrack)> {
    let pcm = audio_io::from_pcm16(&audio_io::to_pcm16(&clip.waveform))?;
    let round32 = |t: &FeatureTrack| FeatureTrack::new(t.kind(), t.frames(), t.dim(), t.values().iter().map(|&v| v as f32 as f64).collect());
    Ok((pcm, round32(&clip.appearance)?, round32(&clip.flow)?))
}

/// The synthetic corpus in memory: `clips_per_category` clips of each
/// category, `test_per_category` of them in the test split.
pub fn synth_corpus(cfg: &SynthConfig, clips_per_category: usize, test_per_category: usize, seed: u64) -> Result<Vec<ClipData>> {
    let manifest = synth_manifest(cfg, clips_per_category, test_per_category, seed, Path::new("."))?;
    let mut out = Vec::with_capacity(manifest.records.len());
    for (r, index) in manifest.records.iter().zip(record_indices(cfg, clips_per_category)) {
        let clip = synth_clip(cfg, r.category, clip_seed(seed, index))?;
        let (wave, appearance, flow) = as_stored(&clip)?;
        out.push(ClipData {
            id: r.id.clone(),
            category: r.category,
            split: r.split,
            audio: pad_to_length(&quantize(&wave), cfg.grid.clip_samples())?,
            appearance,
            flow: Some(flow),
        });
    }
    Ok(out)
}

fn record_indices(cfg: &SynthConfig, clips_per_category: usize) -> impl Iterator<Item = usize> {
    (0..cfg.categories).flat_map(move |_| 0..clips_per_category)
}

fn synth_manifest(cfg: &SynthConfig, clips_per_category: usize, test_per_category: usize, seed: u64, base: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut manifest = Manifest::new((0..cfg.categories).map(category_name).collect(), base);
    let duration_s = cfg.grid.clip_samples() as f64 / cfg.grid.sample_rate as f64;
    for c in 0..cfg.categories {
        for i in 0..clips_per_category {
            let id = clip_id(c, i);
            manifest.records.push(ClipRecord {
                audio: Some(format!("audio/{id}.wav").into()),
                appearance: Some(format!("features/{id}.app.vsft").into()),
                flow: Some(format!("features/{id}.flow.vsft").into()),
                id,
                category: c,
                split: Split::Unassigned,
                duration_s,
            });
        }
    }
    if clips_per_category > 0 {
        manifest.assign_splits(test_per_category, seed)?;
    }
    Ok(manifest)
}

/// Writes WAVs, feature files and `manifest.tsv` under `out_dir`.
pub fn write_synth_corpus(out_dir: &Path, cfg: &SynthConfig, clips_per_category: usize, test_per_category: usize, seed: u64) -> Result<Manifest> {
    let manifest = synth_manifest(cfg, clips_per_category, test_per_category, seed, out_dir)?;
    for sub in ["audio", "features"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (r, index) in manifest.records.iter().zip(record_indices(cfg, clips_per_category)) {
        let clip = synth_clip(cfg, r.category, clip_seed(seed, index))?;
        let (wave, appearance, flow) = as_stored(&clip)?;
        let resolve = |p: &Option<std::path::PathBuf>| manifest.resolve(p.as_ref().expect("synthetic records have every file"));
        audio_io::write_wav(resolve(&r.audio), &wave)?;
        save_features(resolve(&r.appearance), &appearance)?;
        save_features(resolve(&r.flow), &flow)?;
    }
    manifest.save(out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

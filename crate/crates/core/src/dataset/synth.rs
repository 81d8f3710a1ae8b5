//! Synthetic clips whose sound depends on the visual features: category
//! picks a tone, and an on/off gate per frame is visible in both the audio
//! and the features.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::features::{FeatureKind, FeatureTrack};
use super::Grid;
use crate::audio_io::Waveform;
use crate::error::{Error, Result};

/// How loudness varies from frame to frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "snake_case")]
pub enum Envelope {
    /// Full level in every frame.
    Constant,
    /// A seeded random subset of exactly `round(on_fraction · frames)`
    /// frames sounds at full level; the rest plays at `off_level`.
    Gated { on_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub categories: usize,
    pub grid: Grid,
    /// Appearance feature width; must exceed `categories` to leave room
    /// for the envelope channel.
    pub feature_dim: usize,
    pub flow_dim: usize,
    /// Category `c` sounds at `base_frequency · (c + 1)` Hz.
    pub base_frequency: f64,
    pub amplitude: f64,
    /// Relative amplitude jitter, uniform in `±amplitude_jitter`.
    pub amplitude_jitter: f64,
    /// Audio noise standard deviation, scaled by the frame's envelope.
    pub noise: f64,
    pub feature_noise: f64,
    pub envelope: Envelope,
    /// Gain of gated-off frames; 0 is digital silence. A quiet tone keeps
    /// the pitch audible across off frames.
    pub off_level: f64,
    /// Silent samples at the start of every clip. When non-zero, frame 0
    /// always sounds after them, so each clip's first onset happens at a
    /// fixed time. The desk value equals the desk coarse frame: the onset
    /// is then the first predicted sample.
    pub lead_in_samples: usize,
    pub phase: Phase,
}

/// Where the tone's phase comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// One random phase per clip; the tone runs on underneath the gate.
    Random,
    /// Every run of sounding frames starts at the crest, so onsets look the
    /// same in every clip of a category.
    RunStart,
}

impl SynthConfig {
    pub fn desk() -> Self {
        SynthConfig {
            categories: 4,
            grid: Grid::desk(),
            feature_dim: 16,
            flow_dim: 16,
            base_frequency: 100.0,
            amplitude: 0.6,
            amplitude_jitter: 0.0,
            noise: 0.0,
            feature_noise: 0.05,
            envelope: Envelope::Gated { on_fraction: 0.6 },
            off_level: 0.25,
            lead_in_samples: 8,
            phase: Phase::RunStart,
        }
    }

    pub fn frequency(&self, category: usize) -> f64 {
        self.base_frequency * (category + 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.categories == 0 {
            problems.push("categories must be at least 1".to_string());
        }
        if self.feature_dim <= self.categories {
            problems.push(format!("feature_dim {} must exceed categories {}", self.feature_dim, self.categories));
        }
        if self.flow_dim < 2 {
            problems.push(format!("flow_dim {} must be at least 2", self.flow_dim));
        }
        let nyquist = self.grid.sample_rate as f64 / 2.0;
        if self.categories > 0 && self.frequency(self.categories - 1) >= nyquist {
            problems.push(format!("highest tone {} Hz is not below Nyquist {nyquist} Hz", self.frequency(self.categories - 1)));
        }
        if !(self.amplitude > 0.0 && self.amplitude * (1.0 + self.amplitude_jitter) <= 1.0) {
            problems.push("amplitude with jitter must lie in (0, 1]".to_string());
        }
        let frames = self.grid.clip_frames;
        if self.lead_in_samples >= self.grid.step {
            problems.push(format!("lead_in_samples {} must lie inside the {}-sample first frame", self.lead_in_samples, self.grid.step));
        }
        if let Envelope::Gated { on_fraction } = self.envelope {
            let on = (on_fraction * frames as f64).round() as usize;
            if !(0.0..=1.0).contains(&on_fraction) {
                problems.push(format!("on_fraction {on_fraction} must lie in [0, 1]"));
            } else if self.lead_in_samples > 0 && on == 0 {
                problems.push("a lead-in needs at least one sounding frame".to_string());
            }
        }
        if !(0.0..1.0).contains(&self.off_level) {
            problems.push(format!("off_level {} must lie in [0, 1)", self.off_level));
        }
        if self.noise < 0.0 || self.feature_noise < 0.0 {
            problems.push("noise levels must be non-negative".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub category: usize,
    pub waveform: Waveform,
    pub appearance: FeatureTrack,
    pub flow: FeatureTrack,
    pub envelope: Vec<f64>,
}

fn clip_rng(category: usize, seed: u64) -> ChaCha8Rng {
    let mixed = seed.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ (category as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Deterministic in `(cfg, category, seed)`.
pub fn synth_clip(cfg: &SynthConfig, category: usize, seed: u64) -> Result<SynthClip> {
    cfg.validate()?;
    if category >= cfg.categories {
        return Err(Error::Contract(format!("category {category} outside [0, {})", cfg.categories)));
    }
    let mut rng = clip_rng(category, seed);
    let frames = cfg.grid.clip_frames;
    let step = cfg.grid.step;

    let envelope: Vec<f64> = match cfg.envelope {
        Envelope::Constant => vec![1.0; frames],
        Envelope::Gated { on_fraction } => {
            let mut on = (on_fraction * frames as f64).round() as usize;
            let mut env = vec![0.0; frames];
            // the forced first frame counts towards the total
            let first_free = if cfg.lead_in_samples > 0 {
                env[0] = 1.0;
                on -= 1;
                1
            } else {
                0
            };
            let mut order: Vec<usize> = (first_free..frames).collect();
            order.shuffle(&mut rng);
            for &f in &order[..on] {
                env[f] = 1.0;
            }
            env
        }
    };

    let amplitude = cfg.amplitude * (1.0 + rng.gen_range(-1.0..=1.0) * cfg.amplitude_jitter);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let omega = 2.0 * PI * cfg.frequency(category) / cfg.grid.sample_rate as f64;
    let audio_noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("non-negative sigma");
    let lead = cfg.lead_in_samples;
    let mut run_start = lead;
    let gain = |gate: f64| if gate == 1.0 { 1.0 } else { cfg.off_level };
    let samples: Vec<f64> = (0..frames * step)
        .map(|t| {
            let f = t / step;
            if t % step == 0 && f > 0 && gain(envelope[f - 1]) == 0.0 {
                run_start = t;
            }
            if t < lead {
                return 0.0;
            }
            let g = gain(envelope[f]);
            let n = if cfg.noise > 0.0 { audio_noise.sample(&mut rng) } else { 0.0 };
            let angle = match cfg.phase {
                Phase::Random => omega * t as f64 + phase,
                Phase::RunStart => omega * (t - run_start) as f64 + PI / 2.0,
            };
            g * (amplitude * angle.sin() + n)
        })
        .collect();
    let waveform = Waveform::new(samples, cfg.grid.sample_rate)?;

    let feat_noise = Normal::new(0.0, cfg.feature_noise.max(f64::MIN_POSITIVE)).expect("non-negative sigma");
    let noise = |rng: &mut ChaCha8Rng| if cfg.feature_noise > 0.0 { feat_noise.sample(rng) } else { 0.0 };
    let mut appearance = Vec::with_capacity(frames * cfg.feature_dim);
    for &g in &envelope {
        for d in 0..cfg.feature_dim {
            let clean = if d == category {
                1.0
            } else if d == cfg.categories {
                g
            } else {
                0.0
            };
            appearance.push(clean + noise(&mut rng));
        }
    }
    let mut flow = Vec::with_capacity(frames * cfg.flow_dim);
    for f in 0..frames {
        let prev = if f == 0 { 0.0 } else { envelope[f - 1] };
        for d in 0..cfg.flow_dim {
            let clean = match d {
                0 => envelope[f] - prev,
                1 => envelope[f],
                _ => 0.0,
            };
            flow.push(clean + noise(&mut rng));
        }
    }
    Ok(SynthClip {
        category,
        waveform,
        appearance: FeatureTrack::new(FeatureKind::Appearance, frames, cfg.feature_dim, appearance)?,
        flow: FeatureTrack::new(FeatureKind::Flow, frames, cfg.flow_dim, flow)?,
        envelope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig::desk();
        assert_eq!(synth_clip(&cfg, 2, 11).unwrap(), synth_clip(&cfg, 2, 11).unwrap());
        assert_ne!(synth_clip(&cfg, 2, 11).unwrap().waveform, synth_clip(&cfg, 2, 12).unwrap().waveform);
    }

    #[test]
    fn gated_clip_has_exact_on_count_and_levels() {
        let cfg = SynthConfig::desk();
        let clip = synth_clip(&cfg, 0, 3).unwrap();
        assert_eq!(clip.envelope.iter().filter(|&&g| g == 1.0).count(), 15);
        assert_eq!(clip.envelope[0], 1.0);
        let lead = cfg.lead_in_samples;
        let x = clip.waveform.samples();
        assert!(x[..lead].iter().all(|&v| v == 0.0));
        assert!((x[lead] - cfg.amplitude).abs() < 1e-12, "onset starts at the crest");
        let step = cfg.grid.step;
        let peak = |f: usize| x[f * step..(f + 1) * step].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (f, &g) in clip.envelope.iter().enumerate() {
            let want = if g == 1.0 { cfg.amplitude } else { cfg.amplitude * cfg.off_level };
            assert!((peak(f) - want).abs() < 0.02 * cfg.amplitude, "frame {f}: {} vs {want}", peak(f));
        }
        let silent = synth_clip(&SynthConfig { off_level: 0.0, ..cfg.clone() }, 0, 3).unwrap();
        for (f, &g) in silent.envelope.iter().enumerate() {
            if g == 0.0 {
                assert!(silent.waveform.samples()[f * step..(f + 1) * step].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn invalid_configs_list_every_problem() {
        let mut cfg = SynthConfig::desk();
        cfg.feature_dim = 2;
        cfg.base_frequency = 1500.0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("feature_dim") && msg.contains("Nyquist"), "{msg}");
        assert!(synth_clip(&SynthConfig::desk(), 4, 0).is_err());
    }
}

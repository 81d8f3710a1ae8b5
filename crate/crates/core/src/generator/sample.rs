//! Autoregressive sampling, one sample at a time, for a batch of rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{dequantized_rows, GeneratorModel};
use super::state::GenerationState;
use crate::audio_io::QuantizedClip;
use crate::dataset::FeatureTrack;
use crate::error::{Error, Result};
use crate::numerics::{gru_step, Tape};

/// Coarse steps evaluated on one tape before parameters are rebound.
const STEPS_PER_TAPE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Draw from `softmax(logits / temperature)`.
    Temperature(f64),
    /// Take the most likely code (lowest index on ties); the zero-temperature limit.
    Argmax,
}

impl SamplingMode {
    fn validate(self) -> Result<()> {
        match self {
            SamplingMode::Temperature(t) if !(t > 0.0 && t.is_finite()) => {
                Err(Error::Contract(format!("temperature {t} must be positive and finite")))
            }
            _ => Ok(()),
        }
    }
}

/// Picks a code from one logit row. `u` is a uniform draw in `[0, 1)`.
pub fn choose_code(logits: &[f64], mode: SamplingMode, u: f64) -> usize {
    match mode {
        SamplingMode::Argmax => {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            best
        }
        SamplingMode::Temperature(t) => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|&v| ((v - max) / t).exp()).collect();
            let total: f64 = weights.iter().sum();
            let target = u * total;
            let mut acc = 0.0;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if target < acc {
                    return i;
                }
            }
            weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
        }
    }
}

/// Per-row seed so that a row's output does not depend on its batch mates.
pub fn row_seed(seed: u64, row: usize) -> u64 {
    seed ^ (row as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub struct SampleOutput {
    pub codes: Vec<Vec<u8>>,
    pub state: GenerationState,
}

impl GeneratorModel {
    /// Continues every row of `state` by `n_samples` codes. Row `b` draws
    /// from its own generator seeded by `seeds[b]`.
    pub fn sample_batch(
        &self,
        feats: &[&FeatureTrack],
        mut state: GenerationState,
        n_samples: usize,
        mode: SamplingMode,
        seeds: &[u64],
    ) -> Result<SampleOutput> {
        let c = self.config();
        let (cf, mf, rc, mr, k) = (c.coarse_frame, c.mid_frame, c.coarse_ratio(), c.mid_ratio(), c.fine_context);
        let batch = feats.len();
        mode.validate()?;
        if n_samples % cf != 0 {
            return Err(Error::Contract(format!("{n_samples} samples is not a multiple of coarse frame {cf}")));
        }
        if seeds.len() != batch {
            return Err(Error::Contract(format!("{} seeds for {batch} rows", seeds.len())));
        }
        state.validate(self, batch)?;
        for f in feats {
            self.check_features(f)?;
        }
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let mut history: Vec<Vec<u8>> = state.histories().to_vec();
        let mut out: Vec<Vec<u8>> = vec![Vec::with_capacity(n_samples); batch];
        let mut coarse_h = state.coarse_h().to_vec();
        let mut mid_h = state.mid_h().to_vec();
        let mut sample_index = state.sample_index();
        let big_p = c.history_len();
        let tail = |h: &Vec<u8>, n: usize| h[h.len() - n..].to_vec();

        let total_steps = n_samples / cf;
        let mut step = 0;
        while step < total_steps {
            let mut tape = Tape::new();
            let p = self.bind(&mut tape);
            let mut hc = tape.constant([batch, c.coarse_hidden], coarse_h.clone())?;
            let mut hm = tape.constant([batch, c.mid_hidden], mid_h.clone())?;
            for _ in 0..STEPS_PER_TAPE.min(total_steps - step) {
                let frames: Vec<Vec<u8>> = history.iter().map(|h| tail(h, cf)).collect();
                let frame_refs: Vec<&[u8]> = frames.iter().map(Vec::as_slice).collect();
                let rows: Vec<&[f64]>;
                let feature_rows = if c.mode.uses_encoder() {
                    None
                } else {
                    let frame = sample_index / c.step;
                    rows = feats.iter().map(|f| f.row(frame.min(f.frames() - 1))).collect();
                    Some(rows.as_slice())
                };
                let (coarse_cond, h) = self.coarse_step(&mut tape, &p, &frame_refs, feature_rows, hc)?;
                hc = h;
                for i in 0..rc {
                    let cond = tape.gather_rows(coarse_cond, (0..batch).map(|b| b * rc + i).collect())?;
                    let prev: Vec<Vec<u8>> = history.iter().map(|h| tail(h, mf)).collect();
                    let prev_refs: Vec<&[u8]> = prev.iter().map(Vec::as_slice).collect();
                    let samples = dequantized_rows(&mut tape, &prev_refs)?;
                    let x = self.mid_inputs(&mut tape, samples, cond)?;
                    hm = gru_step(&mut tape, self.mid_cell(), &p, x, hm)?;
                    let fine_cond = self.mid_conditioning(&mut tape, &p, hm)?;
                    for ii in 0..mr {
                        let cond = tape.gather_rows(fine_cond, (0..batch).map(|b| b * mr + ii).collect())?;
                        let ctx: Vec<Vec<u8>> = history.iter().map(|h| tail(h, k)).collect();
                        let ctx_refs: Vec<&[u8]> = ctx.iter().map(Vec::as_slice).collect();
                        let logits = self.fine_step(&mut tape, &p, &ctx_refs, cond)?;
                        let values = tape.value(logits);
                        for b in 0..batch {
                            let u: f64 = rngs[b].gen();
                            let code = choose_code(values.row(b), mode, u) as u8;
                            history[b].push(code);
                            out[b].push(code);
                        }
                        sample_index += 1;
                    }
                }
                for h in history.iter_mut() {
                    let excess = h.len() - big_p;
                    h.drain(..excess);
                }
            }
            step += STEPS_PER_TAPE.min(total_steps - step);
            coarse_h = tape.value(hc).data().to_vec();
            mid_h = tape.value(hm).data().to_vec();
        }
        state = GenerationState::from_parts(coarse_h, mid_h, history, sample_index);
        Ok(SampleOutput { codes: out, state })
    }

    /// Generates `n_samples` codes from silence conditioned on `feats`.
    pub fn sample_autoregressive(&self, feats: &FeatureTrack, n_samples: usize, mode: SamplingMode, seed: u64) -> Result<QuantizedClip> {
        let state = GenerationState::fresh(self, &[feats])?;
        let out = self.sample_batch(&[feats], state, n_samples, mode, &[seed])?;
        QuantizedClip::new(out.codes.into_iter().next().expect("one row"), self.config().sample_rate)
    }
}

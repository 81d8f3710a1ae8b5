use serde::{Deserialize, Serialize};

use super::model::GeneratorModel;
use crate::audio_io::SILENCE_CODE;
use crate::dataset::FeatureTrack;
use crate::error::{Error, Result};

/// Recurrent state between chunks or sampling blocks, for a batch of rows.
///
/// Values are detached copies; carrying a state into the next chunk never
/// carries gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationState {
    batch: usize,
    /// `[batch, coarse_hidden]`, row-major.
    coarse_h: Vec<f64>,
    /// `[batch, mid_hidden]`, row-major.
    mid_h: Vec<f64>,
    /// The last `history_len` codes of every row.
    history: Vec<Vec<u8>>,
    /// Absolute index of the next sample to predict (shared by all rows).
    sample_index: usize,
}

impl GenerationState {
    pub(crate) fn from_parts(coarse_h: Vec<f64>, mid_h: Vec<f64>, history: Vec<Vec<u8>>, sample_index: usize) -> Self {
        GenerationState { batch: history.len(), coarse_h, mid_h, history, sample_index }
    }

    /// State before the first sample: silent history and, in seq/flow
    /// modes, the encoded video as the coarse state. The silent history
    /// stands in for a clip's first coarse frame, so generation starts at
    /// position `coarse_frame`, the first position teacher forcing predicts.
    pub fn fresh(model: &GeneratorModel, feats: &[&FeatureTrack]) -> Result<Self> {
        let c = model.config();
        let b = feats.len();
        if b == 0 {
            return Err(Error::Contract("no rows".into()));
        }
        for f in feats {
            model.check_features(f)?;
        }
        let coarse_h = if c.mode.uses_encoder() {
            let mut tape = crate::numerics::Tape::new();
            let p = model.bind(&mut tape);
            let h = model.encode_video_on(&mut tape, &p, feats)?;
            tape.value(h).data().to_vec()
        } else {
            vec![0.0; b * c.coarse_hidden]
        };
        Ok(GenerationState {
            batch: b,
            coarse_h,
            mid_h: vec![0.0; b * c.mid_hidden],
            history: vec![vec![SILENCE_CODE; c.history_len()]; b],
            sample_index: c.coarse_frame,
        })
    }

    /// As [`fresh`](Self::fresh), then treats the first `coarse_frame`
    /// codes of each prime as given, the way teacher forcing does at a
    /// clip start.
    pub fn primed(model: &GeneratorModel, feats: &[&FeatureTrack], primes: &[&[u8]]) -> Result<Self> {
        let cf = model.config().coarse_frame;
        if primes.len() != feats.len() {
            return Err(Error::Contract(format!("{} primes for {} rows", primes.len(), feats.len())));
        }
        let mut state = GenerationState::fresh(model, feats)?;
        for (h, prime) in state.history.iter_mut().zip(primes) {
            if prime.len() < cf {
                return Err(Error::Contract(format!("prime of {} codes, need {cf}", prime.len())));
            }
            h.drain(..cf);
            h.extend_from_slice(&prime[..cf]);
        }
        state.sample_index = cf;
        Ok(state)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn sample_index(&self) -> usize {
        self.sample_index
    }

    pub fn coarse_h(&self) -> &[f64] {
        &self.coarse_h
    }

    pub fn mid_h(&self) -> &[f64] {
        &self.mid_h
    }

    pub fn history(&self, row: usize) -> &[u8] {
        &self.history[row]
    }

    pub(crate) fn histories(&self) -> &[Vec<u8>] {
        &self.history
    }

    /// Checks dimensions against the model, e.g. after deserializing.
    pub fn validate(&self, model: &GeneratorModel, batch: usize) -> Result<()> {
        let c = model.config();
        let ok = self.batch == batch
            && self.history.len() == batch
            && self.coarse_h.len() == batch * c.coarse_hidden
            && self.mid_h.len() == batch * c.mid_hidden
            && self.history.iter().all(|h| h.len() == c.history_len());
        if !ok {
            return Err(Error::Contract(format!(
                "generation state for batch {} does not fit batch {batch} with hidden sizes {}/{}",
                self.batch, c.coarse_hidden, c.mid_hidden
            )));
        }
        Ok(())
    }

    /// Keeps only the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize], model: &GeneratorModel) -> GenerationState {
        let (hc, hm) = (model.config().coarse_hidden, model.config().mid_hidden);
        GenerationState {
            batch: rows.len(),
            coarse_h: rows.iter().flat_map(|&r| self.coarse_h[r * hc..(r + 1) * hc].iter().copied()).collect(),
            mid_h: rows.iter().flat_map(|&r| self.mid_h[r * hm..(r + 1) * hm].iter().copied()).collect(),
            history: rows.iter().map(|&r| self.history[r].clone()).collect(),
            sample_index: self.sample_index,
        }
    }
}

//! Teacher-forced evaluation over a chunk of ground-truth codes.
//!
//! Rows of every tier are laid out step-major: coarse rows are
//! `(coarse step, batch)`, mid rows `(mid step, batch)` and fine rows
//! `(mid step, batch, sub-position)`.

use super::model::{dequantized_rows, GeneratorModel};
use super::state::GenerationState;
use crate::audio_io::SILENCE_CODE;
use crate::dataset::FeatureTrack;
use crate::error::{Error, Result};
use crate::numerics::{Bound, Tape, Var};

/// Evaluation chunk used by likelihood scoring; any multiple of the coarse
/// frame gives the same result.
pub const EVAL_CHUNK: usize = 1024;

pub struct TeacherForced {
    /// `[positions · batch, classes]` in fine row order.
    pub logits: Var,
    /// Ground-truth code of every logit row.
    pub targets: Vec<usize>,
    pub batch: usize,
    /// Predicted positions per row.
    pub positions: usize,
    /// Absolute sample index of the first predicted position.
    pub first_sample: usize,
    mid_ratio: usize,
    /// State after the chunk, detached.
    pub state: GenerationState,
}

impl TeacherForced {
    /// Logit row of position `t` (relative to the first prediction) of row `b`.
    pub fn row(&self, b: usize, t: usize) -> usize {
        let (m, i) = (t / self.mid_ratio, t % self.mid_ratio);
        (m * self.batch + b) * self.mid_ratio + i
    }
}

impl GeneratorModel {
    /// Teacher-forced logits for one chunk per row.
    ///
    /// With `start = None` the chunk begins a clip: its first coarse frame
    /// is context only, so `len − coarse_frame` positions are predicted and
    /// seq/flow models encode the video on this tape. With a carried state
    /// every position of the chunk is predicted.
    pub fn forward_teacher_forced(
        &self,
        tape: &mut Tape,
        p: &Bound,
        codes: &[&[u8]],
        feats: &[&FeatureTrack],
        start: Option<&GenerationState>,
    ) -> Result<TeacherForced> {
        let c = self.config();
        let (cf, mf, rc, mr) = (c.coarse_frame, c.mid_frame, c.coarse_ratio(), c.mid_ratio());
        let big_p = c.history_len();
        let batch = codes.len();
        if batch == 0 || feats.len() != batch {
            return Err(Error::Contract(format!("{batch} code rows with {} feature tracks", feats.len())));
        }
        let len = codes[0].len();
        if codes.iter().any(|r| r.len() != len) {
            return Err(Error::Contract("chunk rows differ in length".into()));
        }
        if len % cf != 0 {
            return Err(Error::Contract(format!("chunk length {len} is not a multiple of coarse frame {cf}")));
        }
        if let Some(&bad) = codes.iter().flat_map(|r| r.iter()).find(|&&v| v as usize >= c.classes) {
            return Err(Error::Data(format!("code {bad} outside [0, {})", c.classes)));
        }
        for f in feats {
            self.check_features(f)?;
        }
        if let Some(s) = start {
            s.validate(self, batch)?;
        }

        // ext = context ++ chunk; targets are ext[big_p..]
        let exts: Vec<Vec<u8>> = codes
            .iter()
            .enumerate()
            .map(|(b, chunk)| {
                let mut e = match start {
                    Some(s) => s.history(b).to_vec(),
                    None => vec![SILENCE_CODE; big_p - cf],
                };
                e.extend_from_slice(chunk);
                e
            })
            .collect();
        let positions = exts[0].len() - big_p;
        if positions == 0 {
            return Err(Error::Contract(format!("chunk of {len} codes predicts no positions")));
        }
        let first_sample = start.map_or(cf, |s| s.sample_index());
        let n_coarse = positions / cf;
        let n_mid = positions / mf;

        let h0 = match start {
            Some(s) => tape.constant([batch, c.coarse_hidden], s.coarse_h().to_vec())?,
            None if c.mode.uses_encoder() => self.encode_video_on(tape, p, feats)?,
            None => tape.constant([batch, c.coarse_hidden], vec![0.0; batch * c.coarse_hidden])?,
        };
        let m0 = match start {
            Some(s) => tape.constant([batch, c.mid_hidden], s.mid_h().to_vec())?,
            None => tape.constant([batch, c.mid_hidden], vec![0.0; batch * c.mid_hidden])?,
        };

        // coarse tier
        let frame_slices: Vec<&[u8]> = (0..n_coarse)
            .flat_map(|j| exts.iter().map(move |e| &e[big_p + j * cf - cf..big_p + j * cf]))
            .collect();
        let frames = dequantized_rows(tape, &frame_slices)?;
        let feature_rows = if c.mode.uses_encoder() {
            None
        } else {
            let mut data = Vec::with_capacity(n_coarse * batch * c.feature_dim);
            for j in 0..n_coarse {
                let frame = (first_sample + j * cf) / c.step;
                for f in feats {
                    data.extend_from_slice(f.row(frame.min(f.frames() - 1)));
                }
            }
            Some(tape.constant([n_coarse * batch, c.feature_dim], data)?)
        };
        let coarse_x = self.coarse_inputs(tape, p, frames, feature_rows)?;
        let coarse_states = self.coarse_cell().scan(tape, p, coarse_x, h0)?;
        let coarse_all = tape.concat_rows(&coarse_states)?;
        let coarse_cond = self.coarse_conditioning(tape, p, coarse_all)?;
        let order: Vec<usize> = (0..n_mid).flat_map(|m| (0..batch).map(move |b| ((m / rc) * batch + b) * rc + m % rc)).collect();
        let coarse_cond = tape.gather_rows(coarse_cond, order)?;

        // mid tier
        let mid_slices: Vec<&[u8]> = (0..n_mid)
            .flat_map(|m| exts.iter().map(move |e| &e[big_p + m * mf - mf..big_p + m * mf]))
            .collect();
        let mid_samples = dequantized_rows(tape, &mid_slices)?;
        let mid_x = self.mid_inputs(tape, mid_samples, coarse_cond)?;
        let mid_states = self.mid_cell().scan(tape, p, mid_x, m0)?;
        let mid_all = tape.concat_rows(&mid_states)?;
        let fine_cond = self.mid_conditioning(tape, p, mid_all)?;

        // fine tier, rows (m, b, i)
        let k = c.fine_context;
        let mut contexts = Vec::with_capacity(positions * batch * k);
        let mut targets = Vec::with_capacity(positions * batch);
        for m in 0..n_mid {
            for e in &exts {
                for i in 0..mr {
                    let t = big_p + m * mf + i;
                    contexts.extend(e[t - k..t].iter().map(|&v| v as usize));
                    targets.push(e[t] as usize);
                }
            }
        }
        let logits = self.fine_logits(tape, p, contexts, fine_cond)?;

        let state = GenerationState::from_parts(
            tape.value(*coarse_states.last().expect("n_coarse ≥ 1")).data().to_vec(),
            tape.value(*mid_states.last().expect("n_mid ≥ 1")).data().to_vec(),
            exts.iter().map(|e| e[e.len() - big_p..].to_vec()).collect(),
            first_sample + positions,
        );
        Ok(TeacherForced { logits, targets, batch, positions, first_sample, mid_ratio: mr, state })
    }

    /// Per-position logits for one row, in time order, plus the carried state.
    pub fn teacher_forced_logits(
        &self,
        codes: &[u8],
        feats: &FeatureTrack,
        start: Option<&GenerationState>,
    ) -> Result<(Vec<Vec<f64>>, GenerationState)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let out = self.forward_teacher_forced(&mut tape, &p, &[codes], &[feats], start)?;
        let logits = tape.value(out.logits);
        let rows = (0..out.positions).map(|t| logits.row(out.row(0, t)).to_vec()).collect();
        Ok((rows, out.state))
    }

    /// Number of positions a clip of `len` codes contributes.
    pub fn predicted_positions(&self, len: usize) -> usize {
        len.saturating_sub(self.config().coarse_frame)
    }

    /// `Σ log p(y_t | y_<t, video)` in nats over every predicted position,
    /// for each row; rows are evaluated together in chunks of `chunk` codes.
    pub fn log_likelihood_batch(&self, codes: &[&[u8]], feats: &[&FeatureTrack], chunk: usize) -> Result<Vec<f64>> {
        let cf = self.config().coarse_frame;
        if chunk == 0 || chunk % cf != 0 {
            return Err(Error::Contract(format!("evaluation chunk {chunk} is not a positive multiple of {cf}")));
        }
        let len = codes.first().map_or(0, |r| r.len());
        if len <= cf {
            return Err(Error::Contract(format!("clip of {len} codes has no predicted positions")));
        }
        let mut totals = vec![0.0; codes.len()];
        let mut state: Option<GenerationState> = None;
        let mut offset = 0;
        while offset < len {
            // a first chunk of one coarse frame would be warm-up only
            let width = if offset == 0 && chunk == cf { 2 * cf } else { chunk };
            let end = (offset + width).min(len);
            let rows: Vec<&[u8]> = codes.iter().map(|r| &r[offset..end]).collect();
            let mut tape = Tape::new();
            let p = self.bind(&mut tape);
            let out = self.forward_teacher_forced(&mut tape, &p, &rows, feats, state.as_ref())?;
            let ce = tape.cross_entropy(out.logits, &out.targets)?;
            let ce = tape.value(ce).data();
            for (b, total) in totals.iter_mut().enumerate() {
                for t in 0..out.positions {
                    *total -= ce[out.row(b, t)];
                }
            }
            state = Some(out.state);
            offset = end;
        }
        Ok(totals)
    }

    pub fn log_likelihood(&self, codes: &[u8], feats: &FeatureTrack) -> Result<f64> {
        Ok(self.log_likelihood_batch(&[codes], &[feats], EVAL_CHUNK)?[0])
    }
}

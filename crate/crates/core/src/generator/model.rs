use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ConditioningMode, GeneratorConfig};
use crate::audio_io::dequantize_sample;
use crate::dataset::{ClipData, FeatureTrack};
use crate::error::{Error, Result};
use crate::numerics::{Bound, Embedding, GruCellParams, Linear, ParamId, ParamStore, Tape, Tensor, Var};

/// All generator parameters plus the layer handles that address them.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    config: GeneratorConfig,
    params: ParamStore,
    frame_expand: Option<Linear>,
    encoder: Option<GruCellParams>,
    coarse: GruCellParams,
    coarse_up: Linear,
    mid: GruCellParams,
    mid_up: Linear,
    embed: Embedding,
    fine_in: Linear,
    fine_hidden: Linear,
    fine_out: Linear,
}

/// Dequantized codes as a `[rows, width]` constant, one slice per row.
pub(crate) fn dequantized_rows(tape: &mut Tape, rows: &[&[u8]]) -> Result<Var> {
    let width = rows.first().map_or(0, |r| r.len());
    let data = rows.iter().flat_map(|r| r.iter().map(|&c| dequantize_sample(c))).collect();
    tape.constant([rows.len(), width], data)
}

impl GeneratorModel {
    /// Builds a freshly initialized model; registration order matches
    /// [`GeneratorConfig::param_specs`].
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = &config;
        let (frame_expand, encoder) = match c.mode {
            ConditioningMode::Frame => (Some(Linear::new(&mut params, "frame_expand", c.coarse_frame, c.expand_dim, &mut rng)), None),
            _ => (None, Some(GruCellParams::new(&mut params, "encoder", c.feature_dim, c.coarse_hidden, &mut rng))),
        };
        let coarse = GruCellParams::new(&mut params, "coarse", c.coarse_input_dim(), c.coarse_hidden, &mut rng);
        let coarse_up = Linear::new(&mut params, "coarse_up", c.coarse_hidden, c.coarse_ratio() * c.mid_hidden, &mut rng);
        let mid = GruCellParams::new(&mut params, "mid", c.mid_input_dim(), c.mid_hidden, &mut rng);
        let mid_up = Linear::new(&mut params, "mid_up", c.mid_hidden, c.mid_ratio() * c.fine_hidden, &mut rng);
        let embed = Embedding::new(&mut params, "fine_embed", c.classes, c.embedding_dim, &mut rng);
        let fine_in = Linear::new(&mut params, "fine_in", c.fine_input_dim(), c.fine_hidden, &mut rng);
        let fine_hidden = Linear::new(&mut params, "fine_hidden", c.fine_hidden, c.fine_hidden, &mut rng);
        let fine_out = Linear::new(&mut params, "fine_out", c.fine_hidden, c.classes, &mut rng);
        let model = GeneratorModel {
            config,
            params,
            frame_expand,
            encoder,
            coarse,
            coarse_up,
            mid,
            mid_up,
            embed,
            fine_in,
            fine_hidden,
            fine_out,
        };
        model.audit_shapes()?;
        Ok(model)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    /// Checks every parameter against the shapes the config implies.
    pub fn audit_shapes(&self) -> Result<()> {
        let specs = self.config.param_specs();
        if specs.len() != self.params.len() {
            return Err(Error::Config(format!("model has {} parameters, config implies {}", self.params.len(), specs.len())));
        }
        for ((name, shape), (actual_name, tensor)) in specs.iter().zip(self.params.iter()) {
            if name != actual_name || shape.as_slice() != tensor.shape() {
                return Err(Error::Config(format!(
                    "parameter {actual_name} {:?} does not match expected {name} {shape:?}",
                    tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// Replaces every parameter value, keeping names and shapes.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!("{} parameter blobs for a model with {}", values.len(), self.params.len())));
        }
        for (id, (name, tensor)) in self.params.ids().collect::<Vec<_>>().into_iter().zip(values) {
            let expected = self.params.name(id).to_string();
            let shape = self.params.get(id).shape().to_vec();
            if name != expected {
                return Err(Error::Checkpoint(format!("parameter blob {name:?} where {expected:?} was expected")));
            }
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("parameter {name} has shape {:?}, config implies {shape:?}", tensor.shape())));
            }
            let target = self.params.get_mut(id);
            target.data_mut().copy_from_slice(tensor.data());
            target.clear_grad();
        }
        Ok(())
    }

    /// Zeroes the final fine layer so every prediction is uniform.
    pub fn zero_output_layer(&mut self) {
        for id in [self.fine_out.weight, self.fine_out.bias] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Parameter ids grouped by role: conditioning entry (encoder or
    /// frame expansion), coarse, mid and fine tiers.
    pub fn parameter_groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let gru = |g: &GruCellParams| vec![g.w_x, g.u_zr, g.u_h, g.bias];
        let lin = |l: &Linear| vec![l.weight, l.bias];
        let entry = match (&self.frame_expand, &self.encoder) {
            (Some(l), _) => ("frame_expand", lin(l)),
            (_, Some(g)) => ("encoder", gru(g)),
            _ => unreachable!("every mode has an entry layer"),
        };
        let mut coarse = gru(&self.coarse);
        coarse.extend(lin(&self.coarse_up));
        let mut mid = gru(&self.mid);
        mid.extend(lin(&self.mid_up));
        let mut fine = vec![self.embed.table];
        for l in [&self.fine_in, &self.fine_hidden, &self.fine_out] {
            fine.extend(lin(l));
        }
        vec![entry, ("coarse", coarse), ("mid", mid), ("fine", fine)]
    }

    pub fn check_features(&self, feats: &FeatureTrack) -> Result<()> {
        if feats.dim() != self.config.feature_dim {
            return Err(Error::Config(format!(
                "{} mode expects {}-wide features, got {} (kind {:?})",
                self.config.mode,
                self.config.feature_dim,
                feats.dim(),
                feats.kind()
            )));
        }
        Ok(())
    }

    /// The feature track this model's mode conditions on.
    pub fn conditioning_for(&self, clip: &ClipData) -> Result<FeatureTrack> {
        let track = match self.config.mode {
            ConditioningMode::Flow if clip.flow.is_none() => {
                return Err(Error::Config(format!(
                    "flow mode expects {}-wide appearance+flow features, but clip {} has only {}-wide appearance features",
                    self.config.feature_dim,
                    clip.id,
                    clip.appearance.dim()
                )));
            }
            ConditioningMode::Flow => clip.appearance_flow()?,
            _ => clip.appearance.clone(),
        };
        self.check_features(&track)?;
        Ok(track)
    }

    /// Runs the encoder GRU over the feature rows of every track, batched;
    /// returns the final states `[B, coarse_hidden]`.
    pub fn encode_video_on(&self, tape: &mut Tape, p: &Bound, feats: &[&FeatureTrack]) -> Result<Var> {
        let encoder = self
            .encoder
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} mode has no video encoder", self.config.mode)))?;
        let frames = feats.first().map(|f| f.frames()).ok_or_else(|| Error::Contract("no feature tracks".into()))?;
        for f in feats {
            self.check_features(f)?;
            if f.frames() != frames {
                return Err(Error::Contract(format!("feature tracks of {} and {frames} frames in one batch", f.frames())));
            }
        }
        let dim = self.config.feature_dim;
        let mut data = Vec::with_capacity(frames * feats.len() * dim);
        for frame in 0..frames {
            for f in feats {
                data.extend_from_slice(f.row(frame));
            }
        }
        let x = tape.constant([frames * feats.len(), dim], data)?;
        let h0 = tape.constant([feats.len(), self.config.coarse_hidden], vec![0.0; feats.len() * self.config.coarse_hidden])?;
        let states = encoder.scan(tape, p, x, h0)?;
        Ok(*states.last().expect("at least one frame"))
    }

    /// The encoder's final hidden state for one track.
    pub fn encode_video(&self, feats: &FeatureTrack) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let h = self.encode_video_on(&mut tape, &p, &[feats])?;
        Ok(tape.value(h).data().to_vec())
    }

    /// Coarse GRU input rows: expanded frame joined with the aligned feature
    /// row (frame mode) or the dequantized frame itself.
    pub(crate) fn coarse_inputs(&self, tape: &mut Tape, p: &Bound, frames: Var, feature_rows: Option<Var>) -> Result<Var> {
        match (&self.frame_expand, feature_rows) {
            (Some(expand), Some(rows)) => {
                let e = expand.forward(tape, p, frames)?;
                tape.concat_cols(&[e, rows])
            }
            (None, None) => Ok(frames),
            _ => Err(Error::Contract(format!("feature rows must be given exactly in frame mode, mode is {}", self.config.mode))),
        }
    }

    pub(crate) fn coarse_cell(&self) -> &GruCellParams {
        &self.coarse
    }

    pub(crate) fn mid_cell(&self) -> &GruCellParams {
        &self.mid
    }

    /// Upsamples coarse states `[R, Hc]` into `[R · ratio, Hm]`, rows ordered
    /// (input row, sub-step).
    pub(crate) fn coarse_conditioning(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
        let rows = tape.value(h).rows();
        let up = self.coarse_up.forward(tape, p, h)?;
        tape.reshape(up, [rows * self.config.coarse_ratio(), self.config.mid_hidden])
    }

    pub(crate) fn mid_inputs(&self, tape: &mut Tape, samples: Var, cond: Var) -> Result<Var> {
        tape.concat_cols(&[samples, cond])
    }

    /// Upsamples mid states `[R, Hm]` into `[R · ratio, Hf]`.
    pub(crate) fn mid_conditioning(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
        let rows = tape.value(h).rows();
        let up = self.mid_up.forward(tape, p, h)?;
        tape.reshape(up, [rows * self.config.mid_ratio(), self.config.fine_hidden])
    }

    /// Fine MLP over `contexts` (k codes per row, row-major) and
    /// conditioning rows `[R, Hf]`; returns logits `[R, classes]`.
    pub(crate) fn fine_logits(&self, tape: &mut Tape, p: &Bound, contexts: Vec<usize>, cond: Var) -> Result<Var> {
        let rows = tape.value(cond).rows();
        let k = self.config.fine_context;
        if contexts.len() != rows * k {
            return Err(Error::Contract(format!("{} context codes for {rows} rows of {k}", contexts.len())));
        }
        let e = self.embed.forward(tape, p, contexts)?;
        let e = tape.reshape(e, [rows, k * self.config.embedding_dim])?;
        let x = tape.concat_cols(&[e, cond])?;
        let act = self.config.fine_activation;
        let x = self.fine_in.forward(tape, p, x)?;
        let x = act.apply(tape, x);
        let x = self.fine_hidden.forward(tape, p, x)?;
        let x = act.apply(tape, x);
        self.fine_out.forward(tape, p, x)
    }

    /// One coarse step for a batch: `prev_frames` holds the previous
    /// `coarse_frame` codes per row, `feature_rows` the aligned feature row
    /// per row (frame mode only). Returns the `[B · ratio, Hm]` mid-tier
    /// conditioning and the new state.
    pub fn coarse_step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        prev_frames: &[&[u8]],
        feature_rows: Option<&[&[f64]]>,
        h: Var,
    ) -> Result<(Var, Var)> {
        let cf = self.config.coarse_frame;
        if let Some(bad) = prev_frames.iter().find(|r| r.len() != cf) {
            return Err(Error::Contract(format!("coarse step needs {cf} codes, got {}", bad.len())));
        }
        let frames = dequantized_rows(tape, prev_frames)?;
        let rows = match feature_rows {
            Some(rows) => {
                if let Some(bad) = rows.iter().find(|r| r.len() != self.config.feature_dim) {
                    return Err(Error::Config(format!("feature row of width {} for feature_dim {}", bad.len(), self.config.feature_dim)));
                }
                let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
                Some(tape.constant([rows.len(), self.config.feature_dim], data)?)
            }
            None => None,
        };
        let x = self.coarse_inputs(tape, p, frames, rows)?;
        let h = crate::numerics::gru_step(tape, &self.coarse, p, x, h)?;
        let cond = self.coarse_conditioning(tape, p, h)?;
        Ok((cond, h))
    }

    /// Fine-tier logits for one position per row given its previous
    /// `fine_context` codes and `[B, Hf]` conditioning.
    pub fn fine_step(&self, tape: &mut Tape, p: &Bound, prev_codes: &[&[u8]], cond: Var) -> Result<Var> {
        let k = self.config.fine_context;
        if let Some(bad) = prev_codes.iter().find(|r| r.len() != k) {
            return Err(Error::Contract(format!("fine step needs {k} codes, got {}", bad.len())));
        }
        let contexts = prev_codes.iter().flat_map(|r| r.iter().map(|&c| c as usize)).collect();
        self.fine_logits(tape, p, contexts, cond)
    }
}

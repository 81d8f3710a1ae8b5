use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numerics::Activation;
use crate::error::{Error, Result};

/// How visual features reach the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningMode {
    /// Each coarse step sees the feature row of the frame it falls in.
    Frame,
    /// An encoder GRU summarizes the appearance track into the coarse
    /// tier's initial hidden state.
    Seq,
    /// As `Seq`, over appearance and flow features joined column-wise.
    Flow,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 3] = [ConditioningMode::Frame, ConditioningMode::Seq, ConditioningMode::Flow];

    pub fn uses_encoder(self) -> bool {
        !matches!(self, ConditioningMode::Frame)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConditioningMode::Frame => "frame",
            ConditioningMode::Seq => "seq",
            ConditioningMode::Flow => "flow",
        }
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "frame" => Ok(ConditioningMode::Frame),
            "seq" => Ok(ConditioningMode::Seq),
            "flow" => Ok(ConditioningMode::Flow),
            other => Err(Error::Config(format!("unknown conditioning mode {other:?} (frame, seq or flow)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub mode: ConditioningMode,
    /// Samples per coarse-tier step.
    pub coarse_frame: usize,
    /// Samples per mid-tier step.
    pub mid_frame: usize,
    /// Samples per fine-tier step; the fine tier is sample-level, so 1.
    pub fine_frame: usize,
    /// Number of previous codes the fine tier embeds.
    pub fine_context: usize,
    pub coarse_hidden: usize,
    pub mid_hidden: usize,
    pub fine_hidden: usize,
    pub embedding_dim: usize,
    pub classes: usize,
    /// Width of the conditioning track: appearance for frame/seq,
    /// appearance + flow for flow.
    pub feature_dim: usize,
    /// Width the coarse frame is expanded to before joining the feature
    /// row (frame mode only).
    pub expand_dim: usize,
    /// Audio samples per video frame.
    pub step: usize,
    /// Rate of generated audio, written into WAV headers.
    pub sample_rate: u32,
    pub fine_activation: Activation,
}

impl GeneratorConfig {
    /// Dimensions of the full-size model.
    pub fn full(mode: ConditioningMode) -> Self {
        let appearance = 4096;
        GeneratorConfig {
            mode,
            coarse_frame: 8,
            mid_frame: 2,
            fine_frame: 1,
            fine_context: 4,
            coarse_hidden: 1024,
            mid_hidden: 1024,
            fine_hidden: 1024,
            embedding_dim: 256,
            classes: 256,
            feature_dim: if mode == ConditioningMode::Flow { 2 * appearance } else { appearance },
            expand_dim: appearance,
            step: 1024,
            sample_rate: 16000,
            fine_activation: Activation::Relu,
        }
    }

    /// Minutes-scale model over the desk data profile (16-wide appearance
    /// and flow features, 320 samples per frame).
    pub fn desk(mode: ConditioningMode) -> Self {
        let appearance = 16;
        GeneratorConfig {
            mode,
            coarse_frame: 8,
            mid_frame: 2,
            fine_frame: 1,
            fine_context: 4,
            coarse_hidden: 48,
            mid_hidden: 48,
            fine_hidden: 48,
            embedding_dim: 8,
            classes: 256,
            feature_dim: if mode == ConditioningMode::Flow { 2 * appearance } else { appearance },
            expand_dim: appearance,
            step: 320,
            sample_rate: 4000,
            fine_activation: Activation::Relu,
        }
    }

    /// Very small smooth model for finite-difference checks.
    pub fn tiny(mode: ConditioningMode, feature_dim: usize) -> Self {
        GeneratorConfig {
            mode,
            coarse_frame: 4,
            mid_frame: 2,
            fine_frame: 1,
            fine_context: 2,
            coarse_hidden: 3,
            mid_hidden: 3,
            fine_hidden: 3,
            embedding_dim: 2,
            classes: 256,
            feature_dim,
            expand_dim: 3,
            step: 8,
            sample_rate: 8000,
            fine_activation: Activation::Tanh,
        }
    }

    /// Codes of history the generator needs: `max(coarse_frame, fine_context)`.
    pub fn history_len(&self) -> usize {
        self.coarse_frame.max(self.fine_context)
    }

    /// Mid-tier steps per coarse step.
    pub fn coarse_ratio(&self) -> usize {
        self.coarse_frame / self.mid_frame
    }

    /// Fine-tier positions per mid step.
    pub fn mid_ratio(&self) -> usize {
        self.mid_frame / self.fine_frame
    }

    pub fn coarse_input_dim(&self) -> usize {
        match self.mode {
            ConditioningMode::Frame => self.expand_dim + self.feature_dim,
            _ => self.coarse_frame,
        }
    }

    pub fn mid_input_dim(&self) -> usize {
        self.mid_frame + self.mid_hidden
    }

    pub fn fine_input_dim(&self) -> usize {
        self.fine_context * self.embedding_dim + self.fine_hidden
    }

    /// Lists every violated constraint at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let positive = [
            ("coarse_frame", self.coarse_frame),
            ("mid_frame", self.mid_frame),
            ("fine_frame", self.fine_frame),
            ("fine_context", self.fine_context),
            ("coarse_hidden", self.coarse_hidden),
            ("mid_hidden", self.mid_hidden),
            ("fine_hidden", self.fine_hidden),
            ("embedding_dim", self.embedding_dim),
            ("feature_dim", self.feature_dim),
            ("step", self.step),
            ("sample_rate", self.sample_rate as usize),
        ];
        for (name, v) in positive {
            if v == 0 {
                problems.push(format!("{name} must be at least 1"));
            }
        }
        if self.mode == ConditioningMode::Frame && self.expand_dim == 0 {
            problems.push("expand_dim must be at least 1 in frame mode".to_string());
        }
        if self.classes < 2 || self.classes > 256 {
            problems.push(format!("classes {} must lie in [2, 256]", self.classes));
        }
        if self.fine_frame != 1 {
            problems.push(format!("fine_frame {} must be 1: the fine tier predicts single samples", self.fine_frame));
        }
        if !(self.coarse_frame > self.mid_frame && self.mid_frame > self.fine_frame) {
            problems.push(format!(
                "frame sizes {}/{}/{} must be strictly decreasing",
                self.coarse_frame, self.mid_frame, self.fine_frame
            ));
        }
        if self.mid_frame > 0 && self.coarse_frame % self.mid_frame != 0 {
            problems.push(format!("coarse_frame {} is not divisible by mid_frame {}", self.coarse_frame, self.mid_frame));
        }
        if self.fine_frame > 0 && self.mid_frame % self.fine_frame != 0 {
            problems.push(format!("mid_frame {} is not divisible by fine_frame {}", self.mid_frame, self.fine_frame));
        }
        if self.coarse_frame > 0 && self.step % self.coarse_frame != 0 {
            problems.push(format!("step {} is not divisible by coarse_frame {}", self.step, self.coarse_frame));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Every parameter's name and shape, derived from the config alone.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        type Specs = Vec<(String, Vec<usize>)>;
        fn linear(out: &mut Specs, name: &str, i: usize, o: usize) {
            out.push((format!("{name}.weight"), vec![i, o]));
            out.push((format!("{name}.bias"), vec![o]));
        }
        fn gru(out: &mut Specs, name: &str, i: usize, h: usize) {
            out.push((format!("{name}.w_x"), vec![i, 3 * h]));
            out.push((format!("{name}.u_zr"), vec![h, 2 * h]));
            out.push((format!("{name}.u_h"), vec![h, h]));
            out.push((format!("{name}.bias"), vec![3 * h]));
        }
        let mut out = Vec::new();
        match self.mode {
            ConditioningMode::Frame => linear(&mut out, "frame_expand", self.coarse_frame, self.expand_dim),
            _ => gru(&mut out, "encoder", self.feature_dim, self.coarse_hidden),
        }
        gru(&mut out, "coarse", self.coarse_input_dim(), self.coarse_hidden);
        linear(&mut out, "coarse_up", self.coarse_hidden, self.coarse_ratio() * self.mid_hidden);
        gru(&mut out, "mid", self.mid_input_dim(), self.mid_hidden);
        linear(&mut out, "mid_up", self.mid_hidden, self.mid_ratio() * self.fine_hidden);
        out.push(("fine_embed.table".to_string(), vec![self.classes, self.embedding_dim]));
        linear(&mut out, "fine_in", self.fine_input_dim(), self.fine_hidden);
        linear(&mut out, "fine_hidden", self.fine_hidden, self.fine_hidden);
        linear(&mut out, "fine_out", self.fine_hidden, self.classes);
        out
    }
}

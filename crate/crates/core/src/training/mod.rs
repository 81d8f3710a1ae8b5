//! Teacher-forced training with truncated backpropagation through time.

mod trainer;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClipData, FeatureTrack, Split};
use crate::error::{Error, Result};
use crate::generator::{ConditioningMode, GeneratorModel, EVAL_CHUNK};

pub use trainer::{train, RunMetadata, TrainCursor, Trainer};

/// Which categories a run trains on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryFilter {
    All,
    Only(Vec<usize>),
}

impl CategoryFilter {
    pub fn admits(&self, category: usize) -> bool {
        match self {
            CategoryFilter::All => true,
            CategoryFilter::Only(keep) => keep.contains(&category),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// TBPTT chunk in samples.
    pub chunk_len: usize,
    pub epochs: usize,
    /// Optimizer-step budget; the run stops at whichever limit comes first.
    pub max_steps: Option<usize>,
    /// Seeds the per-epoch clip order.
    pub seed: u64,
    pub categories: CategoryFilter,
    /// Evaluate train and test loss every this many epochs (0: never).
    pub eval_every: usize,
    /// Caps the global L2 norm of each step's gradient.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            chunk_len: 512,
            epochs: 1,
            max_steps: None,
            seed: 0,
            categories: CategoryFilter::All,
            eval_every: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// Minutes-scale settings for the desk profile. Small batches give the
    /// encoder enough optimizer steps to learn from the few samples where
    /// the visual features matter. Seq and flow models also clip: without
    /// it a single loss spike can leave the coarse tier ignoring its
    /// initial state, and the encoder then never gets a gradient again.
    /// Frame models learn gate timing from rare large gradients, which
    /// clipping would blunt.
    pub fn desk(mode: ConditioningMode) -> Self {
        let base = TrainConfig { learning_rate: 3e-3, batch_size: 2, epochs: 12, ..TrainConfig::default() };
        if mode.uses_encoder() {
            TrainConfig { epochs: 24, grad_clip: Some(1.0), ..base }
        } else {
            base
        }
    }

    /// Checks the config against the model and the clip length it will see.
    pub fn validate(&self, model: &GeneratorModel, clip_len: usize) -> Result<()> {
        let cf = model.config().coarse_frame;
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                problems.push(format!("grad_clip {c} must be positive"));
            }
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.chunk_len % cf != 0 {
            problems.push(format!("chunk_len {} is not a multiple of coarse frame {cf}", self.chunk_len));
        }
        if self.chunk_len < 2 * cf {
            problems.push(format!("chunk_len {} must cover at least two coarse frames ({})", self.chunk_len, 2 * cf));
        }
        if self.chunk_len > clip_len {
            problems.push(format!("chunk_len {} exceeds clip length {clip_len}", self.chunk_len));
        }
        if clip_len % cf != 0 {
            problems.push(format!("clip length {clip_len} is not a multiple of coarse frame {cf}"));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            problems.push("either epochs or max_steps must allow at least one step".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Whether a run saved under `self` can continue under `other`; only the
    /// budgets may change.
    pub fn resumable_as(&self, other: &TrainConfig) -> bool {
        let strip = |c: &TrainConfig| TrainConfig { epochs: 0, max_steps: None, ..c.clone() };
        strip(self) == strip(other)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    /// Loss of one optimizer step's chunk, before the update.
    Step,
    /// Running mean over every chunk of an epoch.
    Epoch,
    /// Full pass over a split with fixed parameters.
    Eval,
}

/// One line of the training log. Losses are mean cross-entropy in nats
/// per predicted sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub kind: RecordKind,
    pub step: usize,
    pub epoch: usize,
    pub split: Split,
    pub loss_nats: f64,
    pub positions: usize,
    /// Seconds since the run started; excluded from reproducibility checks.
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub model: crate::generator::GeneratorConfig,
    pub train_clips: usize,
    pub test_clips: usize,
    pub records: Vec<TrainRecord>,
    pub wall_clock_s: f64,
}

impl TrainReport {
    pub fn to_json_lines(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
    }

    pub fn last(&self, kind: RecordKind, split: Split) -> Option<&TrainRecord> {
        self.records.iter().rev().find(|r| r.kind == kind && r.split == split)
    }

    pub fn steps(&self) -> usize {
        self.records.iter().filter(|r| r.kind == RecordKind::Step).count()
    }

    /// Equality ignoring wall-clock fields.
    pub fn same_trajectory(&self, other: &TrainReport) -> bool {
        let strip = |r: &TrainReport| {
            let mut r = r.clone();
            r.wall_clock_s = 0.0;
            r.records.iter_mut().for_each(|x| x.elapsed_s = 0.0);
            r
        };
        strip(self) == strip(other)
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "{} steps over {} train / {} test clips in {:.1} s ({} mode)\n",
            self.steps(),
            self.train_clips,
            self.test_clips,
            self.wall_clock_s,
            self.model.mode
        );
        if let Some(r) = self.last(RecordKind::Epoch, Split::Train) {
            out += &format!("last epoch {}: running train loss {:.4} nats/sample\n", r.epoch, r.loss_nats);
        }
        for split in [Split::Train, Split::Test] {
            if let Some(r) = self.last(RecordKind::Eval, split) {
                out += &format!("eval {split}: {:.4} nats/sample over {} positions\n", r.loss_nats, r.positions);
            }
        }
        out
    }
}

/// Mean cross-entropy and the number of positions it averages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSummary {
    pub mean_nats: f64,
    pub positions: usize,
}

/// Rows evaluated together on one tape.
const EVAL_BATCH: usize = 8;

/// Mean cross-entropy over every predicted position of `clips`, without
/// touching parameters. Batches run in parallel; sums are reduced in clip
/// order.
pub fn evaluate_clips(model: &GeneratorModel, clips: &[&ClipData]) -> Result<LossSummary> {
    if clips.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let feats: Vec<FeatureTrack> = clips.iter().map(|c| model.conditioning_for(c)).collect::<Result<_>>()?;
    let batches: Vec<Vec<usize>> = (0..clips.len()).collect::<Vec<_>>().chunks(EVAL_BATCH).map(<[usize]>::to_vec).collect();
    let per_batch: Vec<Result<Vec<f64>>> = batches
        .par_iter()
        .map(|idx| {
            let len = clips[idx[0]].audio.len();
            if idx.iter().any(|&i| clips[i].audio.len() != len) {
                // mixed lengths are scored one row at a time
                return idx.iter().map(|&i| model.log_likelihood(clips[i].audio.codes(), &feats[i])).collect();
            }
            let rows: Vec<&[u8]> = idx.iter().map(|&i| clips[i].audio.codes()).collect();
            let tracks: Vec<&FeatureTrack> = idx.iter().map(|&i| &feats[i]).collect();
            model.log_likelihood_batch(&rows, &tracks, EVAL_CHUNK)
        })
        .collect();
    let mut total = 0.0;
    for ll in per_batch {
        total += ll?.iter().sum::<f64>();
    }
    let positions: usize = clips.iter().map(|c| model.predicted_positions(c.audio.len())).sum();
    Ok(LossSummary { mean_nats: -total / positions as f64, positions })
}

/// [`evaluate_clips`] over one split.
pub fn evaluate_loss(model: &GeneratorModel, clips: &[ClipData], split: Split) -> Result<LossSummary> {
    let chosen: Vec<&ClipData> = clips.iter().filter(|c| c.split == split).collect();
    if chosen.is_empty() {
        return Err(Error::Contract(format!("split {split} has no clips")));
    }
    evaluate_clips(model, &chosen)
}

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate_clips, RecordKind, TrainConfig, TrainRecord, TrainReport};
use crate::dataset::{ClipData, FeatureTrack, Split};
use crate::error::{Error, Result};
use crate::generator::{save_checkpoint, Checkpoint, GenerationState, GeneratorModel};
use crate::numerics::{backward, AdamConfig, AdamState, Tape};

/// Position of a run, saved with checkpoints so that a resumed run
/// continues exactly where the interrupted one stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCursor {
    pub step: usize,
    pub epoch: usize,
    /// Batch index within the epoch's order.
    pub batch: usize,
    /// Sample offset of the next chunk within the current batch's clips.
    pub offset: usize,
    carried: Option<GenerationState>,
    epoch_ce: f64,
    epoch_positions: usize,
    records: Vec<TrainRecord>,
    elapsed_s: f64,
    data_fingerprint: u64,
}

/// What a training checkpoint's metadata string holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub train: TrainConfig,
    /// Free-form record of how the run was launched.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

impl RunMetadata {
    pub fn of(checkpoint: &Checkpoint) -> Result<RunMetadata> {
        serde_json::from_str(&checkpoint.metadata).map_err(|e| Error::Checkpoint(format!("metadata is not a training record: {e}")))
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    provenance: serde_json::Value,
    model: GeneratorModel,
    optimizer: AdamState,
    cursor: TrainCursor,
    train: Vec<&'a ClipData>,
    test: Vec<&'a ClipData>,
    train_feats: Vec<FeatureTrack>,
    clip_len: usize,
    started: Instant,
}

fn fingerprint(clips: &[&ClipData]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for c in clips {
        eat(c.id.as_bytes());
        eat(c.audio.codes());
        for v in c.appearance.values() {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    h
}

impl<'a> Trainer<'a> {
    /// Selects the train and test clips admitted by the category filter and
    /// validates everything before the first step.
    pub fn new(model: GeneratorModel, clips: &'a [ClipData], cfg: TrainConfig) -> Result<Self> {
        let optimizer = AdamState::new(AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() }, model.params());
        Self::assemble(model, optimizer, None, clips, cfg, serde_json::Value::Null)
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(checkpoint: Checkpoint, clips: &'a [ClipData], cfg: TrainConfig) -> Result<Self> {
        let saved = RunMetadata::of(&checkpoint)?;
        if !saved.train.resumable_as(&cfg) {
            return Err(Error::Config("training config differs from the checkpointed run beyond its step budget".into()));
        }
        let optimizer = checkpoint.optimizer.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let text = checkpoint.cursor.ok_or_else(|| Error::Checkpoint("checkpoint has no training cursor".into()))?;
        let cursor: TrainCursor = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("cursor does not parse: {e}")))?;
        Self::assemble(checkpoint.model, optimizer, Some(cursor), clips, cfg, saved.provenance)
    }

    fn assemble(
        model: GeneratorModel,
        optimizer: AdamState,
        cursor: Option<TrainCursor>,
        clips: &'a [ClipData],
        cfg: TrainConfig,
        provenance: serde_json::Value,
    ) -> Result<Self> {
        model.audit_shapes()?;
        let pick = |split: Split| -> Vec<&'a ClipData> {
            clips.iter().filter(|c| c.split == split && cfg.categories.admits(c.category)).collect()
        };
        let train = pick(Split::Train);
        let test = pick(Split::Test);
        if train.is_empty() {
            return Err(Error::Contract("no training clips pass the category filter".into()));
        }
        let clip_len = train[0].audio.len();
        if let Some(c) = train.iter().chain(&test).find(|c| c.audio.len() != clip_len) {
            return Err(Error::Data(format!("clip {} has {} samples, expected {clip_len}", c.id, c.audio.len())));
        }
        cfg.validate(&model, clip_len)?;
        let train_feats: Vec<FeatureTrack> = train.iter().map(|c| model.conditioning_for(c)).collect::<Result<_>>()?;
        for c in &test {
            model.conditioning_for(c)?;
        }
        let data_fingerprint = fingerprint(&train);
        let cursor = match cursor {
            Some(c) if c.data_fingerprint != data_fingerprint => {
                return Err(Error::Checkpoint("training clips differ from the checkpointed run".into()));
            }
            Some(c) => c,
            None => TrainCursor {
                step: 0,
                epoch: 0,
                batch: 0,
                offset: 0,
                carried: None,
                epoch_ce: 0.0,
                epoch_positions: 0,
                records: Vec::new(),
                elapsed_s: 0.0,
                data_fingerprint,
            },
        };
        Ok(Trainer { cfg, provenance, model, optimizer, cursor, train, test, train_feats, clip_len, started: Instant::now() })
    }

    /// Stored in every checkpoint this trainer writes.
    pub fn with_provenance(mut self, provenance: serde_json::Value) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn model(&self) -> &GeneratorModel {
        &self.model
    }

    pub fn cursor(&self) -> &TrainCursor {
        &self.cursor
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    fn elapsed(&self) -> f64 {
        self.cursor.elapsed_s + self.started.elapsed().as_secs_f64()
    }

    /// Clip indices of one epoch, shuffled by `(seed, epoch)`.
    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407));
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    fn batches_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    pub fn is_done(&self) -> bool {
        let epochs_done = self.cfg.epochs > 0 && self.cursor.epoch >= self.cfg.epochs;
        let steps_done = self.cfg.max_steps.is_some_and(|m| self.cursor.step >= m);
        epochs_done || steps_done
    }

    /// One optimizer step on the next TBPTT chunk. Returns the chunk's mean
    /// loss before the update, or `None` once the budget is spent.
    pub fn step(&mut self) -> Result<Option<f64>> {
        if self.is_done() {
            return Ok(None);
        }
        let order = self.epoch_order(self.cursor.epoch);
        let bs = self.cfg.batch_size;
        let batch: Vec<usize> = order[self.cursor.batch * bs..((self.cursor.batch + 1) * bs).min(order.len())].to_vec();
        let start = self.cursor.offset;
        let end = (start + self.cfg.chunk_len).min(self.clip_len);
        let rows: Vec<&[u8]> = batch.iter().map(|&i| &self.train[i].audio.codes()[start..end]).collect();
        let feats: Vec<&FeatureTrack> = batch.iter().map(|&i| &self.train_feats[i]).collect();

        let mut tape = Tape::new();
        let p = self.model.bind(&mut tape);
        let out = self.model.forward_teacher_forced(&mut tape, &p, &rows, &feats, self.cursor.carried.as_ref())?;
        let ce = tape.cross_entropy(out.logits, &out.targets)?;
        let loss = tape.mean(ce);
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::Data(format!("loss became {loss_value} at step {}", self.cursor.step)));
        }
        backward(&tape, loss, self.model.params_mut(), &p)?;
        if let Some(max_norm) = self.cfg.grad_clip {
            self.model.params_mut().clip_grad_norm(max_norm);
        }
        self.optimizer.step(self.model.params_mut())?;

        let positions = out.targets.len();
        let elapsed = self.elapsed();
        let c = &mut self.cursor;
        c.epoch_ce += loss_value * positions as f64;
        c.epoch_positions += positions;
        c.records.push(TrainRecord {
            kind: RecordKind::Step,
            step: c.step,
            epoch: c.epoch,
            split: Split::Train,
            loss_nats: loss_value,
            positions,
            elapsed_s: elapsed,
        });
        c.step += 1;
        if end < self.clip_len {
            c.offset = end;
            c.carried = Some(out.state);
        } else {
            c.offset = 0;
            c.carried = None;
            c.batch += 1;
            if c.batch == self.batches_per_epoch() {
                self.finish_epoch()?;
            }
        }
        Ok(Some(loss_value))
    }

    fn finish_epoch(&mut self) -> Result<()> {
        let elapsed = self.elapsed();
        let c = &mut self.cursor;
        c.records.push(TrainRecord {
            kind: RecordKind::Epoch,
            step: c.step,
            epoch: c.epoch,
            split: Split::Train,
            loss_nats: c.epoch_ce / c.epoch_positions as f64,
            positions: c.epoch_positions,
            elapsed_s: elapsed,
        });
        let epoch = c.epoch;
        c.epoch += 1;
        c.batch = 0;
        c.epoch_ce = 0.0;
        c.epoch_positions = 0;
        if self.cfg.eval_every > 0 && (epoch + 1) % self.cfg.eval_every == 0 {
            self.evaluate(epoch)?;
        }
        Ok(())
    }

    fn evaluate(&mut self, epoch: usize) -> Result<()> {
        for (split, clips) in [(Split::Train, &self.train), (Split::Test, &self.test)] {
            if clips.is_empty() {
                continue;
            }
            let loss = evaluate_clips(&self.model, clips)?;
            let record = TrainRecord {
                kind: RecordKind::Eval,
                step: self.cursor.step,
                epoch,
                split,
                loss_nats: loss.mean_nats,
                positions: loss.positions,
                elapsed_s: self.cursor.elapsed_s + self.started.elapsed().as_secs_f64(),
            };
            self.cursor.records.push(record);
        }
        Ok(())
    }

    /// Steps until the budget is spent.
    pub fn run(&mut self) -> Result<()> {
        while self.step()?.is_some() {}
        Ok(())
    }

    /// Steps until `step` optimizer steps have been taken in total, or the
    /// budget is spent.
    pub fn run_until(&mut self, step: usize) -> Result<()> {
        while self.cursor.step < step && self.step()?.is_some() {}
        Ok(())
    }

    pub fn report(&self) -> TrainReport {
        TrainReport {
            config: self.cfg.clone(),
            model: self.model.config().clone(),
            train_clips: self.train.len(),
            test_clips: self.test.len(),
            records: self.cursor.records.clone(),
            wall_clock_s: self.elapsed(),
        }
    }

    /// Saves model, optimizer and cursor; the run config and provenance go
    /// into the checkpoint metadata.
    pub fn checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut cursor = self.cursor.clone();
        cursor.elapsed_s = self.elapsed();
        let metadata = RunMetadata { train: self.cfg.clone(), provenance: self.provenance.clone() };
        let metadata = serde_json::to_string(&metadata).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let cursor = serde_json::to_string(&cursor).map_err(|e| Error::Checkpoint(format!("cursor: {e}")))?;
        save_checkpoint(path, &self.model, Some(&self.optimizer), &metadata, Some(&cursor))
    }

    pub fn into_model(self) -> GeneratorModel {
        self.model
    }
}

/// Trains `model` on the train split of `clips` until the budget is spent.
pub fn train(model: GeneratorModel, clips: &[ClipData], cfg: &TrainConfig) -> Result<(GeneratorModel, TrainReport)> {
    let mut trainer = Trainer::new(model, clips, cfg.clone())?;
    trainer.run()?;
    let report = trainer.report();
    Ok((trainer.into_model(), report))
}

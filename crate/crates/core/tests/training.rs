use foley_core::audio_io::QuantizedClip;
use foley_core::dataset::{synth_corpus, ClipData, Envelope, FeatureKind, FeatureTrack, Grid, Split, SynthConfig};
use foley_core::generator::{
    load_checkpoint, save_checkpoint, ConditioningMode, GenerationState, GeneratorConfig, GeneratorModel, SamplingMode,
};
use foley_core::numerics::{backward, Tape};
use foley_core::training::{evaluate_clips, evaluate_loss, train, CategoryFilter, RecordKind, TrainConfig, Trainer};
use foley_core::Error;

const LN_256: f64 = 5.545_177_444_479_562;

fn small_synth() -> SynthConfig {
    SynthConfig {
        categories: 2,
        grid: Grid { sample_rate: 8000, step: 8, clip_frames: 16 },
        feature_dim: 5,
        flow_dim: 2,
        envelope: Envelope::Gated { on_fraction: 0.5 },
        lead_in_samples: 4,
        ..SynthConfig::desk()
    }
}

fn corpus() -> Vec<ClipData> {
    synth_corpus(&small_synth(), 6, 2, 3).unwrap()
}

fn feature_dim(mode: ConditioningMode) -> usize {
    if mode == ConditioningMode::Flow {
        7
    } else {
        5
    }
}

fn tiny(mode: ConditioningMode, seed: u64) -> GeneratorModel {
    GeneratorModel::new(GeneratorConfig::tiny(mode, feature_dim(mode)), seed).unwrap()
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig { learning_rate: 1e-2, batch_size: 4, chunk_len: 32, epochs: 0, max_steps: Some(steps), seed: 9, ..TrainConfig::default() }
}

fn log_softmax(row: &[f64], target: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    row[target] - m - z.ln()
}

fn param_bits(model: &GeneratorModel) -> Vec<u64> {
    model.params().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn zero_output_layer_scores_exactly_uniform() {
    let clips = corpus();
    for mode in ConditioningMode::ALL {
        let mut model = tiny(mode, 1);
        model.zero_output_layer();
        for split in [Split::Train, Split::Test] {
            let loss = evaluate_loss(&model, &clips, split).unwrap();
            assert!((loss.mean_nats - LN_256).abs() < 1e-9, "{mode} {split}: {}", loss.mean_nats);
        }
    }
}

#[test]
fn evaluate_loss_is_the_mean_of_per_position_log_softmax() {
    let clips = corpus();
    for mode in ConditioningMode::ALL {
        let model = tiny(mode, 2);
        let mut total = 0.0;
        let mut positions = 0;
        for c in clips.iter().filter(|c| c.split == Split::Test) {
            let feats = model.conditioning_for(c).unwrap();
            let (logits, _) = model.teacher_forced_logits(c.audio.codes(), &feats, None).unwrap();
            let cf = model.config().coarse_frame;
            for (t, row) in logits.iter().enumerate() {
                total -= log_softmax(row, c.audio.codes()[cf + t] as usize);
            }
            positions += logits.len();
        }
        let got = evaluate_loss(&model, &clips, Split::Test).unwrap();
        assert_eq!(got.positions, positions);
        assert!((got.mean_nats - total / positions as f64).abs() < 1e-8, "{mode}");
    }
}

#[test]
fn evaluation_leaves_the_model_untouched() {
    let clips = corpus();
    let model = tiny(ConditioningMode::Seq, 3);
    let before = model.params().fingerprint();
    let a = evaluate_loss(&model, &clips, Split::Train).unwrap();
    let b = evaluate_loss(&model, &clips, Split::Train).unwrap();
    assert_eq!(a, b);
    assert_eq!(model.params().fingerprint(), before);
    assert!(model.params().iter().all(|(_, t)| t.grad().is_none()));
}

#[test]
fn evaluating_nothing_is_a_contract_error() {
    let model = tiny(ConditioningMode::Frame, 3);
    assert!(matches!(evaluate_clips(&model, &[]).unwrap_err(), Error::Contract(_)));
    let train_only: Vec<ClipData> = corpus().into_iter().filter(|c| c.split == Split::Train).collect();
    assert!(matches!(evaluate_loss(&model, &train_only, Split::Test).unwrap_err(), Error::Contract(_)));
}

#[test]
fn one_small_step_lowers_the_chunk_loss() {
    let clips = corpus();
    let mut improved = 0;
    for seed in 0..20 {
        let mode = ConditioningMode::ALL[seed as usize % 3];
        let model = tiny(mode, 100 + seed);
        let cfg = TrainConfig { learning_rate: 1e-3, batch_size: 1, max_steps: Some(1), seed, ..quick(1) };
        let mut trainer = Trainer::new(model.clone(), &clips, cfg.clone()).unwrap();
        let before = trainer.step().unwrap().unwrap();
        // re-run the same first chunk with the updated parameters
        let mut again = Trainer::new(trainer.into_model(), &clips, cfg).unwrap();
        let after = again.step().unwrap().unwrap();
        if after < before {
            improved += 1;
        }
    }
    assert!(improved >= 19, "{improved}/20 seeds improved");
}

#[test]
fn gradients_stop_at_the_carried_state() {
    let clips = corpus();
    let clip = clips.iter().find(|c| c.split == Split::Train).unwrap();
    for mode in ConditioningMode::ALL {
        let mut model = tiny(mode, 21);
        let feats = model.conditioning_for(clip).unwrap();
        let codes = clip.audio.codes();
        let (_, carried) = model.teacher_forced_logits(&codes[..64], &feats, None).unwrap();
        let second = &codes[64..];

        let chunk_loss = |m: &GeneratorModel, state: &GenerationState| -> f64 {
            let mut tape = Tape::new();
            let p = m.bind(&mut tape);
            let out = m.forward_teacher_forced(&mut tape, &p, &[second], &[&feats], Some(state)).unwrap();
            let ce = tape.cross_entropy(out.logits, &out.targets).unwrap();
            let loss = tape.mean(ce);
            tape.value(loss).data()[0]
        };

        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let out = model.forward_teacher_forced(&mut tape, &p, &[second], &[&feats], Some(&carried)).unwrap();
        let ce = tape.cross_entropy(out.logits, &out.targets).unwrap();
        let loss = tape.mean(ce);
        let reference = model.clone();
        backward(&tape, loss, model.params_mut(), &p).unwrap();

        // the finite difference holds the carried state fixed: it is the
        // truncated objective, and nothing upstream of the chunk moves
        let h = 1e-4;
        let mut checked = 0;
        for id in reference.params().ids() {
            let name = reference.params().name(id).to_string();
            let analytic = model.params().get(id).grad().unwrap().to_vec();
            for index in [0, reference.params().get(id).len() / 2] {
                let mut plus = reference.clone();
                plus.params_mut().get_mut(id).data_mut()[index] += h;
                let mut minus = reference.clone();
                minus.params_mut().get_mut(id).data_mut()[index] -= h;
                let numeric = (chunk_loss(&plus, &carried) - chunk_loss(&minus, &carried)) / (2.0 * h);
                let err = (numeric - analytic[index]).abs() / numeric.abs().max(analytic[index].abs()).max(1e-6);
                assert!(err < 1e-4, "{mode} {name}[{index}]: fd {numeric} vs autodiff {}", analytic[index]);
                checked += 1;
            }
        }
        assert!(checked >= 20);
        // the encoder only runs on a clip's first chunk
        if let Some(id) = reference.params().id_of("encoder.w_x") {
            assert!(model.params().get(id).grad().unwrap().iter().all(|&g| g == 0.0), "{mode}");
        }
    }
}

#[test]
fn training_is_deterministic() {
    let clips = corpus();
    for mode in ConditioningMode::ALL {
        let (a, ra) = train(tiny(mode, 5), &clips, &quick(12)).unwrap();
        let (b, rb) = train(tiny(mode, 5), &clips, &quick(12)).unwrap();
        assert!(ra.same_trajectory(&rb), "{mode}");
        assert_eq!(param_bits(&a), param_bits(&b));
        assert_eq!(ra.steps(), 12);
    }
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let clips = corpus();
    let dir = tempfile::tempdir().unwrap();
    for mode in ConditioningMode::ALL {
        let cfg = TrainConfig { eval_every: 1, ..quick(20) };
        let (whole, whole_report) = train(tiny(mode, 6), &clips, &cfg).unwrap();

        let path = dir.path().join(format!("{mode}.vsck"));
        let mut first = Trainer::new(tiny(mode, 6), &clips, cfg.clone()).unwrap();
        // 10 steps stops mid-clip, so the carried state must survive too
        first.run_until(10).unwrap();
        assert_ne!(first.cursor().offset, 0);
        first.checkpoint(&path).unwrap();
        drop(first);

        let mut second = Trainer::resume(load_checkpoint(&path).unwrap(), &clips, cfg.clone()).unwrap();
        second.run().unwrap();
        assert!(second.report().same_trajectory(&whole_report), "{mode}");
        assert_eq!(param_bits(second.model()), param_bits(&whole));
        let last = |r: &foley_core::training::TrainReport| r.records.iter().rev().find(|x| x.kind == RecordKind::Step).unwrap().loss_nats;
        assert_eq!(last(&second.report()).to_bits(), last(&whole_report).to_bits());
    }
}

#[test]
fn resume_rejects_other_configs_and_data() {
    let clips = corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.vsck");
    let mut t = Trainer::new(tiny(ConditioningMode::Seq, 6), &clips, quick(20)).unwrap();
    t.run_until(3).unwrap();
    t.checkpoint(&path).unwrap();

    // a longer budget is fine
    assert!(Trainer::resume(load_checkpoint(&path).unwrap(), &clips, quick(40)).is_ok());
    let other_lr = TrainConfig { learning_rate: 0.5, ..quick(20) };
    let err = Trainer::resume(load_checkpoint(&path).unwrap(), &clips, other_lr).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
    let other_data = synth_corpus(&small_synth(), 6, 2, 4).unwrap();
    let err = Trainer::resume(load_checkpoint(&path).unwrap(), &other_data, quick(20)).err().unwrap();
    assert!(matches!(err, Error::Checkpoint(_)));
    // a checkpoint without training state cannot be resumed
    let bare = dir.path().join("bare.vsck");
    save_checkpoint(&bare, t.model(), None, "", None).unwrap();
    assert!(Trainer::resume(load_checkpoint(&bare).unwrap(), &clips, quick(20)).is_err());
}

#[test]
fn checkpointed_model_scores_identically() {
    let clips = corpus();
    let dir = tempfile::tempdir().unwrap();
    let (model, _) = train(tiny(ConditioningMode::Flow, 8), &clips, &quick(6)).unwrap();
    let path = dir.path().join("m.vsck");
    save_checkpoint(&path, &model, None, "", None).unwrap();
    let loaded = load_checkpoint(&path).unwrap().model;
    for split in [Split::Train, Split::Test] {
        let a = evaluate_loss(&model, &clips, split).unwrap();
        let b = evaluate_loss(&loaded, &clips, split).unwrap();
        assert_eq!(a.mean_nats.to_bits(), b.mean_nats.to_bits());
    }
}

#[test]
fn validation_lists_every_problem() {
    let clips = corpus();
    let bad = TrainConfig { learning_rate: -1.0, batch_size: 0, chunk_len: 6, epochs: 0, max_steps: None, grad_clip: Some(0.0), ..TrainConfig::default() };
    let err = Trainer::new(tiny(ConditioningMode::Frame, 1), &clips, bad).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
    let msg = err.to_string();
    for needle in ["learning_rate", "grad_clip", "batch_size", "multiple of coarse frame", "two coarse frames", "epochs or max_steps"] {
        assert!(msg.contains(needle), "{needle} missing from: {msg}");
    }
    let too_long = TrainConfig { chunk_len: 256, ..quick(1) };
    let msg = Trainer::new(tiny(ConditioningMode::Frame, 1), &clips, too_long).err().unwrap().to_string();
    assert!(msg.contains("exceeds clip length 128"), "{msg}");
}

#[test]
fn flow_model_needs_flow_features() {
    let mut clips = corpus();
    clips.iter_mut().for_each(|c| c.flow = None);
    let err = Trainer::new(tiny(ConditioningMode::Flow, 1), &clips, quick(1)).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
    // a seq model with the wrong width is a dimension mismatch at validation
    let wide = GeneratorModel::new(GeneratorConfig::tiny(ConditioningMode::Seq, 7), 1).unwrap();
    let msg = Trainer::new(wide, &clips, quick(1)).err().unwrap().to_string();
    assert!(msg.contains("expects 7-wide features, got 5"), "{msg}");
}

#[test]
fn category_filter_restricts_both_splits() {
    let clips = corpus();
    let cfg = TrainConfig { categories: CategoryFilter::Only(vec![1]), ..quick(2) };
    let (_, report) = train(tiny(ConditioningMode::Seq, 1), &clips, &cfg).unwrap();
    let count = |split: Split| clips.iter().filter(|c| c.split == split && c.category == 1).count();
    assert_eq!(report.train_clips, count(Split::Train));
    assert_eq!(report.test_clips, count(Split::Test));
    let none = TrainConfig { categories: CategoryFilter::Only(vec![7]), ..quick(2) };
    assert!(matches!(Trainer::new(tiny(ConditioningMode::Seq, 1), &clips, none).err().unwrap(), Error::Contract(_)));
}

#[test]
fn epochs_shuffle_and_log_per_epoch_losses() {
    let clips = corpus();
    let cfg = TrainConfig { epochs: 3, max_steps: None, eval_every: 1, ..quick(0) };
    let (_, report) = train(tiny(ConditioningMode::Frame, 4), &clips, &cfg).unwrap();
    let train_clips = clips.iter().filter(|c| c.split == Split::Train).count();
    // 128-sample clips in 32-sample chunks: 4 steps per batch
    assert_eq!(report.steps(), 3 * train_clips.div_ceil(4) * 4);
    let epochs: Vec<_> = report.records.iter().filter(|r| r.kind == RecordKind::Epoch).collect();
    assert_eq!(epochs.len(), 3);
    for e in &epochs {
        let steps: Vec<_> = report.records.iter().filter(|r| r.kind == RecordKind::Step && r.epoch == e.epoch).collect();
        let weighted: f64 = steps.iter().map(|r| r.loss_nats * r.positions as f64).sum();
        let positions: usize = steps.iter().map(|r| r.positions).sum();
        assert_eq!(e.positions, positions);
        assert!((e.loss_nats - weighted / positions as f64).abs() < 1e-12);
    }
    assert_eq!(report.records.iter().filter(|r| r.kind == RecordKind::Eval).count(), 6);
    let text = report.to_json_lines();
    assert_eq!(text.lines().count(), report.records.len());
    assert!(report.summary().contains("eval test"));
    let per_clip: usize = GeneratorModel::new(GeneratorConfig::tiny(ConditioningMode::Frame, 5), 0).unwrap().predicted_positions(128);
    assert_eq!(report.last(RecordKind::Eval, Split::Train).unwrap().positions, per_clip * train_clips);
}

#[test]
fn training_reduces_loss_well_below_uniform() {
    let clips = corpus();
    let cfg = TrainConfig { learning_rate: 1e-2, epochs: 30, max_steps: None, ..quick(0) };
    let (model, report) = train(tiny(ConditioningMode::Frame, 4), &clips, &cfg).unwrap();
    let loss = evaluate_loss(&model, &clips, Split::Train).unwrap().mean_nats;
    assert!(loss < LN_256 - 2.0, "train loss {loss}");
    let first = report.records.iter().find(|r| r.kind == RecordKind::Epoch).unwrap().loss_nats;
    let last = report.last(RecordKind::Epoch, Split::Train).unwrap().loss_nats;
    assert!(last < first);
}

/// The tiny layout with enough width to memorize a few short clips.
fn roomy(mode: ConditioningMode, seed: u64) -> GeneratorModel {
    let cfg = GeneratorConfig {
        coarse_hidden: 24,
        mid_hidden: 24,
        fine_hidden: 32,
        embedding_dim: 8,
        expand_dim: 8,
        ..GeneratorConfig::tiny(mode, feature_dim(mode))
    };
    GeneratorModel::new(cfg, seed).unwrap()
}

#[test]
fn initial_loss_is_near_uniform() {
    let clips = corpus();
    for mode in ConditioningMode::ALL {
        let mut t = Trainer::new(tiny(mode, 12), &clips, quick(1)).unwrap();
        let first = t.step().unwrap().unwrap();
        assert!((first - LN_256).abs() < 0.1, "{mode}: {first}");
    }
}

#[test]
fn a_single_clip_is_memorized() {
    let one: Vec<ClipData> = corpus().into_iter().filter(|c| c.split == Split::Train).take(1).collect();
    for mode in ConditioningMode::ALL {
        let cfg = TrainConfig { batch_size: 1, chunk_len: 128, ..quick(600) };
        let (model, _) = train(roomy(mode, 3), &one, &cfg).unwrap();
        let loss = evaluate_loss(&model, &one, Split::Train).unwrap().mean_nats;
        assert!(loss < 0.1, "{mode}: {loss}");
    }
}

#[test]
fn an_overfit_model_does_better_on_its_training_clips() {
    let clips = synth_corpus(&small_synth(), 3, 1, 5).unwrap();
    let cfg = TrainConfig { chunk_len: 128, ..quick(400) };
    let (model, _) = train(roomy(ConditioningMode::Frame, 2), &clips, &cfg).unwrap();
    let train_loss = evaluate_loss(&model, &clips, Split::Train).unwrap().mean_nats;
    let test_loss = evaluate_loss(&model, &clips, Split::Test).unwrap().mean_nats;
    assert!(train_loss < test_loss, "train {train_loss}, test {test_loss}");

    // its own training clip is likelier than noise of the same length
    let own = clips.iter().find(|c| c.split == Split::Train).unwrap();
    let feats = model.conditioning_for(own).unwrap();
    let noise: Vec<u8> = (0..own.audio.len()).map(|i| (i * 97 % 256) as u8).collect();
    let ll_own = model.log_likelihood(own.audio.codes(), &feats).unwrap();
    let ll_noise = model.log_likelihood(&noise, &feats).unwrap();
    assert!(ll_own > ll_noise, "{ll_own} vs {ll_noise}");
}

#[test]
fn argmax_sampling_after_fitting_a_constant_clip_repeats_the_constant() {
    let model = GeneratorModel::new(GeneratorConfig::desk(ConditioningMode::Frame), 4).unwrap();
    let grid = Grid::desk();
    let dim = model.config().feature_dim;
    let appearance = FeatureTrack::new(FeatureKind::Appearance, grid.clip_frames, dim, vec![0.5; grid.clip_frames * dim]).unwrap();
    let clip = ClipData {
        id: "constant".into(),
        category: 0,
        split: Split::Train,
        audio: QuantizedClip::new(vec![200; grid.clip_samples()], grid.sample_rate).unwrap(),
        appearance: appearance.clone(),
        flow: None,
    };
    let cfg = TrainConfig { learning_rate: 1e-2, batch_size: 1, chunk_len: 512, epochs: 0, max_steps: Some(40), ..TrainConfig::default() };
    let (model, _) = train(model, std::slice::from_ref(&clip), &cfg).unwrap();
    let out = model.sample_autoregressive(&appearance, 800, SamplingMode::Argmax, 0).unwrap();
    // the first coarse frame follows silence rather than the constant
    let cf = model.config().coarse_frame;
    assert!(out.codes()[cf..].iter().all(|&c| c == 200), "{:?}", &out.codes()[..32]);
}

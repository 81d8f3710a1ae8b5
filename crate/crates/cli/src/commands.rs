use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use foley_core::audio_io::{dequantize, write_wav};
use foley_core::curation::{curated_manifest, filter_and_merge, load_annotations, manifest_stats};
use foley_core::dataset::{load_features, load_split, write_synth_corpus, ClipData, FeatureTrack, Manifest, Split};
use foley_core::evaluation::{run_retrieval, LikelihoodScorer, ModelSet};
use foley_core::generator::{load_checkpoint, GeneratorModel, SamplingMode};
use foley_core::training::{evaluate_clips, CategoryFilter, RecordKind, RunMetadata, TrainConfig, Trainer};
use foley_core::{Error, Result};
use serde::Serialize;

use crate::config::{Provenance, RunConfig};

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// `out.wav` → `out.wav.provenance.json`
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".provenance.json");
    PathBuf::from(name)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn parent_of(path: &Path) -> PathBuf {
    path.parent().filter(|p| !p.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

#[derive(Serialize)]
struct WithProvenance<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: T,
}

pub fn synth_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let synth = cfg.synth_config();
    let s = &cfg.synth;
    let manifest = write_synth_corpus(out, &synth, s.clips_per_category, s.test_per_category, cfg.seed)?;
    write_json(&out.join("provenance.json"), &Provenance::new("synth-data", cfg))?;
    if manifest.records.is_empty() {
        eprintln!("warning: clips_per_category is 0; wrote an empty manifest");
    }
    println!("wrote {} clips in {} categories to {}", manifest.records.len(), manifest.categories.len(), out.display());
    Ok(())
}

pub fn curate(cfg: &RunConfig, annotations: &Path, out: &Path) -> Result<()> {
    let rows = load_annotations(annotations)?;
    let videos = filter_and_merge(&rows, cfg.curate.segment_s)?;
    let manifest = curated_manifest(&videos, parent_of(out));
    manifest.save(out)?;
    write_json(&sidecar(out), &Provenance::new("curate", cfg))?;
    println!("kept {} videos from {} annotation rows", videos.len(), rows.len());
    if !videos.is_empty() {
        print!("{}", manifest_stats(&manifest)?.summary());
    }
    Ok(())
}

pub fn stats(cfg: &RunConfig, manifest: &Path, out: Option<&Path>) -> Result<()> {
    let manifest = Manifest::load(manifest)?;
    let stats = manifest_stats(&manifest)?;
    print!("{}", stats.summary());
    if let Some(out) = out {
        let prov = Provenance::new("stats", cfg);
        write_json(out, &WithProvenance { provenance: &prov, body: &stats })?;
    }
    Ok(())
}

fn load_all(cfg: &RunConfig, manifest: &Manifest) -> Result<Vec<ClipData>> {
    let grid = cfg.grid();
    let mut clips = load_split(manifest, Split::Train, &grid)?;
    clips.extend(load_split(manifest, Split::Test, &grid)?);
    Ok(clips)
}

pub struct TrainArgs<'a> {
    pub manifest: &'a Path,
    pub out: &'a Path,
    /// Category names; empty means every category.
    pub categories: &'a [String],
    pub all_categories: bool,
    pub resume: Option<&'a Path>,
}

struct Run<'a> {
    name: String,
    trainer: Trainer<'a>,
}

pub fn train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let manifest = Manifest::load(args.manifest)?;
    let clips = load_all(cfg, &manifest)?;
    let base = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let prov = Provenance::new("train", cfg);

    let mut groups: Vec<(String, CategoryFilter)> = Vec::new();
    if args.all_categories {
        if !args.categories.is_empty() {
            return Err(Error::Config("--all-categories and --category exclude each other".into()));
        }
        groups.push(("all".into(), CategoryFilter::All));
    } else {
        let names: Vec<String> = if args.categories.is_empty() { manifest.categories.clone() } else { args.categories.to_vec() };
        for name in names {
            let index = manifest
                .categories
                .iter()
                .position(|c| *c == name)
                .ok_or_else(|| Error::Config(format!("category {name:?} is not in the manifest ({:?})", manifest.categories)))?;
            groups.push((name, CategoryFilter::Only(vec![index])));
        }
    }
    if args.resume.is_some() && groups.len() != 1 {
        return Err(Error::Config(format!("--resume continues one run, but {} would be trained", groups.len())));
    }

    // build every trainer first: each one validates its data and config
    let mut runs = Vec::new();
    let mut problems = Vec::new();
    for (name, filter) in groups {
        let tc = TrainConfig { categories: filter, ..base.clone() };
        let built = match args.resume {
            Some(path) => load_checkpoint(path).and_then(|c| Trainer::resume(c, &clips, tc)),
            None => GeneratorModel::new(cfg.model(), cfg.seed).and_then(|m| Trainer::new(m, &clips, tc)),
        };
        match built {
            Ok(t) => runs.push(Run { name, trainer: t.with_provenance(prov.to_value()) }),
            Err(e @ Error::Io { .. }) => return Err(e),
            Err(e) => problems.push(format!("{name}: {e}")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }

    create_dir(args.out)?;
    for run in &mut runs {
        let label = run.name.clone();
        let mut epoch = run.trainer.cursor().epoch;
        while run.trainer.step()?.is_some() {
            if run.trainer.cursor().epoch != epoch {
                epoch = run.trainer.cursor().epoch;
                let report = run.trainer.report();
                for r in report.records.iter().rev().take_while(|r| r.kind != RecordKind::Step).collect::<Vec<_>>().into_iter().rev() {
                    eprintln!("[{label}] epoch {} step {} {:?} {}: {:.4} nats", r.epoch, r.step, r.kind, r.split, r.loss_nats);
                }
            }
        }
        let ckpt = args.out.join(format!("{}.vsck", run.name));
        run.trainer.checkpoint(&ckpt)?;
        let report = run.trainer.report();
        write_json(&args.out.join(format!("{}.report.json", run.name)), &WithProvenance { provenance: &prov, body: &report })?;
        let last = report.records.iter().rev().find(|r| r.kind == RecordKind::Step).map_or(f64::NAN, |r| r.loss_nats);
        print!("[{label}] {}", report.summary());
        println!("[{label}] final step loss {last:.6} nats; checkpoint {}", ckpt.display());
    }
    Ok(())
}

pub struct GenerateArgs<'a> {
    pub checkpoint: &'a Path,
    pub features: &'a Path,
    pub flow: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn generate(cfg: &RunConfig, args: &GenerateArgs) -> Result<()> {
    let model = load_checkpoint(args.checkpoint)?.model;
    let appearance = load_features(args.features)?;
    let feats = match args.flow {
        Some(p) => FeatureTrack::concat(&appearance, &load_features(p)?)?,
        None => appearance,
    };
    model.check_features(&feats)?;
    let rate = model.config().sample_rate as f64;
    let n = (cfg.generate.duration_s * rate).round() as usize;
    if n == 0 {
        return Err(Error::Config(format!("duration {} s is under one sample", cfg.generate.duration_s)));
    }
    let mode = if cfg.generate.temperature == 0.0 { SamplingMode::Argmax } else { SamplingMode::Temperature(cfg.generate.temperature) };
    let clip = model.sample_autoregressive(&feats, n, mode, cfg.seed)?;
    write_wav(args.out, &dequantize(&clip))?;
    write_json(&sidecar(args.out), &Provenance::new("generate", cfg))?;
    println!("wrote {n} samples ({} conditioning) to {}", model.config().mode, args.out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalKind {
    Loss,
    Retrieval,
}

struct Loaded {
    path: PathBuf,
    model: GeneratorModel,
    filter: CategoryFilter,
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<Loaded>> {
    if paths.is_empty() {
        return Err(Error::Config("eval needs at least one --checkpoint".into()));
    }
    if let Some(p) = paths.iter().find(|p| !p.exists()) {
        return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
    }
    paths
        .iter()
        .map(|p| {
            let ckpt = load_checkpoint(p)?;
            // checkpoints without a training record count as all-category models
            let filter = RunMetadata::of(&ckpt).map_or(CategoryFilter::All, |m| m.train.categories);
            Ok(Loaded { path: p.clone(), model: ckpt.model, filter })
        })
        .collect()
}

#[derive(Serialize)]
struct LossRow {
    checkpoint: String,
    split: Split,
    loss_nats: f64,
    positions: usize,
}

pub fn eval(cfg: &RunConfig, manifest: &Path, checkpoints: &[PathBuf], kind: EvalKind, out: Option<&Path>) -> Result<()> {
    let models = load_models(checkpoints)?;
    let manifest = Manifest::load(manifest)?;
    let clips = load_all(cfg, &manifest)?;
    if !clips.iter().any(|c| c.split == Split::Test) {
        return Err(Error::Data("the manifest has no test split".into()));
    }
    let prov = Provenance::new("eval", cfg);
    match kind {
        EvalKind::Loss => {
            let mut rows = Vec::new();
            for m in &models {
                for split in [Split::Train, Split::Test] {
                    let chosen: Vec<&ClipData> = clips.iter().filter(|c| c.split == split && m.filter.admits(c.category)).collect();
                    if chosen.is_empty() {
                        continue;
                    }
                    let loss = evaluate_clips(&m.model, &chosen)?;
                    rows.push(LossRow { checkpoint: m.path.display().to_string(), split, loss_nats: loss.mean_nats, positions: loss.positions });
                }
            }
            println!("checkpoint\tsplit\tloss_nats\tpositions");
            for r in &rows {
                println!("{}\t{}\t{:.4}\t{}", r.checkpoint, r.split, r.loss_nats, r.positions);
            }
            if let Some(out) = out {
                write_json(out, &WithProvenance { provenance: &prov, body: BTreeMap::from([("loss", &rows)]) })?;
            }
        }
        EvalKind::Retrieval => {
            let set = model_set(&models)?;
            let report = run_retrieval(&LikelihoodScorer { models: set }, &clips, &cfg.eval.top_k)?;
            println!("pool of {} test clips", report.pool_size);
            print!("{}", report.table());
            if let Some(out) = out {
                write_json(out, &WithProvenance { provenance: &prov, body: &report })?;
            }
        }
    }
    Ok(())
}

/// One all-category checkpoint, or one single-category checkpoint per
/// category.
fn model_set(models: &[Loaded]) -> Result<ModelSet<'_>> {
    if let [only] = models {
        if only.filter == CategoryFilter::All {
            return Ok(ModelSet::Shared(&only.model));
        }
    }
    let mut map = BTreeMap::new();
    for m in models {
        match &m.filter {
            CategoryFilter::Only(cats) if cats.len() == 1 => {
                if map.insert(cats[0], &m.model).is_some() {
                    return Err(Error::Config(format!("two checkpoints for category {}", cats[0])));
                }
            }
            _ => {
                return Err(Error::Config(format!(
                    "{} is not a single-category model; pass exactly one all-category checkpoint or one per category",
                    m.path.display()
                )))
            }
        }
    }
    Ok(ModelSet::PerCategory(map))
}

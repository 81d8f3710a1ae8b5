//! Cross-modal retrieval: each test video ranks every test audio by the
//! likelihood of the audio given the video.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::QuantizedClip;
use crate::dataset::{ClipData, FeatureTrack, Split};
use crate::error::{Error, Result};
use crate::generator::{GeneratorModel, EVAL_CHUNK};

/// Candidates scored together on one tape.
const SCORE_BATCH: usize = 8;

/// Log-likelihood of `candidate` given the query's conditioning features.
pub fn score_pair(model: &GeneratorModel, query_feats: &FeatureTrack, candidate: &QuantizedClip) -> Result<f64> {
    model.log_likelihood(candidate.codes(), query_feats)
}

/// One model for every category, or one per category (the query's category
/// picks the model).
pub enum ModelSet<'a> {
    Shared(&'a GeneratorModel),
    PerCategory(BTreeMap<usize, &'a GeneratorModel>),
}

impl ModelSet<'_> {
    fn for_category(&self, category: usize) -> Result<&GeneratorModel> {
        match self {
            ModelSet::Shared(m) => Ok(m),
            ModelSet::PerCategory(map) => map
                .get(&category)
                .copied()
                .ok_or_else(|| Error::Config(format!("no model for category {category}"))),
        }
    }
}

/// Scores every candidate for one query; higher is a better match.
pub trait Scorer: Sync {
    fn score(&self, query: &ClipData, query_index: usize, candidates: &[&ClipData]) -> Result<Vec<f64>>;
}

pub struct LikelihoodScorer<'a> {
    pub models: ModelSet<'a>,
}

impl Scorer for LikelihoodScorer<'_> {
    fn score(&self, query: &ClipData, _query_index: usize, candidates: &[&ClipData]) -> Result<Vec<f64>> {
        let model = self.models.for_category(query.category)?;
        let feats = model.conditioning_for(query)?;
        let mut scores = Vec::with_capacity(candidates.len());
        for group in candidates.chunks(SCORE_BATCH) {
            let len = group[0].audio.len();
            if group.iter().all(|c| c.audio.len() == len) {
                let rows: Vec<&[u8]> = group.iter().map(|c| c.audio.codes()).collect();
                let tracks = vec![&feats; group.len()];
                scores.extend(model.log_likelihood_batch(&rows, &tracks, EVAL_CHUNK)?);
            } else {
                for c in group {
                    scores.push(score_pair(model, &feats, &c.audio)?);
                }
            }
        }
        Ok(scores)
    }
}

/// Control that ignores the data: uniform scores from `(seed, query)`.
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score(&self, _query: &ClipData, query_index: usize, candidates: &[&ClipData]) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (query_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Ok(candidates.iter().map(|_| rng.gen::<f64>()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Category,
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub level: Level,
    pub k: usize,
    pub accuracy: f64,
    /// Expected accuracy of a random ranking over the whole pool.
    pub chance_pool: f64,
    /// Instance chance if only the query's own category were pooled;
    /// equal to `chance_pool` for category metrics.
    pub chance_within_category: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub id: String,
    pub category: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub category: usize,
    /// Every pool candidate, best first.
    pub ranking: Vec<Ranked>,
}

impl QueryResult {
    pub fn instance_rank(&self) -> usize {
        self.ranking.iter().position(|r| r.id == self.query_id).expect("the query's own audio is in the pool")
    }

    fn hit(&self, level: Level, k: usize) -> bool {
        let top = &self.ranking[..k.min(self.ranking.len())];
        match level {
            Level::Category => top.iter().any(|r| r.category == self.category),
            Level::Instance => top.iter().any(|r| r.id == self.query_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub pool_size: usize,
    pub metrics: Vec<Metric>,
    pub queries: Vec<QueryResult>,
}

impl RetrievalReport {
    pub fn accuracy(&self, level: Level, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.level == level && m.k == k).map(|m| m.accuracy)
    }

    /// `metric  k  value  chance_pool  chance_within_category` rows.
    pub fn table(&self) -> String {
        let mut out = String::from("metric\tk\tvalue\tchance_pool\tchance_within_category\n");
        for m in &self.metrics {
            let name = match m.level {
                Level::Category => "category_top",
                Level::Instance => "instance_top",
            };
            out += &format!("{name}\t{}\t{:.4}\t{:.4}\t{:.4}\n", m.k, m.accuracy, m.chance_pool, m.chance_within_category);
        }
        out
    }
}

/// `P(at least one of n_good in a uniformly random k-subset of n)`.
fn chance_any(n: usize, n_good: usize, k: usize) -> f64 {
    let k = k.min(n);
    // 1 − C(n − g, k) / C(n, k) as a running product
    let mut miss = 1.0;
    for i in 0..k {
        miss *= (n - n_good).saturating_sub(i) as f64 / (n - i) as f64;
    }
    1.0 - miss
}

fn rank(ids: &[&ClipData], scores: Vec<f64>) -> Result<Vec<Ranked>> {
    if let Some((c, s)) = ids.iter().zip(&scores).find(|(_, s)| !s.is_finite()) {
        return Err(Error::Data(format!("score {s} for candidate {}", c.id)));
    }
    let mut ranking: Vec<Ranked> =
        ids.iter().zip(scores).map(|(c, score)| Ranked { id: c.id.clone(), category: c.category, score }).collect();
    ranking.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.id.cmp(&b.id)));
    Ok(ranking)
}

/// Queries every test clip's video against the pool of all test audios.
pub fn run_retrieval(scorer: &dyn Scorer, clips: &[ClipData], ks: &[usize]) -> Result<RetrievalReport> {
    let pool: Vec<&ClipData> = clips.iter().filter(|c| c.split == Split::Test).collect();
    run_retrieval_on(scorer, &pool, ks)
}

/// As [`run_retrieval`] over an explicit pool; every pool clip is also a query.
pub fn run_retrieval_on(scorer: &dyn Scorer, pool: &[&ClipData], ks: &[usize]) -> Result<RetrievalReport> {
    if pool.is_empty() {
        return Err(Error::Contract("retrieval needs a non-empty test split".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Contract(format!("top-k list {ks:?} must be non-empty and positive")));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = pool.iter().find(|c| !seen.insert(c.id.as_str())) {
        return Err(Error::Data(format!("clip id {} appears twice in the pool", dup.id)));
    }
    let queries: Vec<QueryResult> = pool
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let scores = scorer.score(q, qi, pool)?;
            if scores.len() != pool.len() {
                return Err(Error::Contract(format!("scorer returned {} scores for {} candidates", scores.len(), pool.len())));
            }
            Ok(QueryResult { query_id: q.id.clone(), category: q.category, ranking: rank(pool, scores)? })
        })
        .collect::<Result<_>>()?;

    let n = pool.len();
    let mut per_category: BTreeMap<usize, usize> = BTreeMap::new();
    for c in pool {
        *per_category.entry(c.category).or_default() += 1;
    }
    let mut metrics = Vec::new();
    for level in [Level::Category, Level::Instance] {
        for &k in ks {
            let hits = queries.iter().filter(|q| q.hit(level, k)).count();
            let (pool_chance, within): (f64, f64) = queries
                .iter()
                .map(|q| {
                    let same = per_category[&q.category];
                    match level {
                        Level::Category => {
                            let c = chance_any(n, same, k);
                            (c, c)
                        }
                        Level::Instance => (chance_any(n, 1, k), chance_any(same, 1, k)),
                    }
                })
                .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
            let q = queries.len() as f64;
            metrics.push(Metric {
                level,
                k,
                accuracy: hits as f64 / q,
                chance_pool: pool_chance / q,
                chance_within_category: within / q,
            });
        }
    }
    Ok(RetrievalReport { pool_size: n, metrics, queries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chance_levels() {
        assert!((chance_any(1280, 128, 1) - 0.1).abs() < 1e-12);
        assert!((chance_any(128, 1, 1) - 1.0 / 128.0).abs() < 1e-12);
        assert!((chance_any(10, 1, 5) - 0.5).abs() < 1e-12);
        assert_eq!(chance_any(4, 4, 1), 1.0);
        assert_eq!(chance_any(4, 1, 9), 1.0);
    }
}

//! Crowd-vote aggregation and segment merging for dataset cleaning.
//!
//! Annotation files are tab-separated with a header line:
//!
//! ```text
//! video_id	category	segment	modality	v1	v2	v3
//! yt_abc	dog	0	audio	yes	sort_of	yes
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClipRecord, Manifest, Split};
use crate::error::{Error, Result};

pub const ANNOTATION_COLUMNS: [&str; 7] = ["video_id", "category", "segment", "modality", "v1", "v2", "v3"];

/// Ordinal crowd label, ordered `No < SortOf < Yes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    No,
    SortOf,
    Yes,
}

impl Vote {
    pub const ALL: [Vote; 3] = [Vote::No, Vote::SortOf, Vote::Yes];

    pub fn parse(s: &str) -> Option<Vote> {
        match s.to_ascii_lowercase().as_str() {
            "yes" => Some(Vote::Yes),
            "sort_of" | "sortof" | "sort of" => Some(Vote::SortOf),
            "no" => Some(Vote::No),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Vote::Yes => "yes",
            Vote::SortOf => "sort_of",
            Vote::No => "no",
        }
    }
}

impl fmt::Display for Vote {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub fn parse(s: &str) -> Option<Modality> {
        match s.to_ascii_lowercase().as_str() {
            "audio" => Some(Modality::Audio),
            "visual" | "video" => Some(Modality::Visual),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub video_id: String,
    pub category: String,
    pub segment: usize,
    pub modality: Modality,
    pub votes: [Vote; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedVideo {
    pub source_id: String,
    pub category: String,
    /// First merged segment.
    pub start_segment: usize,
    /// Last merged segment, inclusive.
    pub end_segment: usize,
    pub duration_s: f64,
}

impl CuratedVideo {
    pub fn segments(&self) -> usize {
        self.end_segment - self.start_segment + 1
    }

    pub fn id(&self) -> String {
        format!("{}_{}-{}", self.source_id, self.start_segment, self.end_segment)
    }
}

/// Majority label of three votes; with three distinct votes, the ordinal
/// median `SortOf`.
pub fn aggregate_votes(votes: &[Vote]) -> Result<Vote> {
    if votes.len() != 3 {
        return Err(Error::Contract(format!("expected 3 votes, got {}", votes.len())));
    }
    for v in Vote::ALL {
        if votes.iter().filter(|&&x| x == v).count() >= 2 {
            return Ok(v);
        }
    }
    Ok(Vote::SortOf)
}

/// Segment length used by the source annotations.
pub const SEGMENT_SECONDS: f64 = 2.0;

/// Keeps segments where neither modality's aggregate is `No` and merges
/// maximal runs of kept segments into videos. Videos come out in order of
/// first appearance, runs in segment order.
pub fn filter_and_merge(annotations: &[SegmentAnnotation], segment_s: f64) -> Result<Vec<CuratedVideo>> {
    if !(segment_s > 0.0 && segment_s.is_finite()) {
        return Err(Error::Contract(format!("segment length {segment_s} must be positive")));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut by_video: HashMap<&str, Vec<&SegmentAnnotation>> = HashMap::new();
    for a in annotations {
        let entry = by_video.entry(a.video_id.as_str()).or_insert_with(|| {
            order.push(a.video_id.as_str());
            Vec::new()
        });
        entry.push(a);
    }
    let per_video: Vec<Result<Vec<CuratedVideo>>> =
        order.par_iter().map(|id| merge_video(id, &by_video[id], segment_s)).collect();
    let mut out = Vec::new();
    for v in per_video {
        out.extend(v?);
    }
    Ok(out)
}

fn merge_video(id: &str, rows: &[&SegmentAnnotation], segment_s: f64) -> Result<Vec<CuratedVideo>> {
    let category = &rows[0].category;
    if let Some(r) = rows.iter().find(|r| &r.category != category) {
        return Err(Error::Data(format!("video {id} is labeled both {category} and {}", r.category)));
    }
    let mut labels: BTreeMap<(usize, Modality), Vote> = BTreeMap::new();
    for r in rows {
        if labels.insert((r.segment, r.modality), aggregate_votes(&r.votes)?).is_some() {
            return Err(Error::Data(format!("video {id} segment {} has two {} rows", r.segment, r.modality.as_str())));
        }
    }
    let segments = rows.iter().map(|r| r.segment).max().expect("non-empty") + 1;
    let mut keep = Vec::with_capacity(segments);
    for s in 0..segments {
        let mut pass = true;
        for m in [Modality::Audio, Modality::Visual] {
            match labels.get(&(s, m)) {
                Some(&v) => pass &= v != Vote::No,
                None => return Err(Error::Data(format!("video {id} segment {s} has no {} annotation", m.as_str()))),
            }
        }
        keep.push(pass);
    }
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for s in 0..=segments {
        let kept = s < segments && keep[s];
        match (kept, start) {
            (true, None) => start = Some(s),
            (false, Some(first)) => {
                out.push(CuratedVideo {
                    source_id: id.to_string(),
                    category: category.clone(),
                    start_segment: first,
                    end_segment: s - 1,
                    duration_s: (s - first) as f64 * segment_s,
                });
                start = None;
            }
            _ => {}
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub count: usize,
    pub mean_s: f64,
    pub std_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo_s: f64,
    /// Exclusive upper edge; `None` for the open last bin.
    pub hi_s: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub videos: usize,
    pub total_s: f64,
    pub mean_s: f64,
    /// Population standard deviation.
    pub std_s: f64,
    pub per_category: BTreeMap<String, CategoryStats>,
    pub histogram: Vec<HistogramBin>,
}

/// Length bin edges in seconds; the last bin is open above.
pub const HISTOGRAM_EDGES: [f64; 5] = [2.0, 4.0, 6.0, 8.0, 10.0];

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn dataset_stats(videos: &[CuratedVideo]) -> Result<DatasetStats> {
    stats_of(videos.iter().map(|v| (v.category.as_str(), v.duration_s)).collect())
}

/// The same statistics over the records of any manifest.
pub fn manifest_stats(manifest: &Manifest) -> Result<DatasetStats> {
    stats_of(manifest.records.iter().map(|r| (manifest.categories[r.category].as_str(), r.duration_s)).collect())
}

fn stats_of(videos: Vec<(&str, f64)>) -> Result<DatasetStats> {
    if videos.is_empty() {
        return Err(Error::Contract("no curated videos".into()));
    }
    let lengths: Vec<f64> = videos.iter().map(|v| v.1).collect();
    let (mean_s, std_s) = mean_std(&lengths);
    let mut grouped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (category, length) in &videos {
        grouped.entry(category.to_string()).or_default().push(*length);
    }
    let per_category = grouped
        .into_iter()
        .map(|(c, l)| {
            let (mean_s, std_s) = mean_std(&l);
            (c, CategoryStats { count: l.len(), mean_s, std_s })
        })
        .collect();
    let mut histogram: Vec<HistogramBin> = HISTOGRAM_EDGES
        .iter()
        .enumerate()
        .map(|(i, &lo)| HistogramBin { lo_s: lo, hi_s: HISTOGRAM_EDGES.get(i + 1).copied(), count: 0 })
        .collect();
    for &l in &lengths {
        if let Some(bin) = histogram.iter_mut().rev().find(|b| l >= b.lo_s) {
            bin.count += 1;
        }
    }
    Ok(DatasetStats { videos: videos.len(), total_s: lengths.iter().sum(), mean_s, std_s, per_category, histogram })
}

impl DatasetStats {
    pub fn summary(&self) -> String {
        let mut out = format!(
            "{} videos, {:.1} s total, mean {:.3} s, std {:.3} s\n",
            self.videos, self.total_s, self.mean_s, self.std_s
        );
        for (c, s) in &self.per_category {
            out += &format!("  {c}: {} videos, mean {:.3} s, std {:.3} s\n", s.count, s.mean_s, s.std_s);
        }
        for b in &self.histogram {
            match b.hi_s {
                Some(hi) => out += &format!("  [{}, {}) s: {}\n", b.lo_s, hi, b.count),
                None => out += &format!("  >= {} s: {}\n", b.lo_s, b.count),
            }
        }
        out
    }
}

pub fn parse_annotations(text: &str) -> Result<Vec<SegmentAnnotation>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| Error::Format("annotation table is empty".into()))?;
    let cols: Vec<&str> = header.1.split('\t').map(str::trim).collect();
    if cols != ANNOTATION_COLUMNS {
        return Err(Error::Format(format!("line {}: header {cols:?}, expected {ANNOTATION_COLUMNS:?}", header.0 + 1)));
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        if f.len() != ANNOTATION_COLUMNS.len() {
            return Err(Error::Format(format!("line {n}: {} fields, expected {}", f.len(), ANNOTATION_COLUMNS.len())));
        }
        let segment = f[2].parse().map_err(|_| Error::Format(format!("line {n}: segment {:?} is not an index", f[2])))?;
        let modality = Modality::parse(f[3]).ok_or_else(|| Error::Format(format!("line {n}: unknown modality {:?}", f[3])))?;
        let mut votes = [Vote::No; 3];
        for (slot, raw) in votes.iter_mut().zip(&f[4..7]) {
            *slot = Vote::parse(raw).ok_or_else(|| Error::Format(format!("line {n}: unknown vote {raw:?}")))?;
        }
        out.push(SegmentAnnotation { video_id: f[0].to_string(), category: f[1].to_string(), segment, modality, votes });
    }
    Ok(out)
}

pub fn annotations_to_tsv(annotations: &[SegmentAnnotation]) -> String {
    let mut out = ANNOTATION_COLUMNS.join("\t") + "\n";
    for a in annotations {
        out += &format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            a.video_id, a.category, a.segment, a.modality.as_str(), a.votes[0], a.votes[1], a.votes[2]
        );
    }
    out
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<SegmentAnnotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

/// A manifest listing curated videos without media files; categories are
/// sorted by name.
pub fn curated_manifest(videos: &[CuratedVideo], base_dir: impl Into<std::path::PathBuf>) -> Manifest {
    let mut categories: Vec<String> = videos.iter().map(|v| v.category.clone()).collect();
    categories.sort();
    categories.dedup();
    let mut manifest = Manifest::new(categories.clone(), base_dir);
    for v in videos {
        manifest.records.push(ClipRecord {
            id: v.id(),
            category: categories.binary_search(&v.category).expect("collected above"),
            split: Split::Unassigned,
            duration_s: v.duration_s,
            audio: None,
            appearance: None,
            flow: None,
        });
    }
    manifest
}

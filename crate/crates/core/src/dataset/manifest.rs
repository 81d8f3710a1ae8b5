//! Tab-separated clip manifests.
//!
//! ```text
//! # foley-manifest 1
//! # categories	dog	drum
//! id	category	split	duration_s	audio	appearance	flow
//! dog_000	dog	train	2	audio/dog_000.wav	features/dog_000.app.vsft	-
//! ```
//!
//! Paths are relative to the manifest's directory; `-` marks a missing file
//! or an unassigned split.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const VERSION_LINE: &str = "# foley-manifest 1";
const CATEGORIES_PREFIX: &str = "# categories";
pub const COLUMNS: [&str; 7] = ["id", "category", "split", "duration_s", "audio", "appearance", "flow"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            "-" => Some(Split::Unassigned),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unassigned => "-",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    /// Index into [`Manifest::categories`].
    pub category: usize,
    pub split: Split,
    pub duration_s: f64,
    pub audio: Option<PathBuf>,
    pub appearance: Option<PathBuf>,
    pub flow: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub categories: Vec<String>,
    pub records: Vec<ClipRecord>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

fn optional_path(field: &str) -> Option<PathBuf> {
    (field != "-").then(|| PathBuf::from(field))
}

fn path_field(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "-".to_string(), |p| p.to_string_lossy().into_owned())
}

impl Manifest {
    pub fn new(categories: Vec<String>, base_dir: impl Into<PathBuf>) -> Self {
        Manifest { categories, records: Vec::new(), base_dir: base_dir.into() }
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Manifest> {
        let mut categories: Option<Vec<String>> = None;
        let mut saw_columns = false;
        let mut records = Vec::new();
        let mut ids = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let lineno = n + 1;
            let err = |msg: String| Error::Data(format!("manifest line {lineno}: {msg}"));
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix(CATEGORIES_PREFIX) {
                let list: Vec<String> = rest.split('\t').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
                categories = Some(list);
                continue;
            }
            if line.starts_with('#') {
                if line.starts_with("# foley-manifest") && line != VERSION_LINE {
                    return Err(err(format!("unsupported version line {line:?}")));
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !saw_columns {
                if fields != COLUMNS {
                    return Err(err(format!("expected column header {:?}", COLUMNS.join("\\t"))));
                }
                saw_columns = true;
                continue;
            }
            if fields.len() != COLUMNS.len() {
                return Err(err(format!("expected {} fields, found {}", COLUMNS.len(), fields.len())));
            }
            let cats = categories.as_ref().ok_or_else(|| err("record before the categories line".into()))?;
            let id = fields[0].to_string();
            if id.is_empty() || !ids.insert(id.clone()) {
                return Err(err(format!("empty or duplicate id {id:?}")));
            }
            let category = cats
                .iter()
                .position(|c| c == fields[1])
                .ok_or_else(|| err(format!("category {:?} is not in the category list", fields[1])))?;
            let split = Split::parse(fields[2]).ok_or_else(|| err(format!("split {:?} is not train, test or -", fields[2])))?;
            let duration_s: f64 = fields[3].parse().map_err(|_| err(format!("duration {:?} is not a number", fields[3])))?;
            if !(duration_s.is_finite() && duration_s > 0.0) {
                return Err(err(format!("duration {duration_s} must be positive")));
            }
            records.push(ClipRecord {
                id,
                category,
                split,
                duration_s,
                audio: optional_path(fields[4]),
                appearance: optional_path(fields[5]),
                flow: optional_path(fields[6]),
            });
        }
        let categories = categories.ok_or_else(|| Error::Data("manifest has no categories line".into()))?;
        if !saw_columns {
            return Err(Error::Data("manifest has no column header".into()));
        }
        Ok(Manifest { categories, records, base_dir: base_dir.into() })
    }

    /// Parses the file and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Manifest::parse(&text, base)?;
        for r in &manifest.records {
            for (column, p) in [("audio", &r.audio), ("appearance", &r.appearance), ("flow", &r.flow)] {
                if let Some(p) = p {
                    let full = manifest.resolve(p);
                    if !full.is_file() {
                        return Err(Error::Data(format!("clip {}: {column} file {} does not exist", r.id, full.display())));
                    }
                }
            }
        }
        Ok(manifest)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(VERSION_LINE);
        out.push('\n');
        out.push_str(CATEGORIES_PREFIX);
        for c in &self.categories {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        out.push_str(&COLUMNS.join("\t"));
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.id,
                self.categories[r.category],
                r.split.as_str(),
                r.duration_s,
                path_field(&r.audio),
                path_field(&r.appearance),
                path_field(&r.flow)
            );
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Marks `test_per_category` seeded-random clips of every category as
    /// test and the rest as train.
    pub fn assign_splits(&mut self, test_per_category: usize, seed: u64) -> Result<()> {
        let mut splits = vec![Split::Train; self.records.len()];
        for c in 0..self.categories.len() {
            let mut members: Vec<usize> = (0..self.records.len()).filter(|&i| self.records[i].category == c).collect();
            if members.is_empty() {
                continue;
            }
            if members.len() < test_per_category {
                return Err(Error::Data(format!(
                    "category {} has {} clips, fewer than the {test_per_category} test clips requested",
                    self.categories[c],
                    members.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            members.shuffle(&mut rng);
            for &i in &members[..test_per_category] {
                splits[i] = Split::Test;
            }
        }
        for (r, s) in self.records.iter_mut().zip(splits) {
            r.split = s;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Manifest {
        let mut m = Manifest::new(vec!["a".into(), "b".into()], "/data");
        for i in 0..10 {
            m.records.push(ClipRecord {
                id: format!("clip{i}"),
                category: i % 2,
                split: Split::Unassigned,
                duration_s: 2.0,
                audio: Some(format!("audio/clip{i}.wav").into()),
                appearance: None,
                flow: None,
            });
        }
        m
    }

    #[test]
    fn text_round_trip() {
        let m = sample();
        let back = Manifest::parse(&m.to_tsv(), "/data").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn splits_are_stable_and_disjoint() {
        let mut a = sample();
        let mut b = sample();
        a.assign_splits(2, 5).unwrap();
        b.assign_splits(2, 5).unwrap();
        assert_eq!(a, b);
        for c in 0..2 {
            assert_eq!(a.split(Split::Test).filter(|r| r.category == c).count(), 2);
        }
        assert_eq!(a.split(Split::Train).count() + a.split(Split::Test).count(), 10);
        assert!(sample().assign_splits(6, 0).is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "# foley-manifest 1\n# categories\ta\nid\tcategory\tsplit\tduration_s\taudio\tappearance\tflow\nx\tzzz\ttrain\t2\t-\t-\t-\n";
        let err = Manifest::parse(text, ".").unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
        let text = text.replace("zzz", "a").replace("\t2\t", "\tlong\t");
        assert!(Manifest::parse(&text, ".").unwrap_err().to_string().contains("duration"));
    }

    #[test]
    fn missing_files_fail_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample();
        m.base_dir = dir.path().into();
        let p = dir.path().join("m.tsv");
        m.save(&p).unwrap();
        let err = Manifest::load(&p).unwrap_err().to_string();
        assert!(err.contains("does not exist"), "{err}");
    }
}

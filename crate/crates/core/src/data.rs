//! Manifests, frame loading, isolated-gesture cutting and split planning.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BBox, Frame};
use crate::sequence::GestureSequence;

/// One manifest line. `path` is a directory of numbered frame files,
/// relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
    #[serde(default)]
    pub subject: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_bbox: Option<BBox>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Class names; a label's index in this list is its class id.
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative entry paths resolve against.
    pub root: PathBuf,
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, &root)
}

/// Parses JSON-lines manifest text. An optional first line
/// `{"classes": [...]}` fixes the class set and order; otherwise classes
/// are the sorted distinct labels. Blank lines are skipped; row numbers in
/// errors are 1-based line numbers.
pub fn parse_manifest(text: &str, root: &Path) -> Result<Manifest> {
    let mut declared: Option<Vec<String>> = None;
    let mut entries = Vec::new();
    let mut seen_entry = false;
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let err = |msg: String| Error::ManifestParse { row, msg };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if value.get("classes").is_some() {
            if seen_entry || declared.is_some() {
                return Err(err("class header must be the first row".into()));
            }
            let header: Header = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
            let unique: BTreeSet<_> = header.classes.iter().collect();
            if unique.len() != header.classes.len() || header.classes.iter().any(String::is_empty) {
                return Err(err("class names must be unique and non-empty".into()));
            }
            declared = Some(header.classes);
            continue;
        }
        seen_entry = true;
        let entry: ManifestEntry = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
        if entry.label.is_empty() {
            return Err(err("empty label".into()));
        }
        if let Some(classes) = &declared {
            if !classes.contains(&entry.label) {
                return Err(err(format!("unknown label '{}'", entry.label)));
            }
        }
        if let (Some(s), Some(e)) = (entry.start, entry.end) {
            if e <= s {
                return Err(err(format!("end {e} must exceed start {s}")));
            }
        }
        if let Some(b) = entry.face_bbox {
            if b.min_row > b.max_row || b.min_col > b.max_col {
                return Err(err("face_bbox min must not exceed max".into()));
            }
        }
        entries.push(entry);
    }
    let classes = declared.unwrap_or_else(|| {
        let set: BTreeSet<_> = entries.iter().map(|e| e.label.clone()).collect();
        set.into_iter().collect()
    });
    Ok(Manifest {
        classes,
        entries,
        root: root.to_path_buf(),
    })
}

impl Manifest {
    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries
            .iter()
            .map(|e| self.label_index(&e.label).expect("labels validated at parse time"))
            .collect()
    }

    pub fn subjects(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.subject.clone()).collect()
    }

    pub fn sequence_dir(&self, index: usize) -> PathBuf {
        self.root.join(&self.entries[index].path)
    }

    /// Sequence id: the entry path as written in the manifest.
    pub fn sequence_id(&self, index: usize) -> String {
        self.entries[index].path.to_string_lossy().into_owned()
    }

    /// Loads entry `index`, cut to its `[start, end)` annotation.
    pub fn load_sequence(&self, index: usize) -> Result<GestureSequence> {
        let entry = &self.entries[index];
        let frames = load_frames(&self.sequence_dir(index))?;
        let full = GestureSequence {
            id: self.sequence_id(index),
            label: self.label_index(&entry.label).expect("labels validated at parse time"),
            subject: entry.subject.clone(),
            face_bbox: entry.face_bbox,
            frames,
        };
        let n = full.len();
        match (entry.start, entry.end) {
            (None, None) => Ok(full),
            (s, e) => cut_isolated(&full, s.unwrap_or(0), e.unwrap_or(n)),
        }
    }
}

const FRAME_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

/// Loads the numbered frame files of `dir` in numeric order.
pub fn load_frames(dir: &Path) -> Result<Vec<Frame>> {
    let mut numbered = BTreeMap::new();
    for item in fs::read_dir(dir)? {
        let path = item?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| FRAME_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let Some(index) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if numbered.insert(index, path.clone()).is_some() {
            return Err(Error::Config(format!("duplicate frame number {index} in {}", dir.display())));
        }
    }
    if numbered.is_empty() {
        return Err(Error::Config(format!("no frame files in {}", dir.display())));
    }
    let frames = numbered.values().map(|p| Frame::load(p)).collect::<Result<Vec<_>>>()?;
    if frames.windows(2).any(|w| (w[0].width(), w[0].height()) != (w[1].width(), w[1].height())) {
        return Err(Error::DimensionMismatch(format!("frames of {} differ in size", dir.display())));
    }
    Ok(frames)
}

/// Frames `[start, end)` of `sequence`, with its metadata.
pub fn cut_isolated(sequence: &GestureSequence, start: usize, end: usize) -> Result<GestureSequence> {
    let n = sequence.len();
    if start >= end || end > n {
        return Err(Error::Index(format!("cut [{start}, {end}) of {n} frames")));
    }
    Ok(GestureSequence {
        frames: sequence.frames[start..end].to_vec(),
        ..sequence.clone()
    })
}

/// Train/test partition of sample indices (both sorted ascending).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub stratified: bool,
}

fn by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
}

fn plan(n: usize, mut test: Vec<usize>, seed: u64, stratified: bool) -> SplitPlan {
    test.sort_unstable();
    let mut is_test = vec![false; n];
    for &i in &test {
        is_test[i] = true;
    }
    SplitPlan {
        train: (0..n).filter(|&i| !is_test[i]).collect(),
        test,
        seed,
        stratified,
    }
}

/// Per class, `round(test_frac * n_c)` samples (at least 1, at most
/// `n_c - 1`) go to the test side.
pub fn stratified_split(labels: &[usize], test_frac: f64, seed: u64) -> Result<SplitPlan> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::Stratification(format!(
            "test fraction must lie in (0, 1), got {test_frac}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = Vec::new();
    for (class, mut members) in by_class(labels) {
        let n = members.len();
        if n < 2 {
            return Err(Error::Stratification(format!("class {class} has {n} sample(s), need >= 2")));
        }
        let take = ((test_frac * n as f64).round() as usize).clamp(1, n - 1);
        members.shuffle(&mut rng);
        test.extend_from_slice(&members[..take]);
    }
    Ok(plan(labels.len(), test, seed, true))
}

/// `k` stratified folds. Each class is shuffled and dealt round-robin,
/// with the dealing position carried from class to class.
pub fn kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<SplitPlan>> {
    if k < 2 {
        return Err(Error::Stratification(format!("k must be >= 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0usize;
    for (class, mut members) in by_class(labels) {
        if members.len() < k {
            return Err(Error::Stratification(format!(
                "class {class} has {} sample(s), need >= {k}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for i in members {
            folds[next % k].push(i);
            next += 1;
        }
    }
    Ok(folds.into_iter().map(|f| plan(labels.len(), f, seed, true)).collect())
}

/// Holds out whole subjects: `round(test_frac * n_subjects)` of them
/// (at least 1, at most all but one).
pub fn subject_split(subjects: &[String], test_frac: f64, seed: u64) -> Result<SplitPlan> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::Stratification(format!(
            "test fraction must lie in (0, 1), got {test_frac}"
        )));
    }
    let mut ids: Vec<&String> = subjects.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < 2 {
        return Err(Error::Stratification("need at least 2 subjects".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = ((test_frac * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let held: BTreeSet<&String> = ids[..take].iter().copied().collect();
    let test = (0..subjects.len()).filter(|&i| held.contains(&subjects[i])).collect();
    Ok(plan(subjects.len(), test, seed, false))
}

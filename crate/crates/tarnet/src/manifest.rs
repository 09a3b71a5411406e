//! Corpus manifests and WAV-directory corpora.
//!
//! A manifest is a CSV file whose first line is the version comment
//! `# tarnet manifest v1`, followed by the header `path,speaker,duration,split`.
//! Paths are relative to the manifest's directory unless absolute. Class
//! indices are the positions of the speaker names in lexicographic order.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tarnet_core::data::{self, Partition, SplitSpec};
use tarnet_core::frontend::Waveform;

use crate::error::{self, Error, Result};
use crate::wav::read_wav;

pub const MANIFEST_VERSION: &str = "# tarnet manifest v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub speaker: String,
    pub duration: f64,
    pub split: String,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let mut file = std::fs::File::create(path).map_err(io)?;
    writeln!(file, "{MANIFEST_VERSION}").map_err(io)?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(io)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_VERSION) {
        return Err(Error::format(path, format!("first line must be {MANIFEST_VERSION:?}")));
    }
    let body = &text[text.find('\n').map_or(text.len(), |i| i + 1)..];
    csv::Reader::from_reader(body.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Speaker names and their class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub speakers: Vec<String>,
}

impl Labels {
    /// Sorted, de-duplicated speaker names.
    pub fn from_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = names.into_iter().collect();
        Labels {
            speakers: set.into_iter().map(str::to_string).collect(),
        }
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.speakers.binary_search_by(|s| s.as_str().cmp(name)).ok()
    }
}

/// One loaded utterance.
#[derive(Debug, Clone)]
pub struct Item {
    pub path: PathBuf,
    pub speaker: String,
    pub split: Partition,
    pub waveform: Waveform,
}

/// A manifest with its audio loaded into memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub labels: Labels,
    pub items: Vec<Item>,
}

impl Corpus {
    pub fn load(manifest: &Path) -> Result<Self> {
        let rows = read_manifest(manifest)?;
        if rows.is_empty() {
            return Err(tarnet_core::Error::Data(format!("{} lists no utterances", manifest.display())).into());
        }
        let base = manifest.parent().unwrap_or(Path::new("."));
        let items = rows
            .par_iter()
            .map(|row| {
                let path = base.join(&row.path);
                let split = Partition::parse(&row.split).map_err(|e| Error::format(manifest, e.to_string()))?;
                let waveform = read_wav(&path)?;
                Ok(Item {
                    path,
                    speaker: row.speaker.clone(),
                    split,
                    waveform,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = Labels::from_names(items.iter().map(|i| i.speaker.as_str()));
        Ok(Corpus { labels, items })
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels.index(&self.items[i].speaker).expect("labels are built from the items")
    }

    /// Indices of the items in one partition, in manifest order.
    pub fn indices(&self, part: Partition) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].split == part).collect()
    }

    /// Fails unless every partition holds every speaker.
    pub fn check_closed_set(&self) -> Result<()> {
        for part in [Partition::Train, Partition::Val, Partition::Test] {
            let present = Labels::from_names(self.indices(part).into_iter().map(|i| self.items[i].speaker.as_str()));
            if present != self.labels {
                return Err(tarnet_core::Error::Data(format!(
                    "{} split covers {} of {} speakers; closed-set identification needs all of them",
                    part.as_str(),
                    present.speakers.len(),
                    self.labels.speakers.len()
                ))
                .into());
            }
        }
        Ok(())
    }
}

/// Assigns splits to `(relative path, speaker, duration)` rows.
pub fn assign_splits(entries: Vec<(String, String, f64)>, spec: &SplitSpec) -> Result<Vec<ManifestRow>> {
    let labels = Labels::from_names(entries.iter().map(|e| e.1.as_str()));
    let idx: Vec<usize> = entries.iter().map(|e| labels.index(&e.1).expect("present")).collect();
    let assignment = data::split(&idx, spec)?.assignment(entries.len());
    Ok(entries
        .into_iter()
        .zip(assignment)
        .map(|((path, speaker, duration), part)| ManifestRow {
            path,
            speaker,
            duration,
            split: part.expect("split is exhaustive").as_str().to_string(),
        })
        .collect())
}

/// Scans `root/<speaker>/*.wav`. Files are visited in sorted order so the
/// resulting manifest does not depend on directory listing order.
pub fn scan_wav_tree(root: &Path) -> Result<Vec<(PathBuf, String)>> {
    let mut out = Vec::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let speaker = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::format(&dir, "speaker directory name is not UTF-8"))?
            .to_string();
        if speaker.chars().any(|c| c.is_control()) {
            return Err(Error::format(&dir, "speaker directory name contains control characters"));
        }
        for file in sorted_entries(&dir)? {
            let is_wav = file.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav"));
            if is_wav && file.is_file() {
                out.push((file, speaker.clone()));
            }
        }
    }
    if out.is_empty() {
        return Err(tarnet_core::Error::Data(format!("no <speaker>/*.wav files under {}", root.display())).into());
    }
    Ok(out)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

/// Manifest rows for a WAV tree; paths are stored relative to `base`.
pub fn ingest(root: &Path, base: &Path, spec: &SplitSpec) -> Result<Vec<ManifestRow>> {
    let files = scan_wav_tree(root)?;
    let entries = files
        .par_iter()
        .map(|(path, speaker)| {
            let w = read_wav(path)?;
            Ok((relative_to(path, base), speaker.clone(), w.duration()))
        })
        .collect::<Result<Vec<_>>>()?;
    if Labels::from_names(entries.iter().map(|e| e.1.as_str())).speakers.len() < 2 {
        return Err(error::usage("closed-set identification needs at least 2 speaker directories"));
    }
    assign_splits(entries, spec)
}

/// `path` relative to `base` when it lies below it, otherwise absolute.
pub fn relative_to(path: &Path, base: &Path) -> String {
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let (p, b) = (abs(path), abs(base));
    p.strip_prefix(&b).unwrap_or(&p).to_string_lossy().into_owned()
}

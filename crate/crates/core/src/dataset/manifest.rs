//! Canonical sample records and the manifest file format.
//!
//! A manifest file is UTF-8 CSV with the header `path,label,source,frame_index`.
//! `frame_index` is empty for still-image sources. Relative paths are kept
//! verbatim and resolved against the manifest's directory when images are read.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::label::ExpressionLabel;
use crate::error::{Error, IoContext, Result};

pub const MANIFEST_HEADER: &str = "path,label,source,frame_index";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Affwild2,
    Expw,
    Synthetic,
}

impl Source {
    /// Per-frame video sources carry a frame index.
    pub fn is_video(self) -> bool {
        matches!(self, Source::Affwild2)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Affwild2 => "affwild2",
            Source::Expw => "expw",
            Source::Synthetic => "synthetic",
        }
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "affwild2" => Ok(Source::Affwild2),
            "expw" => Ok(Source::Expw),
            "synthetic" => Ok(Source::Synthetic),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sample {
    pub image_path: PathBuf,
    pub label: ExpressionLabel,
    pub source: Source,
    pub frame_index: Option<u64>,
}

impl Sample {
    pub fn new(
        image_path: impl Into<PathBuf>,
        label: ExpressionLabel,
        source: Source,
        frame_index: Option<u64>,
    ) -> Result<Self> {
        let sample = Sample {
            image_path: image_path.into(),
            label,
            source,
            frame_index,
        };
        sample.validate()?;
        Ok(sample)
    }

    fn validate(&self) -> Result<()> {
        let path = self.image_path.to_string_lossy();
        if path.is_empty() {
            return Err(Error::Contract("sample with empty image path".into()));
        }
        if path.contains([',', '\n', '\r']) {
            return Err(Error::Contract(format!(
                "image path {path:?} contains a manifest delimiter"
            )));
        }
        if self.frame_index.is_some() != self.source.is_video() {
            return Err(Error::Contract(format!(
                "{path}: frame_index must be present exactly for video sources (source {})",
                self.source.as_str()
            )));
        }
        Ok(())
    }

    pub fn key(&self) -> (&Path, Option<u64>) {
        (&self.image_path, self.frame_index)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    split: Split,
    samples: Vec<Sample>,
}

impl DatasetManifest {
    /// Builds a manifest, rejecting duplicate `(image_path, frame_index)` pairs.
    pub fn new(split: Split, samples: Vec<Sample>) -> Result<Self> {
        let duplicates = find_duplicates(&samples);
        if !duplicates.is_empty() {
            return Err(duplicate_error(&duplicates));
        }
        Ok(DatasetManifest { split, samples })
    }

    pub fn empty(split: Split) -> Self {
        DatasetManifest {
            split,
            samples: Vec::new(),
        }
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(32 * (self.samples.len() + 1));
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for s in &self.samples {
            out.push_str(&s.image_path.to_string_lossy());
            out.push(',');
            out.push_str(&s.label.code().to_string());
            out.push(',');
            out.push_str(s.source.as_str());
            out.push(',');
            if let Some(f) = s.frame_index {
                out.push_str(&f.to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Parses manifest text; `origin` names the file in error messages.
    pub fn from_csv(text: &str, split: Split, origin: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == MANIFEST_HEADER => {}
            _ => {
                return Err(Error::format(
                    origin,
                    format!("missing manifest header {MANIFEST_HEADER:?}"),
                ))
            }
        }
        let mut samples = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::format(
                    origin,
                    format!("line {line_no}: expected 4 fields, found {}", fields.len()),
                ));
            }
            let bad = |what: &str| Error::format(origin, format!("line {line_no}: {what}"));
            let label: ExpressionLabel =
                fields[1].parse().map_err(|e: Error| bad(&e.to_string()))?;
            let source: Source = fields[2].parse().map_err(|e: String| bad(&e))?;
            let frame_index = match fields[3].trim() {
                "" => None,
                f => Some(
                    f.parse::<u64>()
                        .map_err(|_| bad(&format!("invalid frame index {f:?}")))?,
                ),
            };
            let sample = Sample::new(fields[0], label, source, frame_index)
                .map_err(|e| bad(&e.to_string()))?;
            samples.push(sample);
        }
        DatasetManifest::new(split, samples)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).at(parent)?;
        }
        fs::write(path, self.to_csv()).at(path)
    }

    pub fn read(path: &Path, split: Split) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::from_csv(&text, split, &path.display().to_string())
    }
}

fn find_duplicates(samples: &[Sample]) -> Vec<(PathBuf, Option<u64>)> {
    let mut seen = HashSet::with_capacity(samples.len());
    let mut dups = Vec::new();
    for s in samples {
        if !seen.insert(s.key()) {
            dups.push((s.image_path.clone(), s.frame_index));
        }
    }
    dups
}

fn duplicate_error(dups: &[(PathBuf, Option<u64>)]) -> Error {
    let shown: Vec<String> = dups
        .iter()
        .take(10)
        .map(|(p, f)| match f {
            Some(f) => format!("{}#{f}", p.display()),
            None => p.display().to_string(),
        })
        .collect();
    let more = dups.len().saturating_sub(shown.len());
    let suffix = if more > 0 {
        format!(" (+{more} more)")
    } else {
        String::new()
    };
    Error::Integrity(format!(
        "{} duplicate (path, frame_index) pairs: {}{suffix}",
        dups.len(),
        shown.join(", ")
    ))
}

/// Concatenates manifests of one split in the given order.
pub fn merge_datasets(manifests: &[DatasetManifest]) -> Result<DatasetManifest> {
    let split = manifests
        .first()
        .ok_or_else(|| Error::Config("merge of zero manifests".into()))?
        .split;
    if let Some(other) = manifests.iter().find(|m| m.split != split) {
        return Err(Error::Config(format!(
            "cannot merge {split} manifest with {} manifest",
            other.split
        )));
    }
    let total = manifests.iter().map(|m| m.len()).sum();
    let mut samples = Vec::with_capacity(total);
    for m in manifests {
        samples.extend_from_slice(&m.samples);
    }
    DatasetManifest::new(split, samples)
}

//! Readers for the two source annotation layouts.
//!
//! Per-frame video annotations: a header line naming the seven classes, then
//! one integer per frame (`0..=6`, or `-1` for an unannotated frame).
//!
//! Per-image annotations: whitespace-separated
//! `image_name face_id top left right bottom confidence label`. Box fields
//! are ignored since the images are consumed as pre-cropped faces.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::label::{ExpressionLabel, CLASS_NAMES, NUM_CLASSES};
use super::manifest::{Sample, Source};
use crate::error::{Error, Result};

/// File naming for extracted video frames: `<frames_dir>/<video_id>/<NNNNN>.<ext>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameLayout {
    /// Number of the first frame on disk (the challenge release counts from 1).
    pub first_frame_number: u64,
    pub digits: usize,
    pub extension: String,
    /// Expected header; compared after stripping whitespace around commas.
    pub header: String,
}

impl Default for FrameLayout {
    fn default() -> Self {
        FrameLayout {
            first_frame_number: 1,
            digits: 5,
            extension: "jpg".into(),
            header: CLASS_NAMES.join(","),
        }
    }
}

impl FrameLayout {
    fn frame_path(&self, frames_dir: &Path, video_id: &str, frame_index: u64) -> PathBuf {
        let number = frame_index + self.first_frame_number;
        frames_dir.join(video_id).join(format!(
            "{number:0width$}.{}",
            self.extension,
            width = self.digits
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseOutcome {
    pub samples: Vec<Sample>,
    /// Data lines whose code was the invalid sentinel or outside `0..=6`.
    pub skipped: usize,
}

pub fn parse_affwild2_annotations<R: BufRead>(
    reader: R,
    origin: &str,
    video_id: &str,
    frames_dir: &Path,
    layout: &FrameLayout,
) -> Result<ParseOutcome> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::format(origin, e.to_string()))?,
        None => return Err(Error::format(origin, "empty file, expected class header")),
    };
    if normalize_header(&header) != normalize_header(&layout.header) {
        return Err(Error::format(
            origin,
            format!(
                "malformed header {:?}, expected {:?}",
                header.trim(),
                layout.header
            ),
        ));
    }

    let mut samples = Vec::new();
    let mut skipped = 0;
    for (position, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::format(origin, e.to_string()))?;
        let text = line.trim();
        let code: i64 = text.parse().map_err(|_| {
            Error::format(
                origin,
                format!(
                    "line {}: expected an integer label, found {:?}",
                    position + 2,
                    text
                ),
            )
        })?;
        match ExpressionLabel::new(code) {
            Some(label) => {
                let frame_index = position as u64;
                samples.push(Sample::new(
                    layout.frame_path(frames_dir, video_id, frame_index),
                    label,
                    Source::Affwild2,
                    Some(frame_index),
                )?);
            }
            None => skipped += 1,
        }
    }
    Ok(ParseOutcome { samples, skipped })
}

fn normalize_header(h: &str) -> String {
    h.trim()
        .trim_start_matches('\u{feff}')
        .split(',')
        .map(str::trim)
        .collect::<Vec<_>>()
        .join(",")
}

/// Bijection from source label codes to canonical codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelMap([ExpressionLabel; NUM_CLASSES]);

impl LabelMap {
    pub fn identity() -> Self {
        LabelMap(std::array::from_fn(|i| {
            ExpressionLabel::from_index(i).unwrap()
        }))
    }

    /// `table[source] = canonical`; must be a permutation of `0..=6`.
    pub fn new(table: [u8; NUM_CLASSES]) -> Result<Self> {
        let mut seen = [false; NUM_CLASSES];
        for (src, &dst) in table.iter().enumerate() {
            let d = dst as usize;
            if d >= NUM_CLASSES {
                return Err(Error::Config(format!(
                    "label map sends {src} to {dst}, outside 0..=6"
                )));
            }
            if std::mem::replace(&mut seen[d], true) {
                return Err(Error::Config(format!(
                    "label map is not bijective: canonical code {dst} used twice"
                )));
            }
        }
        Ok(LabelMap(
            table.map(|d| ExpressionLabel::try_from(d).unwrap()),
        ))
    }

    /// Parses the JSON form `{"0": 1, "1": 2, ...}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, i64> = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("label map is not a JSON object of integers: {e}"))
        })?;
        if raw.len() != NUM_CLASSES {
            return Err(Error::Config(format!(
                "label map needs exactly {NUM_CLASSES} entries, found {}",
                raw.len()
            )));
        }
        let mut table = [u8::MAX; NUM_CLASSES];
        for (key, &value) in &raw {
            let src: usize = key
                .parse()
                .ok()
                .filter(|&k: &usize| k < NUM_CLASSES)
                .ok_or_else(|| {
                    Error::Config(format!("label map key {key:?} is not one of \"0\"..\"6\""))
                })?;
            table[src] = u8::try_from(value)
                .map_err(|_| Error::Config(format!("label map value {value} outside 0..=6")))?;
        }
        Self::new(table)
    }

    pub fn to_json(&self) -> String {
        let obj: BTreeMap<String, u8> = self
            .0
            .iter()
            .enumerate()
            .map(|(s, d)| (s.to_string(), d.code()))
            .collect();
        serde_json::to_string(&obj).expect("map serializes")
    }

    pub fn map(&self, source_code: usize) -> ExpressionLabel {
        self.0[source_code]
    }
}

/// How per-image records name their face crop on disk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropNaming {
    /// `<stem>_<face_id>.<ext>`, one file per annotated face.
    #[default]
    PerFace,
    /// The record's image name as is.
    ImageName,
}

pub fn parse_expw_annotations<R: BufRead>(
    reader: R,
    origin: &str,
    images_dir: &Path,
    label_map: &LabelMap,
    naming: CropNaming,
    strict: bool,
) -> Result<ParseOutcome> {
    let mut samples = Vec::new();
    let mut skipped = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::format(origin, e.to_string()))?;
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 8 {
            return Err(Error::format(
                origin,
                format!("line {line_no}: expected 8 fields, found {}", fields.len()),
            ));
        }
        let (name, face_id, raw_label) = (fields[0], fields[1], fields[7]);
        let code: i64 = raw_label.parse().map_err(|_| {
            Error::format(
                origin,
                format!("line {line_no}: label {raw_label:?} is not an integer"),
            )
        })?;
        if !(0..NUM_CLASSES as i64).contains(&code) {
            if strict {
                return Err(Error::format(
                    origin,
                    format!(
                        "line {line_no} ({name} face {face_id}): source label {code} outside 0..=6"
                    ),
                ));
            }
            skipped += 1;
            continue;
        }
        let path = match naming {
            CropNaming::ImageName => images_dir.join(name),
            CropNaming::PerFace => {
                let p = Path::new(name);
                let stem = p
                    .file_stem()
                    .map(|s| s.to_string_lossy())
                    .unwrap_or_default();
                let crop = match p.extension() {
                    Some(ext) => format!("{stem}_{face_id}.{}", ext.to_string_lossy()),
                    None => format!("{stem}_{face_id}"),
                };
                images_dir.join(crop)
            }
        };
        samples.push(Sample::new(
            path,
            label_map.map(code as usize),
            Source::Expw,
            None,
        )?);
    }
    Ok(ParseOutcome { samples, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "Neutral,Anger,Disgust,Fear,Happiness,Sadness,Surprise";

    fn affwild(body: &str) -> Result<ParseOutcome> {
        parse_affwild2_annotations(
            body.as_bytes(),
            "clip.txt",
            "clip",
            Path::new("frames"),
            &FrameLayout::default(),
        )
    }

    #[test]
    fn mixed_valid_and_sentinel_lines() {
        let out = affwild(&format!("{HEADER}\n0\n4\n-1\n6\n")).unwrap();
        let labels: Vec<_> = out.samples.iter().map(|s| s.label).collect();
        let frames: Vec<_> = out.samples.iter().map(|s| s.frame_index.unwrap()).collect();
        assert_eq!(
            labels,
            [
                ExpressionLabel::NEUTRAL,
                ExpressionLabel::HAPPINESS,
                ExpressionLabel::SURPRISE
            ]
        );
        assert_eq!(frames, [0, 1, 3]);
        assert_eq!(out.skipped, 1);
        assert_eq!(
            out.samples[2].image_path,
            Path::new("frames/clip/00004.jpg")
        );
    }

    #[test]
    fn all_invalid_and_header_only() {
        let out = affwild(&format!("{HEADER}\n-1\n-1\n-1\n")).unwrap();
        assert!(out.samples.is_empty());
        assert_eq!(out.skipped, 3);
        let out = affwild(&format!("{HEADER}\n")).unwrap();
        assert!(out.samples.is_empty());
        assert_eq!(out.skipped, 0);
    }

    #[test]
    fn out_of_range_codes_are_skipped() {
        let out = affwild(&format!("{HEADER}\n7\n3\n")).unwrap();
        assert_eq!(out.samples.len(), 1);
        assert_eq!(out.skipped, 1);
    }

    #[test]
    fn format_errors() {
        let err = affwild("Neutral,Anger\n0\n").unwrap_err();
        assert!(err.to_string().contains("clip.txt"), "{err}");
        let err = affwild(&format!("{HEADER}\n0\nhappy\n")).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(affwild("").is_err());
    }

    #[test]
    fn header_tolerates_spacing_and_crlf() {
        let out =
            affwild("Neutral, Anger,Disgust,Fear,Happiness,Sadness,Surprise\r\n2\r\n").unwrap();
        assert_eq!(out.samples[0].label, ExpressionLabel::DISGUST);
    }

    fn expw(body: &str, map: &LabelMap, strict: bool) -> Result<ParseOutcome> {
        parse_expw_annotations(
            body.as_bytes(),
            "label.lst",
            Path::new("expw"),
            map,
            CropNaming::PerFace,
            strict,
        )
    }

    #[test]
    fn identity_map_keeps_labels() {
        let body: String = (0..7)
            .map(|s| format!("img{s}.jpg 0 1 2 3 4 0.9 {s}\n"))
            .collect();
        let out = expw(&body, &LabelMap::identity(), true).unwrap();
        for (s, sample) in out.samples.iter().enumerate() {
            assert_eq!(sample.label.index(), s);
            assert_eq!(sample.source, Source::Expw);
            assert_eq!(sample.frame_index, None);
        }
        assert_eq!(out.samples[0].image_path, Path::new("expw/img0_0.jpg"));
    }

    #[test]
    fn rotated_map_remaps() {
        let map = LabelMap::new([1, 2, 3, 4, 5, 6, 0]).unwrap();
        let out = expw("a.jpg 0 1 2 3 4 0.9 0\n", &map, true).unwrap();
        assert_eq!(out.samples[0].label, ExpressionLabel::ANGER);
    }

    #[test]
    fn strict_mode_names_bad_record() {
        let body = "a.jpg 0 1 2 3 4 0.9 0\nb.jpg 1 1 2 3 4 0.9 7\nc.jpg 0 1 2 3 4 0.9 2\n";
        let err = expw(body, &LabelMap::identity(), true).unwrap_err();
        assert!(
            err.to_string().contains("b.jpg") && err.to_string().contains("line 2"),
            "{err}"
        );
        let lenient = expw(body, &LabelMap::identity(), false).unwrap();
        assert_eq!((lenient.samples.len(), lenient.skipped), (2, 1));
    }

    #[test]
    fn label_map_validation() {
        assert!(matches!(
            LabelMap::new([0, 0, 1, 2, 3, 4, 5]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            LabelMap::new([0, 1, 2, 3, 4, 5, 7]),
            Err(Error::Config(_))
        ));
        let json = r#"{"0":1,"1":2,"2":3,"3":4,"4":5,"5":6,"6":0}"#;
        let map = LabelMap::from_json(json).unwrap();
        assert_eq!(map, LabelMap::new([1, 2, 3, 4, 5, 6, 0]).unwrap());
        assert_eq!(LabelMap::from_json(&map.to_json()).unwrap(), map);
        assert!(LabelMap::from_json(r#"{"0":0}"#).is_err());
        assert!(LabelMap::from_json(r#"{"0":1,"1":1,"2":2,"3":3,"4":4,"5":5,"6":6}"#).is_err());
        assert!(LabelMap::from_json(r#"{"0":0,"1":1,"2":2,"3":3,"4":4,"5":5,"x":6}"#).is_err());
    }
}

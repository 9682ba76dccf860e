//! The run configuration: one JSON document describing data, augmentation,
//! network, optimization, output location and seed.
//!
//! ```json
//! {
//!   "data": {
//!     "train": [{"format": "manifest", "path": "data/train.csv"}],
//!     "val":   [{"format": "manifest", "path": "data/val.csv"}]
//!   },
//!   "label_map": null,
//!   "augmentation": {"brightness": 0.4, "contrast": 0.3, "saturation": 0.25, "hue": 0.5,
//!                    "flip_probability": 0.5, "random_order": false},
//!   "normalization": {"mean": [0.5, 0.5, 0.5], "std": [0.25, 0.25, 0.25]},
//!   "network": { ... },
//!   "train": { ... },
//!   "pretrained": {"path": "senet50.safetensors", "strict": true, "preserve_head": false},
//!   "output_dir": "runs/desk",
//!   "seed": 0
//! }
//! ```
//!
//! Every section has defaults, so a partial document is valid. Relative paths
//! resolve against the working directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{JitterConfig, Normalization};
use crate::dataset::{
    merge_datasets, parse_affwild2_annotations, parse_expw_annotations, CropNaming,
    DatasetManifest, FrameLayout, LabelMap, Sample, Split, NUM_CLASSES,
};
use crate::error::{Error, IoContext, Result};
use crate::nn::NetworkConfig;
use crate::train::{resolve_path, TrainConfig};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "FER_OUTPUT_ROOT";

/// One annotation source contributing samples to a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// A `path,label,source,frame_index` manifest; relative sample paths are
    /// taken relative to the manifest's directory.
    Manifest { path: PathBuf },
    /// A directory of per-video label files (`<video_id>.txt`, one code per frame).
    Affwild2 {
        annotations_dir: PathBuf,
        frames_dir: PathBuf,
        #[serde(default)]
        layout: FrameLayout,
    },
    /// A whitespace-separated per-face label file.
    Expw {
        annotations: PathBuf,
        images_dir: PathBuf,
        #[serde(default)]
        naming: CropNaming,
        #[serde(default)]
        strict: bool,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Vec<DataSource>,
    pub val: Vec<DataSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainedConfig {
    pub path: PathBuf,
    /// Fail when any backbone parameter is absent from the checkpoint.
    #[serde(default = "yes")]
    pub strict: bool,
    /// Keep the checkpoint's head when it already has the right class count.
    #[serde(default)]
    pub preserve_head: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    /// JSON file mapping the still-image corpus' label codes onto canonical codes.
    pub label_map: Option<PathBuf>,
    pub augmentation: JitterConfig,
    pub normalization: Normalization,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub pretrained: Option<PretrainedConfig>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            label_map: None,
            augmentation: JitterConfig::default(),
            normalization: Normalization::default(),
            network: NetworkConfig::se_resnet50(),
            train: TrainConfig::default(),
            pretrained: None,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Tiny network and desk-scale optimization over the given manifests.
    pub fn desk(train_manifest: impl Into<PathBuf>, val_manifest: impl Into<PathBuf>) -> Self {
        RunConfig {
            data: DataConfig {
                train: vec![DataSource::Manifest {
                    path: train_manifest.into(),
                }],
                val: vec![DataSource::Manifest {
                    path: val_manifest.into(),
                }],
            },
            network: NetworkConfig::tiny(),
            train: TrainConfig::desk(),
            output_dir: PathBuf::from("runs/desk"),
            ..RunConfig::default()
        }
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every section; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.network.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "network.num_classes must be {NUM_CLASSES}, got {}",
                self.network.num_classes
            )));
        }
        self.train.validate()?;
        self.augmentation.validate()?;
        self.normalization.validate()?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }

    /// Training settings with the run seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// `output_dir`, placed under the output-root override when it is relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() && !root.is_empty() => {
                PathBuf::from(root).join(&self.output_dir)
            }
            _ => self.output_dir.clone(),
        }
    }

    pub fn label_map(&self) -> Result<LabelMap> {
        match &self.label_map {
            None => Ok(LabelMap::identity()),
            Some(path) => LabelMap::from_json(&fs::read_to_string(path).at(path)?),
        }
    }

    pub fn sources(&self, split: Split) -> &[DataSource] {
        match split {
            Split::Train => &self.data.train,
            Split::Val | Split::Test => &self.data.val,
        }
    }

    /// Reads and merges every source configured for `split`.
    pub fn load_split(&self, split: Split) -> Result<DatasetManifest> {
        let sources = self.sources(split);
        if sources.is_empty() {
            return Err(Error::Config(format!("data.{split} lists no sources")));
        }
        let map = self.label_map()?;
        let parts = sources
            .iter()
            .map(|s| load_source(s, split, &map))
            .collect::<Result<Vec<_>>>()?;
        merge_datasets(&parts)
    }

    /// SHA-256 of the compact serialized configuration.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

pub fn config_hash<S: Serialize>(value: &S) -> String {
    hex::encode(Sha256::digest(
        serde_json::to_vec(value).expect("config serializes"),
    ))
}

/// Reads a manifest and makes its relative sample paths relative to the working directory.
pub fn read_manifest(path: &Path, split: Split) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::read(path, split)?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let samples = manifest
        .samples()
        .iter()
        .map(|s| {
            Sample::new(
                resolve_path(dir, &s.image_path),
                s.label,
                s.source,
                s.frame_index,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetManifest::new(split, samples)
}

fn load_source(source: &DataSource, split: Split, map: &LabelMap) -> Result<DatasetManifest> {
    match source {
        DataSource::Manifest { path } => read_manifest(path, split),
        DataSource::Affwild2 {
            annotations_dir,
            frames_dir,
            layout,
        } => {
            let mut files: Vec<PathBuf> = fs::read_dir(annotations_dir)
                .at(annotations_dir)?
                .map(|e| e.map(|e| e.path()).at(annotations_dir))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e == "txt"))
                .collect();
            files.sort();
            let mut samples = Vec::new();
            for file in files {
                let video_id = file
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let reader = std::io::BufReader::new(fs::File::open(&file).at(&file)?);
                let outcome = parse_affwild2_annotations(
                    reader,
                    &file.display().to_string(),
                    &video_id,
                    frames_dir,
                    layout,
                )?;
                samples.extend(outcome.samples);
            }
            DatasetManifest::new(split, samples)
        }
        DataSource::Expw {
            annotations,
            images_dir,
            naming,
            strict,
        } => {
            let reader = std::io::BufReader::new(fs::File::open(annotations).at(annotations)?);
            let outcome = parse_expw_annotations(
                reader,
                &annotations.display().to_string(),
                images_dir,
                map,
                *naming,
                *strict,
            )?;
            DatasetManifest::new(split, outcome.samples)
        }
    }
}

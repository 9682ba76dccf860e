//! Class distributions and inverse-frequency loss weights.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::label::{ExpressionLabel, CLASS_NAMES, NUM_CLASSES};
use super::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDistribution {
    counts: [u64; NUM_CLASSES],
    total: u64,
}

impl ClassDistribution {
    pub fn from_counts(counts: [u64; NUM_CLASSES]) -> Self {
        ClassDistribution {
            counts,
            total: counts.iter().sum(),
        }
    }

    pub fn counts(&self) -> &[u64; NUM_CLASSES] {
        &self.counts
    }

    pub fn count(&self, label: ExpressionLabel) -> u64 {
        self.counts[label.index()]
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

pub fn compute_distribution(manifest: &DatasetManifest) -> ClassDistribution {
    let mut counts = [0u64; NUM_CLASSES];
    for s in manifest.samples() {
        counts[s.label.index()] += 1;
    }
    ClassDistribution::from_counts(counts)
}

/// Exact per-class weights `max_count / count`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassWeights([Ratio<u64>; NUM_CLASSES]);

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights([Ratio::from_integer(1); NUM_CLASSES])
    }

    pub fn exact(&self) -> &[Ratio<u64>; NUM_CLASSES] {
        &self.0
    }

    pub fn get(&self, label: ExpressionLabel) -> Ratio<u64> {
        self.0[label.index()]
    }

    pub fn to_scalars<T: Scalar>(&self) -> [T; NUM_CLASSES] {
        self.0
            .map(|r| T::of(*r.numer() as f64) / T::of(*r.denom() as f64))
    }

    /// Two-decimal display view, rounded half-up.
    pub fn rounded(&self) -> [f64; NUM_CLASSES] {
        self.to_scalars::<f64>().map(round2)
    }

    pub fn to_record(&self) -> WeightsRecord {
        WeightsRecord {
            classes: CLASS_NAMES.map(String::from).to_vec(),
            exact: self
                .0
                .iter()
                .map(|r| format!("{}/{}", r.numer(), r.denom()))
                .collect(),
            full_precision: self.to_scalars::<f64>().to_vec(),
            rounded: self.rounded().to_vec(),
        }
    }

    pub fn from_record(record: &WeightsRecord) -> Result<Self> {
        if record.exact.len() != NUM_CLASSES {
            return Err(Error::Config(format!(
                "weights file lists {} classes, expected {NUM_CLASSES}",
                record.exact.len()
            )));
        }
        let mut out = [Ratio::from_integer(1); NUM_CLASSES];
        for (slot, text) in out.iter_mut().zip(&record.exact) {
            let parsed = text
                .split_once('/')
                .and_then(|(n, d)| {
                    Some((n.trim().parse::<u64>().ok()?, d.trim().parse::<u64>().ok()?))
                })
                .filter(|&(n, d)| d > 0 && n >= d)
                .ok_or_else(|| Error::Config(format!("invalid exact weight {text:?}")))?;
            *slot = Ratio::new(parsed.0, parsed.1);
        }
        Ok(ClassWeights(out))
    }
}

/// Serialized form written by `fer weights` and read by `fer train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsRecord {
    pub classes: Vec<String>,
    pub exact: Vec<String>,
    pub full_precision: Vec<f64>,
    pub rounded: Vec<f64>,
}

/// `weights[c] = max_k counts[k] / counts[c]`; every class must be present.
pub fn compute_class_weights(dist: &ClassDistribution) -> Result<ClassWeights> {
    let empty: Vec<&str> = ExpressionLabel::all()
        .filter(|&l| dist.count(l) == 0)
        .map(|l| l.name())
        .collect();
    if !empty.is_empty() {
        return Err(Error::Domain(format!(
            "class weight undefined for zero-count classes [{}]; supply a floor count for them or exclude them from training",
            empty.join(", ")
        )));
    }
    let max = *dist.counts().iter().max().expect("seven classes");
    Ok(ClassWeights(dist.counts().map(|c| Ratio::new(max, c))))
}

/// Round half-up to two decimals. The nudge absorbs binary representation
/// error so that e.g. 0.285 rounds to 0.29.
pub fn round2(x: f64) -> f64 {
    ((x * 100.0) + 0.5 + 1e-9).floor() / 100.0
}

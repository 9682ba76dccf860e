//! Desk-scale synthetic face stand-ins.
//!
//! Each class gets a luminance texture (stripe orientation and period) plus a
//! class-indexed color tint and pixel noise. The texture survives flips and
//! color jitter, so a small network can learn the classes under the full
//! training augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::label::{ExpressionLabel, NUM_CLASSES};
use super::manifest::{DatasetManifest, Sample, Source, Split};
use crate::augment::jitter::hsv_to_rgb;
use crate::augment::Image;
use crate::error::{Error, IoContext, Result};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub counts: [usize; NUM_CLASSES],
    pub image_size: usize,
    pub seed: u64,
}

#[derive(Clone, Copy)]
enum Texture {
    Rows(usize),
    Columns(usize),
    Checker(usize),
    Flat,
}

const TEXTURES: [Texture; NUM_CLASSES] = [
    Texture::Rows(4),
    Texture::Columns(4),
    Texture::Checker(4),
    Texture::Rows(8),
    Texture::Columns(8),
    Texture::Checker(8),
    Texture::Flat,
];

const AMPLITUDE: f64 = 0.22;
const NOISE_STD: f64 = 0.04;

/// Renders one image of `label`'s signature; the phase and noise come from `rng`.
pub fn render_signature<R: Rng>(label: ExpressionLabel, size: usize, rng: &mut R) -> Image<f32> {
    let tint = hsv_to_rgb([label.index() as f64 / NUM_CLASSES as f64, 0.35, 0.6]);
    let (dy, dx) = (rng.gen_range(0..8usize), rng.gen_range(0..8usize));
    let wave = |period: usize, t: usize| {
        if ((t + period) / (period / 2)).is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    };
    let texture = TEXTURES[label.index()];
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut img = Image::filled(size, size, [0.0f32; 3]);
    for y in 0..size {
        for x in 0..size {
            let (yy, xx) = (y + dy, x + dx);
            let s = match texture {
                Texture::Rows(p) => wave(p, yy),
                Texture::Columns(p) => wave(p, xx),
                Texture::Checker(p) => wave(p, yy) * wave(p, xx),
                Texture::Flat => 0.0,
            };
            let px = tint.map(|t| ((t + AMPLITUDE * s + noise.sample(rng)).clamp(0.0, 1.0)) as f32);
            img.set_pixel(y, x, px);
        }
    }
    img
}

/// Writes PNGs under `out_dir/images/<split>/` and the manifest `out_dir/<split>.csv`.
///
/// Manifest paths are relative to `out_dir`, so reruns with the same spec
/// produce byte-identical manifests regardless of where they are written.
pub fn generate_synthetic_dataset(
    spec: &SynthSpec,
    split: Split,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if spec.image_size < 8 {
        return Err(Error::Config(format!(
            "synthetic image_size must be at least 8, got {}",
            spec.image_size
        )));
    }
    let rel_dir = PathBuf::from("images").join(split.as_str());
    let abs_dir = out_dir.join(&rel_dir);
    fs::create_dir_all(&abs_dir).at(&abs_dir)?;

    let mut samples = Vec::with_capacity(spec.counts.iter().sum());
    for label in ExpressionLabel::all() {
        for i in 0..spec.counts[label.index()] {
            let mut rng = stream(
                spec.seed,
                Stream::Synthesis,
                &[split as u64, label.index() as u64, i as u64],
            );
            let img = render_signature(label, spec.image_size, &mut rng);
            let name = format!("{}_{i:05}.png", label.code());
            img.save_png(&abs_dir.join(&name))?;
            samples.push(Sample::new(
                rel_dir.join(name),
                label,
                Source::Synthetic,
                None,
            )?);
        }
    }
    let manifest = DatasetManifest::new(split, samples)?;
    manifest.write(&out_dir.join(format!("{}.csv", split.as_str())))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::weights::{compute_class_weights, compute_distribution};

    #[test]
    fn deterministic_and_distribution_exact() {
        let spec = SynthSpec {
            counts: [10; 7],
            image_size: 16,
            seed: 7,
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_synthetic_dataset(&spec, Split::Train, a.path()).unwrap();
        let mb = generate_synthetic_dataset(&spec, Split::Train, b.path()).unwrap();
        let text_a = fs::read(a.path().join("train.csv")).unwrap();
        let text_b = fs::read(b.path().join("train.csv")).unwrap();
        assert_eq!(text_a, text_b);
        assert_eq!(ma, mb);
        let img_a = fs::read(a.path().join(&ma.samples()[13].image_path)).unwrap();
        let img_b = fs::read(b.path().join(&mb.samples()[13].image_path)).unwrap();
        assert_eq!(img_a, img_b);
        assert_eq!(compute_distribution(&ma).counts(), &[10; 7]);
    }

    #[test]
    fn imbalanced_and_zero_class_specs() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            counts: [100, 4, 2, 1, 30, 20, 10],
            image_size: 8,
            seed: 1,
        };
        let m = generate_synthetic_dataset(&spec, Split::Train, dir.path()).unwrap();
        let w = compute_class_weights(&compute_distribution(&m)).unwrap();
        assert_eq!(w.to_scalars::<f64>()[0], 1.0);
        assert_eq!(w.to_scalars::<f64>()[3], 100.0);

        let spec = SynthSpec {
            counts: [3, 0, 1, 1, 1, 1, 1],
            image_size: 8,
            seed: 1,
        };
        let m = generate_synthetic_dataset(&spec, Split::Val, dir.path()).unwrap();
        assert_eq!(m.len(), 8);
        assert!(compute_class_weights(&compute_distribution(&m)).is_err());
    }

    #[test]
    fn rejects_tiny_images() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            counts: [1; 7],
            image_size: 4,
            seed: 0,
        };
        assert!(generate_synthetic_dataset(&spec, Split::Train, dir.path()).is_err());
    }

    #[test]
    fn classes_have_distinct_mean_tints() {
        let mut rng = stream(3, Stream::Synthesis, &[]);
        let means: Vec<[f32; 3]> = ExpressionLabel::all()
            .map(|l| {
                let img = render_signature(l, 32, &mut rng);
                let plane = 32 * 32;
                std::array::from_fn(|c| {
                    img.data()[c * plane..(c + 1) * plane].iter().sum::<f32>() / plane as f32
                })
            })
            .collect();
        for i in 0..7 {
            for j in i + 1..7 {
                let d: f32 = (0..3).map(|c| (means[i][c] - means[j][c]).abs()).sum();
                assert!(d > 0.02, "classes {i} and {j} share a tint");
            }
        }
    }
}

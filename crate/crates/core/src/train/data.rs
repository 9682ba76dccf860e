//! Manifest-backed image sources and batch assembly.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::augment::{Image, Transform};
use crate::dataset::{DatasetManifest, ExpressionLabel, Sample};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Images of a manifest; relative sample paths resolve against `root`.
#[derive(Clone, Debug)]
pub struct ImageSet<T> {
    manifest: DatasetManifest,
    root: PathBuf,
    cache: Option<Vec<Image<T>>>,
}

impl<T: Scalar> ImageSet<T> {
    /// With `preload`, every image is decoded up front, in parallel.
    pub fn new(manifest: DatasetManifest, root: impl Into<PathBuf>, preload: bool) -> Result<Self> {
        let mut set = ImageSet {
            manifest,
            root: root.into(),
            cache: None,
        };
        if preload {
            let images = (0..set.len())
                .into_par_iter()
                .map(|i| set.decode(i))
                .collect::<Result<Vec<_>>>()?;
            set.cache = Some(images);
        }
        Ok(set)
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn sample(&self, index: usize) -> &Sample {
        &self.manifest.samples()[index]
    }

    pub fn resolve(&self, sample: &Sample) -> PathBuf {
        resolve_path(&self.root, &sample.image_path)
    }

    fn decode(&self, index: usize) -> Result<Image<T>> {
        Image::open(&self.resolve(self.sample(index)))
    }

    pub fn image(&self, index: usize) -> Result<Image<T>> {
        match &self.cache {
            Some(images) => Ok(images[index].clone()),
            None => self.decode(index),
        }
    }

    /// Transforms `indices` into an `N×C×H×W` batch; the image at position `j`
    /// uses randomness index `draw_base + j`.
    pub fn batch(
        &self,
        indices: &[usize],
        pipeline: &dyn Transform<T>,
        draw_base: u64,
    ) -> Result<(Tensor<T>, Vec<ExpressionLabel>)> {
        let images = indices
            .par_iter()
            .enumerate()
            .map(|(j, &i)| pipeline.apply(&self.image(i)?, draw_base + j as u64))
            .collect::<Result<Vec<_>>>()?;
        let labels = indices.iter().map(|&i| self.sample(i).label).collect();
        Ok((stack(&images)?, labels))
    }
}

pub fn resolve_path(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

/// Stacks equally sized images into an `N×3×H×W` tensor.
pub fn stack<T: Scalar>(images: &[Image<T>]) -> Result<Tensor<T>> {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height(), i.width()));
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

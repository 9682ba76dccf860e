use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{horizontal_flip, resize_bilinear, Image, CHANNELS};
use super::jitter::{color_jitter, JitterConfig};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;

/// Network input geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTensorSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for ImageTensorSpec {
    fn default() -> Self {
        ImageTensorSpec {
            height: 112,
            width: 112,
            channels: CHANNELS,
        }
    }
}

impl ImageTensorSpec {
    pub fn square(side: usize) -> Self {
        ImageTensorSpec {
            height: side,
            width: side,
            channels: CHANNELS,
        }
    }

    pub fn conforms<T: Scalar>(&self, img: &Image<T>) -> bool {
        self.channels == CHANNELS && img.height() == self.height && img.width() == self.width
    }
}

/// Per-channel standardization `(x - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    /// Statistics used for synthetic runs without a pretrained backbone.
    fn default() -> Self {
        Normalization {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s.is_finite() && s > 0.0))
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Config(format!("invalid normalization {self:?}")));
        }
        Ok(())
    }

    pub fn apply<T: Scalar>(&self, img: &Image<T>) -> Image<T> {
        let mut data = img.data().to_vec();
        let plane = img.height() * img.width();
        for c in 0..CHANNELS {
            let (m, inv) = (T::of(self.mean[c]), T::of(1.0 / self.std[c]));
            for v in &mut data[c * plane..(c + 1) * plane] {
                *v = (*v - m) * inv;
            }
        }
        Image::new(img.height(), img.width(), data).expect("same geometry")
    }

    /// Image of `[0, 1]` under the standardization, per channel.
    pub fn output_bounds(&self) -> [(f64, f64); 3] {
        std::array::from_fn(|c| {
            (
                -self.mean[c] / self.std[c],
                (1.0 - self.mean[c]) / self.std[c],
            )
        })
    }
}

/// Image transform keyed by the sample's draw index.
pub trait Transform<T: Scalar>: Send + Sync {
    fn apply(&self, image: &Image<T>, sample_index: u64) -> Result<Image<T>>;
}

/// resize → flip → jitter → normalize, randomness from the `(seed, sample_index)` stream.
#[derive(Clone, Debug)]
pub struct TrainPipeline {
    pub jitter: JitterConfig,
    pub normalization: Normalization,
    pub spec: ImageTensorSpec,
    pub seed: u64,
}

/// resize → normalize.
#[derive(Clone, Debug)]
pub struct EvalPipeline {
    pub normalization: Normalization,
    pub spec: ImageTensorSpec,
}

pub fn build_train_pipeline(
    config: &JitterConfig,
    normalization: Normalization,
    spec: ImageTensorSpec,
    seed: u64,
) -> Result<TrainPipeline> {
    config.validate()?;
    normalization.validate()?;
    Ok(TrainPipeline {
        jitter: config.clone(),
        normalization,
        spec,
        seed,
    })
}

pub fn build_eval_pipeline(
    normalization: Normalization,
    spec: ImageTensorSpec,
) -> Result<EvalPipeline> {
    normalization.validate()?;
    Ok(EvalPipeline {
        normalization,
        spec,
    })
}

impl TrainPipeline {
    /// Augmented image before normalization, in `[0, 1]`.
    pub fn augment<T: Scalar>(&self, image: &Image<T>, sample_index: u64) -> Result<Image<T>> {
        let mut rng = stream(self.seed, Stream::Augment, &[sample_index]);
        let coin = rng.gen::<f64>() < self.jitter.flip_probability;
        let factors = self.jitter.sample(&mut rng);
        let resized = resize_bilinear(image, self.spec.height, self.spec.width);
        let flipped = horizontal_flip(&resized, coin);
        color_jitter(&flipped, &factors, &self.jitter)
    }
}

impl<T: Scalar> Transform<T> for TrainPipeline {
    fn apply(&self, image: &Image<T>, sample_index: u64) -> Result<Image<T>> {
        Ok(self
            .normalization
            .apply(&self.augment(image, sample_index)?))
    }
}

impl<T: Scalar> Transform<T> for EvalPipeline {
    fn apply(&self, image: &Image<T>, _sample_index: u64) -> Result<Image<T>> {
        let resized = resize_bilinear(image, self.spec.height, self.spec.width);
        Ok(self.normalization.apply(&resized.clamp01()))
    }
}

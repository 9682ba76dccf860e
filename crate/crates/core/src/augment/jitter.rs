//! Brightness, contrast, saturation and hue jitter.
//!
//! A config magnitude `m` for brightness/contrast/saturation samples a
//! multiplicative factor uniformly from `[max(0, 1 - m), 1 + m]`; the hue
//! magnitude samples a shift from `[-m, m]` as a fraction of the full hue
//! circle, so `m <= 0.5`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterConfig {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub flip_probability: f64,
    /// Shuffle the four sub-operations per image instead of the fixed order.
    pub random_order: bool,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            brightness: 0.4,
            contrast: 0.3,
            saturation: 0.25,
            hue: 0.5,
            flip_probability: 0.5,
            random_order: false,
        }
    }
}

impl JitterConfig {
    /// No flips, identity factors.
    pub fn disabled() -> Self {
        JitterConfig {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            flip_probability: 0.0,
            random_order: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "jitter.{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.hue > 0.5 {
            return Err(Error::Config(format!(
                "jitter.hue must be at most 0.5, got {}",
                self.hue
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "jitter.flip_probability must lie in [0, 1], got {}",
                self.flip_probability
            )));
        }
        Ok(())
    }

    pub fn brightness_range(&self) -> (f64, f64) {
        factor_range(self.brightness)
    }

    pub fn contrast_range(&self) -> (f64, f64) {
        factor_range(self.contrast)
    }

    pub fn saturation_range(&self) -> (f64, f64) {
        factor_range(self.saturation)
    }

    pub fn hue_range(&self) -> (f64, f64) {
        (-self.hue, self.hue)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> JitterFactors {
        let draw =
            |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let brightness = draw(rng, self.brightness_range());
        let contrast = draw(rng, self.contrast_range());
        let saturation = draw(rng, self.saturation_range());
        let hue = draw(rng, self.hue_range());
        let mut order = JitterOp::FIXED_ORDER;
        if self.random_order {
            order.shuffle(rng);
        }
        JitterFactors {
            brightness,
            contrast,
            saturation,
            hue,
            order,
        }
    }
}

fn factor_range(m: f64) -> (f64, f64) {
    ((1.0 - m).max(0.0), 1.0 + m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

impl JitterOp {
    pub const FIXED_ORDER: [JitterOp; 4] = [
        JitterOp::Brightness,
        JitterOp::Contrast,
        JitterOp::Saturation,
        JitterOp::Hue,
    ];
}

/// Concrete per-image factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub order: [JitterOp; 4],
}

impl JitterFactors {
    pub fn identity() -> Self {
        JitterFactors {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            order: JitterOp::FIXED_ORDER,
        }
    }

    pub fn new(brightness: f64, contrast: f64, saturation: f64, hue: f64) -> Self {
        JitterFactors {
            brightness,
            contrast,
            saturation,
            hue,
            order: JitterOp::FIXED_ORDER,
        }
    }

    fn check(&self, config: &JitterConfig) -> Result<()> {
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo - 1e-12 && v <= hi + 1e-12;
        let checks = [
            ("brightness", self.brightness, config.brightness_range()),
            ("contrast", self.contrast, config.contrast_range()),
            ("saturation", self.saturation, config.saturation_range()),
            ("hue", self.hue, config.hue_range()),
        ];
        for (name, v, range) in checks {
            if !inside(v, range) {
                return Err(Error::Contract(format!(
                    "{name} factor {v} outside configured range [{}, {}]",
                    range.0, range.1
                )));
            }
        }
        Ok(())
    }
}

/// ITU-R 601 luma.
#[inline]
fn luma<T: Scalar>([r, g, b]: [T; 3]) -> T {
    T::of(0.299) * r + T::of(0.587) * g + T::of(0.114) * b
}

pub fn adjust_brightness<T: Scalar>(img: &Image<T>, factor: T) -> Image<T> {
    img.map(|v| v * factor).clamp01()
}

pub fn adjust_contrast<T: Scalar>(img: &Image<T>, factor: T) -> Image<T> {
    let n = T::of_usize(img.height() * img.width());
    let mut total = T::zero();
    for y in 0..img.height() {
        for x in 0..img.width() {
            total += luma(img.pixel(y, x));
        }
    }
    let mean = total / n;
    let offset = (T::one() - factor) * mean;
    img.map(|v| factor * v + offset).clamp01()
}

pub fn adjust_saturation<T: Scalar>(img: &Image<T>, factor: T) -> Image<T> {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let px = img.pixel(y, x);
            let gray = (T::one() - factor) * luma(px);
            out.set_pixel(
                y,
                x,
                px.map(|v| (factor * v + gray).max(T::zero()).min(T::one())),
            );
        }
    }
    out
}

pub fn adjust_hue<T: Scalar>(img: &Image<T>, shift: T) -> Image<T> {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let [h, s, v] = rgb_to_hsv(img.pixel(y, x));
            let mut h = (h + shift) % T::one();
            if h < T::zero() {
                h += T::one();
            }
            out.set_pixel(y, x, hsv_to_rgb([h, s, v]));
        }
    }
    out
}

/// Applies the factors in their recorded order; output stays in `[0, 1]`.
pub fn color_jitter<T: Scalar>(
    img: &Image<T>,
    factors: &JitterFactors,
    config: &JitterConfig,
) -> Result<Image<T>> {
    factors.check(config)?;
    let mut out = img.clone();
    for op in factors.order {
        out = match op {
            JitterOp::Brightness if factors.brightness != 1.0 => {
                adjust_brightness(&out, T::of(factors.brightness))
            }
            JitterOp::Contrast if factors.contrast != 1.0 => {
                adjust_contrast(&out, T::of(factors.contrast))
            }
            JitterOp::Saturation if factors.saturation != 1.0 => {
                adjust_saturation(&out, T::of(factors.saturation))
            }
            JitterOp::Hue if factors.hue != 0.0 => adjust_hue(&out, T::of(factors.hue)),
            _ => continue,
        };
    }
    Ok(out)
}

/// `[r, g, b]` in `[0, 1]` to `[h, s, v]` with hue as a fraction of the circle.
pub fn rgb_to_hsv<T: Scalar>([r, g, b]: [T; 3]) -> [T; 3] {
    let maxc = r.max(g).max(b);
    let minc = r.min(g).min(b);
    let v = maxc;
    let range = maxc - minc;
    if range <= T::zero() {
        return [T::zero(), T::zero(), v];
    }
    let s = range / maxc;
    let rc = (maxc - r) / range;
    let gc = (maxc - g) / range;
    let bc = (maxc - b) / range;
    let h = if r == maxc {
        bc - gc
    } else if g == maxc {
        T::of(2.0) + rc - bc
    } else {
        T::of(4.0) + gc - rc
    };
    let mut h = (h / T::of(6.0)) % T::one();
    if h < T::zero() {
        h += T::one();
    }
    [h, s, v]
}

pub fn hsv_to_rgb<T: Scalar>([h, s, v]: [T; 3]) -> [T; 3] {
    if s <= T::zero() {
        return [v, v, v];
    }
    let scaled = h * T::of(6.0);
    let sector = scaled.floor();
    let f = scaled - sector;
    let p = v * (T::one() - s);
    let q = v * (T::one() - s * f);
    let t = v * (T::one() - s * (T::one() - f));
    match sector.as_f64() as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

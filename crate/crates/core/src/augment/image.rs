use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Planar RGB image, channel-major (`C×H×W`), values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

pub const CHANNELS: usize = 3;

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != CHANNELS * height * width {
            return Err(Error::Contract(format!(
                "image {height}x{width} needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [T; 3]) -> Self {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [T; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [T; 3]) {
        for (c, &v) in rgb.iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| v >= T::zero() && v <= T::one())
    }

    /// Decodes any supported container into `[0, 1]` RGB.
    pub fn open(path: &Path) -> Result<Self> {
        let decoded = image::open(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&decoded.to_rgb8()))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let scale = T::of(1.0 / 255.0);
        Self::from_fn(h, w, |c, y, x| {
            T::of(img.get_pixel(x as u32, y as u32)[c] as f64) * scale
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = self.pixel(y as usize, x as usize);
            image::Rgb(px.map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Decode {
                    path: path.to_path_buf(),
                    message: other.to_string(),
                },
            })
    }
}

/// Reverses columns when `coin` is set.
pub fn horizontal_flip<T: Scalar>(image: &Image<T>, coin: bool) -> Image<T> {
    if !coin {
        return image.clone();
    }
    let w = image.width;
    Image::from_fn(image.height, w, |c, y, x| image.get(c, y, w - 1 - x))
}

/// Bilinear resampling with half-pixel centers. Same-size input is returned unchanged.
pub fn resize_bilinear<T: Scalar>(image: &Image<T>, height: usize, width: usize) -> Image<T> {
    if image.height == height && image.width == width {
        return image.clone();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, T)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, T::of(src - lo as f64))
            })
            .collect()
    };
    let ys = axis(height, image.height);
    let xs = axis(width, image.width);
    Image::from_fn(height, width, |c, y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = image.get(c, y0, x0) * (T::one() - fx) + image.get(c, y0, x1) * fx;
        let bottom = image.get(c, y1, x0) * (T::one() - fx) + image.get(c, y1, x1) * fx;
        top * (T::one() - fy) + bottom * fy
    })
}

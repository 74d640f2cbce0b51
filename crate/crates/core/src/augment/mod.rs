//! Image-space processing: AugMix training augmentation, deterministic test
//! corruptions, and the denoise/equalize test-time restoration.
//!
//! Images are plain channel-major `f64` rasters in `[0, 1]`; every
//! operation is pure and clamps its output back into range.

mod augmix;
mod corrupt;
mod restore;

pub use augmix::{augmix, AugMixOp, AugMixSpec};
pub use corrupt::{corrupt, read_corruption_manifest, write_corruption_manifest, CorruptionKind, CorruptionSpec};
pub use restore::{denoise_wavelet, denoise_wavelet_with_threshold, equalize_hist, preprocess_test, PreprocessFlags, PreprocessOrder};

use crate::error::{Error, Result};
use crate::io::ppm::RgbBytes;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Three-channel image, channel-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != CHANNELS * height * width {
            return Err(Error::invalid(format!(
                "{} values do not form a {CHANNELS}x{height}x{width} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from `f(channel, y, x)`, clamping into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(clamp01(f(c, y, x)));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self::from_fn(height, width, |_, _, _| value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Applies `f` to every value and clamps.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| clamp01(f(v))).collect(),
        }
    }

    pub(crate) fn from_raw_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), CHANNELS * height * width);
        for v in &mut data {
            *v = clamp01(*v);
        }
        Self { height, width, data }
    }

    /// Mean squared difference to `other`.
    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        sum / self.data.len() as f64
    }

    /// Quantises to 8-bit interleaved RGB with `round(255 v)`.
    pub fn to_rgb_bytes(&self) -> RgbBytes {
        let plane = self.height * self.width;
        let mut pixels = Vec::with_capacity(CHANNELS * plane);
        for p in 0..plane {
            for c in 0..CHANNELS {
                pixels.push((self.data[c * plane + p] * 255.0).round() as u8);
            }
        }
        RgbBytes { width: self.width, height: self.height, pixels }
    }

    pub fn from_rgb_bytes(rgb: &RgbBytes) -> Result<Self> {
        let plane = rgb.width * rgb.height;
        if rgb.pixels.len() != CHANNELS * plane {
            return Err(Error::invalid("pixel buffer does not match the raster size"));
        }
        let mut data = vec![0.0; CHANNELS * plane];
        for p in 0..plane {
            for c in 0..CHANNELS {
                data[c * plane + p] = f64::from(rgb.pixels[p * CHANNELS + c]) / 255.0;
            }
        }
        Self::new(rgb.height, rgb.width, data)
    }

    /// Image of `[3, H, W]` tensor values, clamped into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let [c, h, w] = t.shape()[..] else {
            return Err(Error::invalid(format!("expected [3, H, W], got {:?}", t.shape())));
        };
        if c != CHANNELS {
            return Err(Error::invalid(format!("expected 3 channels, got {c}")));
        }
        Ok(Self::from_raw_clamped(h, w, t.data().iter().map(|v| v.as_f64()).collect()))
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_parts(vec![CHANNELS, self.height, self.width], self.data.iter().map(|&v| T::lit(v)).collect())
    }
}

/// Stacks equally sized images into `[B, 3, H, W]`.
pub fn stack_images<T: Real>(images: &[Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to stack"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::shape("stack_images", &[h, w], &[img.height, img.width]));
        }
        data.extend(img.data.iter().map(|&v| T::lit(v)));
    }
    Tensor::new([images.len(), CHANNELS, h, w], data)
}

pub(crate) fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        assert!(Image::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(Image::new(1, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn byte_round_trip_is_exact_on_quantised_images() {
        let img = Image::from_fn(3, 5, |c, y, x| ((c * 31 + y * 7 + x * 13) % 256) as f64 / 255.0);
        let back = Image::from_rgb_bytes(&img.to_rgb_bytes()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn stacking_keeps_channel_major_order() {
        let a = Image::from_fn(2, 2, |c, y, x| (c * 4 + y * 2 + x) as f64 / 16.0);
        let t: Tensor<f64> = stack_images(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 2]);
        assert_eq!(&t.data()[12..], a.data());
        assert_eq!(Image::from_tensor(&t.slice0(1).reshape([3, 2, 2]).unwrap()).unwrap(), a);
    }
}

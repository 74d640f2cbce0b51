//! Test-time restoration: Haar wavelet shrinkage and histogram equalisation.

use serde::{Deserialize, Serialize};

use super::{Image, CHANNELS};

const LEVELS: usize = 256;

/// Soft-threshold denoising with the universal threshold
/// `sigma * sqrt(2 ln N)`, `sigma = median(|HH|) / 0.6745`, per channel.
pub fn denoise_wavelet(img: &Image) -> Image {
    denoise_impl(img, None)
}

/// [`denoise_wavelet`] with a fixed threshold instead of the estimated one.
pub fn denoise_wavelet_with_threshold(img: &Image, threshold: f64) -> Image {
    denoise_impl(img, Some(threshold))
}

fn denoise_impl(img: &Image, threshold: Option<f64>) -> Image {
    let (h, w) = (img.height(), img.width());
    // odd sizes are padded by repeating the last row/column (symmetric reflection)
    let (ph, pw) = (h + h % 2, w + w % 2);
    let (hh, hw) = (ph / 2, pw / 2);
    let mut out = Vec::with_capacity(img.data().len());
    for c in 0..CHANNELS {
        let src = img.channel(c);
        let px = |y: usize, x: usize| src[y.min(h - 1) * w + x.min(w - 1)];
        let n = hh * hw;
        let (mut a, mut dh, mut dv, mut dd) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..hh {
            for j in 0..hw {
                let (x00, x01) = (px(2 * i, 2 * j), px(2 * i, 2 * j + 1));
                let (x10, x11) = (px(2 * i + 1, 2 * j), px(2 * i + 1, 2 * j + 1));
                let k = i * hw + j;
                a[k] = (x00 + x01 + x10 + x11) / 2.0;
                dh[k] = (x00 - x01 + x10 - x11) / 2.0;
                dv[k] = (x00 + x01 - x10 - x11) / 2.0;
                dd[k] = (x00 - x01 - x10 + x11) / 2.0;
            }
        }
        let t = threshold.unwrap_or_else(|| {
            let mut mags: Vec<f64> = dd.iter().map(|v| v.abs()).collect();
            let sigma = median(&mut mags) / 0.6745;
            sigma * (2.0 * ((h * w) as f64).ln()).sqrt()
        });
        for band in [&mut dh, &mut dv, &mut dd] {
            for v in band.iter_mut() {
                *v = v.signum() * (v.abs() - t).max(0.0);
            }
        }
        let mut plane = vec![0.0; ph * pw];
        for i in 0..hh {
            for j in 0..hw {
                let k = i * hw + j;
                let (s, ch, cv, cd) = (a[k], dh[k], dv[k], dd[k]);
                plane[2 * i * pw + 2 * j] = (s + ch + cv + cd) / 2.0;
                plane[2 * i * pw + 2 * j + 1] = (s - ch + cv - cd) / 2.0;
                plane[(2 * i + 1) * pw + 2 * j] = (s + ch - cv - cd) / 2.0;
                plane[(2 * i + 1) * pw + 2 * j + 1] = (s - ch - cv + cd) / 2.0;
            }
        }
        for y in 0..h {
            out.extend_from_slice(&plane[y * pw..y * pw + w]);
        }
    }
    Image::from_raw_clamped(h, w, out)
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn bin(v: f64) -> usize {
    ((v * LEVELS as f64) as usize).min(LEVELS - 1)
}

/// Per-channel 256-bin equalisation: a value in bin `b` maps to `cdf(b) / N`.
pub fn equalize_hist(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let n = (h * w) as f64;
    let mut out = Vec::with_capacity(img.data().len());
    for c in 0..CHANNELS {
        let src = img.channel(c);
        let mut cdf = [0usize; LEVELS];
        for &v in src {
            cdf[bin(v)] += 1;
        }
        for b in 1..LEVELS {
            cdf[b] += cdf[b - 1];
        }
        out.extend(src.iter().map(|&v| cdf[bin(v)] as f64 / n));
    }
    Image::from_raw_clamped(h, w, out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessOrder {
    #[default]
    DenoiseFirst,
    EqualizeFirst,
}

/// Which test-time restorations to run, and in which order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessFlags {
    pub denoise: bool,
    pub equalize: bool,
    pub order: PreprocessOrder,
}

impl PreprocessFlags {
    pub const NONE: Self = Self { denoise: false, equalize: false, order: PreprocessOrder::DenoiseFirst };
    pub const BOTH: Self = Self { denoise: true, equalize: true, order: PreprocessOrder::DenoiseFirst };

    pub fn is_identity(&self) -> bool {
        !self.denoise && !self.equalize
    }
}

pub fn preprocess_test(img: &Image, flags: PreprocessFlags) -> Image {
    let denoise = |i: Image| if flags.denoise { denoise_wavelet(&i) } else { i };
    let equalize = |i: Image| if flags.equalize { equalize_hist(&i) } else { i };
    match flags.order {
        PreprocessOrder::DenoiseFirst => equalize(denoise(img.clone())),
        PreprocessOrder::EqualizeFirst => denoise(equalize(img.clone())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{corrupt, CorruptionKind, CorruptionSpec};

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |c, y, x| 0.2 + 0.6 * (x as f64 / w as f64) * (0.5 + 0.5 * y as f64 / h as f64) + 0.05 * c as f64)
    }

    #[test]
    fn constant_image_is_a_fixed_point() {
        let img = Image::constant(9, 14, 0.37);
        assert_eq!(denoise_wavelet(&img), img);
    }

    #[test]
    fn zero_threshold_reconstructs() {
        for (h, w) in [(8, 12), (7, 9)] {
            let img = Image::from_fn(h, w, |c, y, x| ((c * 17 + y * 5 + x * 3) % 23) as f64 / 23.0);
            let out = denoise_wavelet_with_threshold(&img, 0.0);
            let worst = img.data().iter().zip(out.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-10, "{worst}");
        }
    }

    #[test]
    fn denoising_reduces_noise_error() {
        let clean = ramp(64, 96);
        let (mut before, mut after) = (0.0, 0.0);
        for seed in 0..20 {
            let noisy = corrupt(&clean, &CorruptionSpec::new(CorruptionKind::GaussianNoise, 3, seed).unwrap());
            before += noisy.mse(&clean);
            after += denoise_wavelet(&noisy).mse(&clean);
        }
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn two_level_equalisation() {
        let img = Image::from_fn(4, 4, |_, y, _| if y < 2 { 0.2 } else { 0.8 });
        let out = equalize_hist(&img);
        assert_eq!(out.at(0, 0, 0), 0.5);
        assert_eq!(out.at(2, 3, 3), 1.0);
    }

    #[test]
    fn uniform_histogram_is_nearly_unchanged() {
        let img = Image::from_fn(16, 16, |_, y, x| (y * 16 + x) as f64 / 255.0);
        let out = equalize_hist(&img);
        let worst = img.data().iter().zip(out.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.0 / 256.0 + 1e-15, "{worst}");
    }

    #[test]
    fn equalised_cdf_is_flat() {
        // continuous tone: smooth non-linear gradients with no dominant level
        let img = Image::from_fn(48, 64, |c, y, x| {
            let t = 0.2 + 0.8 * (x as f64 + 64.0 * y as f64) / (48.0 * 64.0);
            t.powf(1.0 + 0.2 * c as f64)
        });
        let out = equalize_hist(&img);
        for c in 0..CHANNELS {
            let mut hist = [0usize; LEVELS];
            for &v in out.channel(c) {
                hist[bin(v)] += 1;
            }
            let n = (48 * 64) as f64;
            let mut acc = 0;
            for (b, count) in hist.iter().enumerate() {
                acc += count;
                let dev = (acc as f64 / n - (b + 1) as f64 / LEVELS as f64).abs();
                assert!(dev <= 2.0 / 256.0, "channel {c} bin {b}: {dev}");
            }
        }
    }

    #[test]
    fn preprocessing_composes_and_can_be_disabled() {
        let img = corrupt(&ramp(16, 24), &CorruptionSpec::new(CorruptionKind::ShotNoise, 4, 3).unwrap());
        assert_eq!(preprocess_test(&img, PreprocessFlags::NONE), img);
        assert_eq!(preprocess_test(&img, PreprocessFlags::BOTH), equalize_hist(&denoise_wavelet(&img)));
        let eq_first = PreprocessFlags { order: PreprocessOrder::EqualizeFirst, ..PreprocessFlags::BOTH };
        assert_eq!(preprocess_test(&img, eq_first), denoise_wavelet(&equalize_hist(&img)));
    }
}

//! AugMix: convex mixtures of short chains of mild photometric and
//! geometric operations, blended with the original image.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use super::restore::equalize_hist;
use super::{Image, CHANNELS};
use crate::error::{Error, Result};

const MAX_ROTATE_DEG: f64 = 15.0;
const MAX_TRANSLATE: f64 = 0.1;
const MAX_SHEAR_DEG: f64 = 10.0;

/// The augmentation vocabulary. None of these coincide with a test corruption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugMixOp {
    Rotate,
    Translate,
    Shear,
    Equalize,
    Posterize,
    Solarize,
    Autocontrast,
}

impl AugMixOp {
    pub const ALL: [AugMixOp; 7] = [
        Self::Rotate,
        Self::Translate,
        Self::Shear,
        Self::Equalize,
        Self::Posterize,
        Self::Solarize,
        Self::Autocontrast,
    ];

    /// Applies the operation with a magnitude drawn from `rng`.
    pub fn apply(self, img: &Image, rng: &mut impl Rng) -> Image {
        match self {
            Self::Rotate => {
                let a = rng.gen_range(-MAX_ROTATE_DEG..=MAX_ROTATE_DEG).to_radians();
                let (s, c) = a.sin_cos();
                warp(img, [c, -s, s, c], [0.0, 0.0])
            }
            Self::Translate => {
                let t = rng.gen_range(-MAX_TRANSLATE..=MAX_TRANSLATE);
                if rng.gen::<bool>() {
                    warp(img, [1.0, 0.0, 0.0, 1.0], [t * img.width() as f64, 0.0])
                } else {
                    warp(img, [1.0, 0.0, 0.0, 1.0], [0.0, t * img.height() as f64])
                }
            }
            Self::Shear => {
                let k = rng.gen_range(-MAX_SHEAR_DEG..=MAX_SHEAR_DEG).to_radians().tan();
                if rng.gen::<bool>() {
                    warp(img, [1.0, k, 0.0, 1.0], [0.0, 0.0])
                } else {
                    warp(img, [1.0, 0.0, k, 1.0], [0.0, 0.0])
                }
            }
            Self::Equalize => equalize_hist(img),
            Self::Posterize => {
                let bits = rng.gen_range(4..=7u32);
                let levels = f64::from(1u32 << bits);
                img.map(|v| (v * levels).floor().min(levels - 1.0) / (levels - 1.0))
            }
            Self::Solarize => {
                let t = rng.gen_range(0.5..=1.0);
                img.map(|v| if v >= t { 1.0 - v } else { v })
            }
            Self::Autocontrast => autocontrast(img),
        }
    }
}

/// Samples the source at `A (p - centre) + centre - t` for each output
/// pixel `p`, bilinearly with clamped borders.
fn warp(img: &Image, a: [f64; 4], t: [f64; 2]) -> Image {
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(img.data().len());
    for c in 0..CHANNELS {
        let src = img.channel(c);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let sx = (a[0] * dx + a[1] * dy + cx - t[0]).clamp(0.0, (w - 1) as f64);
                let sy = (a[2] * dx + a[3] * dy + cy - t[1]).clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                let top = src[y0 * w + x0] + fx * (src[y0 * w + x1] - src[y0 * w + x0]);
                let bot = src[y1 * w + x0] + fx * (src[y1 * w + x1] - src[y1 * w + x0]);
                out.push(top + fy * (bot - top));
            }
        }
    }
    Image::from_raw_clamped(h, w, out)
}

fn autocontrast(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(img.data().len());
    for c in 0..CHANNELS {
        let ch = img.channel(c);
        let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            out.extend(ch.iter().map(|v| (v - lo) / (hi - lo)));
        } else {
            out.extend_from_slice(ch);
        }
    }
    Image::from_raw_clamped(h, w, out)
}

/// AugMix hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugMixSpec {
    /// Number of parallel chains.
    pub width: usize,
    /// Chain length is drawn uniformly from `1..=max_depth`.
    pub max_depth: usize,
    /// Dirichlet concentration of the chain weights.
    pub alpha: f64,
    /// Fixed weight of the original image; drawn from `Beta(alpha, alpha)` when `None`.
    pub skip_weight: Option<f64>,
    pub ops: Vec<AugMixOp>,
}

impl Default for AugMixSpec {
    fn default() -> Self {
        Self { width: 3, max_depth: 3, alpha: 1.0, skip_weight: None, ops: AugMixOp::ALL.to_vec() }
    }
}

impl AugMixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.max_depth == 0 || self.ops.is_empty() || !(self.alpha > 0.0) {
            return Err(Error::invalid(format!("invalid augmix spec {self:?}")));
        }
        if self.skip_weight.is_some_and(|s| !(0.0..=1.0).contains(&s)) {
            return Err(Error::invalid("skip weight must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `s * img + (1 - s) * Σ_k w_k chain_k(img)` with Dirichlet weights `w`.
pub fn augmix(img: &Image, spec: &AugMixSpec, seed: u64) -> Result<Image> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = if spec.width == 1 {
        vec![1.0]
    } else {
        Dirichlet::new(&vec![spec.alpha; spec.width]).expect("valid concentration").sample(&mut rng)
    };
    let skip = Beta::new(spec.alpha, spec.alpha).expect("valid concentration").sample(&mut rng);
    let skip = spec.skip_weight.unwrap_or(skip);
    let mut mix = vec![0.0; img.data().len()];
    for &wk in &weights {
        let depth = rng.gen_range(1..=spec.max_depth);
        let mut chained = img.clone();
        for _ in 0..depth {
            let op = *spec.ops.choose(&mut rng).expect("non-empty op set");
            chained = op.apply(&chained, &mut rng);
        }
        for (m, v) in mix.iter_mut().zip(chained.data()) {
            *m += wk * v;
        }
    }
    let out = img.data().iter().zip(&mix).map(|(&x, &m)| skip * x + (1.0 - skip) * m).collect();
    Ok(Image::from_raw_clamped(img.height(), img.width(), out))
}

//! Deterministic test-time corruptions with five severity levels.
//!
//! Severity tables live in `docs/corruptions.md`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{Image, CHANNELS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        Self::GaussianNoise,
        Self::ShotNoise,
        Self::ImpulseNoise,
        Self::Brightness,
        Self::Contrast,
        Self::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::ShotNoise => "shot_noise",
            Self::ImpulseNoise => "impulse_noise",
            Self::Brightness => "brightness",
            Self::Contrast => "contrast",
            Self::Pixelate => "pixelate",
        }
    }

    /// Severity-indexed parameter (index 0 is severity 1).
    pub fn table(self) -> [f64; 5] {
        match self {
            Self::GaussianNoise => [0.08, 0.12, 0.18, 0.26, 0.38],
            Self::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            Self::ImpulseNoise => [0.03, 0.06, 0.09, 0.17, 0.27],
            Self::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            Self::Contrast => [0.4, 0.3, 0.2, 0.1, 0.05],
            Self::Pixelate => [2.0, 3.0, 4.0, 5.0, 6.0],
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown corruption kind `{s}`")))
    }
}

/// One deterministic degradation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

#[derive(Deserialize)]
struct RawSpec {
    kind: CorruptionKind,
    severity: u8,
    #[serde(default)]
    seed: u64,
}

impl TryFrom<RawSpec> for CorruptionSpec {
    type Error = Error;

    fn try_from(r: RawSpec) -> Result<Self> {
        Self::new(r.kind, r.severity, r.seed)
    }
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::invalid(format!("severity {severity} outside 1..=5")));
        }
        Ok(Self { kind, severity, seed })
    }

    pub fn parameter(&self) -> f64 {
        self.kind.table()[usize::from(self.severity) - 1]
    }
}

pub fn corrupt(img: &Image, spec: &CorruptionSpec) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p = spec.parameter();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0, p).unwrap();
            img.map(|v| v + normal.sample(&mut rng))
        }
        CorruptionKind::ShotNoise => img.map(|v| {
            let lambda = v * p;
            if lambda > 0.0 {
                Poisson::new(lambda).unwrap().sample(&mut rng) / p
            } else {
                0.0
            }
        }),
        CorruptionKind::ImpulseNoise => img.map(|v| {
            if rng.gen::<f64>() < p {
                if rng.gen::<bool>() {
                    1.0
                } else {
                    0.0
                }
            } else {
                v
            }
        }),
        CorruptionKind::Brightness => img.map(|v| v + p),
        CorruptionKind::Contrast => {
            let plane = img.height() * img.width();
            let means: Vec<f64> = (0..CHANNELS).map(|c| img.channel(c).iter().sum::<f64>() / plane as f64).collect();
            let data = img
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let m = means[i / plane];
                    m + (v - m) * p
                })
                .collect();
            Image::from_raw_clamped(img.height(), img.width(), data)
        }
        CorruptionKind::Pixelate => pixelate(img, p as usize),
    }
}

/// Replaces each `block x block` tile by its mean. Means are accumulated
/// relative to the tile's first value so constant tiles stay bit-exact.
fn pixelate(img: &Image, block: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = img.data().to_vec();
    for c in 0..CHANNELS {
        let base = c * h * w;
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let (ey, ex) = ((by + block).min(h), (bx + block).min(w));
                let first = out[base + by * w + bx];
                let mut acc = 0.0;
                for y in by..ey {
                    for x in bx..ex {
                        acc += out[base + y * w + x] - first;
                    }
                }
                let mean = first + acc / ((ey - by) * (ex - bx)) as f64;
                for y in by..ey {
                    for x in bx..ex {
                        out[base + y * w + x] = mean;
                    }
                }
            }
        }
    }
    Image::from_raw_clamped(h, w, out)
}

/// Reads a JSON array of corruption specs.
pub fn read_corruption_manifest(path: &Path) -> Result<Vec<CorruptionSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

pub fn write_corruption_manifest(path: &Path, specs: &[CorruptionSpec]) -> Result<()> {
    let text = serde_json::to_string_pretty(specs).expect("specs serialise");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

use serde::{Deserialize, Serialize};

use crate::attention::VIEW_COUNT;
use crate::error::{Error, Result};
use crate::tensor::output_extent;

/// Patch-transformer encoder shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { patch_size: 8, channels: 64, blocks: 6, heads: 2, mlp_ratio: 4, image_height: 64, image_width: 96 }
    }
}

impl EncoderConfig {
    pub fn token_grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.token_grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// One decoder stage: which encoder tap feeds it, its resample scale and
/// whether multi-view attention runs before fusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    /// 1 = last encoder block, 4 = fourth-to-last.
    pub tap_from_end: usize,
    pub scale: f64,
    pub multiview: bool,
}

/// Decoder stages in fusion order (coarsest first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub fusion_channels: usize,
    pub head_channels: usize,
    pub attention_heads: usize,
    /// `F + Attn` when true, plain replacement `F = Attn` otherwise.
    pub residual_attention: bool,
    pub stages: Vec<StageSpec>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            fusion_channels: 32,
            head_channels: 16,
            attention_heads: 2,
            residual_attention: true,
            stages: vec![
                StageSpec { tap_from_end: 4, scale: 0.5, multiview: true },
                StageSpec { tap_from_end: 3, scale: 1.0, multiview: true },
                StageSpec { tap_from_end: 2, scale: 2.0, multiview: false },
                StageSpec { tap_from_end: 1, scale: 4.0, multiview: false },
            ],
        }
    }
}

impl DecoderConfig {
    /// Spatial size of every stage map after reassembly and resampling,
    /// in fusion order, for a `(h, w)` token grid.
    pub fn resolution_trace(&self, grid: (usize, usize)) -> Result<Vec<(usize, usize)>> {
        self.stages
            .iter()
            .map(|s| Ok((output_extent(grid.0, s.scale)?, output_extent(grid.1, s.scale)?)))
            .collect()
    }
}

/// Metric range of the sigmoid depth head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        Self { d_min: 0.1, d_max: 80.0 }
    }
}

impl DepthRange {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(Error::invalid(format!("depth range needs 0 < d_min < d_max, got {self:?}")));
        }
        Ok(())
    }

    pub fn span(&self) -> f64 {
        self.d_max - self.d_min
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub range: DepthRange,
    /// Depth emitted everywhere by a freshly initialised head.
    pub init_depth: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            range: DepthRange::default(),
            init_depth: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let d = &self.decoder;
        if e.patch_size == 0 || e.image_height % e.patch_size != 0 || e.image_width % e.patch_size != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                e.image_height, e.image_width, e.patch_size
            )));
        }
        if e.image_height == 0 || e.image_width == 0 {
            return Err(Error::invalid("empty image size"));
        }
        if e.blocks < 4 {
            return Err(Error::invalid(format!("encoder needs at least 4 blocks, got {}", e.blocks)));
        }
        if e.heads == 0 || e.channels % e.heads != 0 || d.attention_heads == 0 || e.channels % d.attention_heads != 0 {
            return Err(Error::invalid(format!(
                "head counts {}/{} must divide channel count {}",
                e.heads, d.attention_heads, e.channels
            )));
        }
        if d.stages.len() != 4 {
            return Err(Error::invalid(format!("decoder needs exactly 4 stages, got {}", d.stages.len())));
        }
        let mut taps: Vec<usize> = d.stages.iter().map(|s| s.tap_from_end).collect();
        taps.sort_unstable();
        if taps != [1, 2, 3, 4] {
            return Err(Error::invalid("decoder stages must use each of the last four taps once"));
        }
        if !(d.stages[0].multiview && d.stages[1].multiview && !d.stages[2].multiview && !d.stages[3].multiview) {
            return Err(Error::invalid("exactly the first two decoder stages carry multi-view attention"));
        }
        d.resolution_trace(e.token_grid())?;
        self.range.validate()?;
        if !(self.init_depth > self.range.d_min && self.init_depth < self.range.d_max) {
            return Err(Error::invalid("init_depth must lie inside the depth range"));
        }
        Ok(())
    }

    /// Output spatial size of the fused decoder feature map.
    pub fn fused_size(&self) -> Result<(usize, usize)> {
        let trace = self.decoder.resolution_trace(self.encoder.token_grid())?;
        Ok(*trace.last().unwrap())
    }

    pub fn views(&self) -> usize {
        VIEW_COUNT
    }
}

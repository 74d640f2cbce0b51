//! Procedural six-camera ring scenes.
//!
//! A horizontally periodic panorama (ground plane, a skyline backdrop and a
//! handful of boxes and ellipses standing on the ground) is rendered once per
//! seed and cut into six windows at 60° spacing. Adjacent windows share a
//! fixed fraction of their columns, so neighbouring views see identical
//! content in the overlap. Sparse ground truth mimics LiDAR scanlines.

mod store;

pub use store::{read_dataset, write_dataset, DatasetIndex, SceneEntry, DATASET_FORMAT, DATASET_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::VIEW_COUNT;
use crate::augment::{stack_images, Image, CHANNELS};
use crate::error::{Error, Result};
use crate::losses::SparseDepthTarget;
use crate::scalar::Real;
use crate::seed::splitmix;
use crate::tensor::Tensor;

const CAMERA_HEIGHT: f64 = 1.5;
const FOG_DISTANCE: f64 = 45.0;
const SKY: [f64; 3] = [0.72, 0.8, 0.9];
const MAX_MASK_ATTEMPTS: usize = 64;

/// Geometry and sampling parameters of the synthetic ring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub view_height: usize,
    pub view_width: usize,
    /// Fraction of a view's columns shared with each neighbour.
    pub overlap: f64,
    pub d_min: f64,
    pub d_max: f64,
    /// Nominal spacing of pseudo-LiDAR scanlines.
    pub row_step: usize,
    /// Probability that a scanline pixel returns a measurement.
    pub keep_prob: f64,
    pub min_density: f64,
    pub max_density: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            view_height: 64,
            view_width: 96,
            overlap: 0.25,
            d_min: 0.1,
            d_max: 80.0,
            row_step: 8,
            keep_prob: 0.55,
            min_density: 0.02,
            max_density: 0.10,
        }
    }
}

impl SceneConfig {
    /// Columns between the left edges of consecutive views.
    pub fn view_stride(&self) -> usize {
        (self.view_width as f64 * (1.0 - self.overlap)).round() as usize
    }

    pub fn overlap_columns(&self) -> usize {
        self.view_width - self.view_stride()
    }

    pub fn panorama_width(&self) -> usize {
        VIEW_COUNT * self.view_stride()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.1..=0.4).contains(&self.overlap) {
            return Err(Error::invalid(format!("overlap {} outside [0.1, 0.4]", self.overlap)));
        }
        let exact = self.view_width as f64 * (1.0 - self.overlap);
        if (exact - exact.round()).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "overlap {} does not give a whole number of columns for width {}",
                self.overlap, self.view_width
            )));
        }
        if self.view_height < 8 || self.view_width < 8 {
            return Err(Error::invalid("views must be at least 8x8"));
        }
        if !(0.0 < self.d_min && self.d_min < self.d_max) {
            return Err(Error::invalid("need 0 < d_min < d_max"));
        }
        if self.row_step == 0 || !(0.0 < self.keep_prob && self.keep_prob <= 1.0) {
            return Err(Error::invalid("invalid scanline sampling"));
        }
        if !(0.0 < self.min_density && self.min_density < self.max_density && self.max_density <= 1.0) {
            return Err(Error::invalid("invalid mask density bounds"));
        }
        Ok(())
    }

    /// Pixel focal length of the cylindrical panorama.
    fn focal(&self) -> f64 {
        self.panorama_width() as f64 / std::f64::consts::TAU
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Box,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq)]
struct Object {
    /// Horizontal centre in panorama columns.
    centre: f64,
    half_width: f64,
    top: f64,
    bottom: f64,
    depth: f64,
    colour: [f64; 3],
    shape: Shape,
}

/// Per-seed scene description; [`render`](SceneLayout::render) evaluates it
/// at any integer column, wrapping around the ring.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    height: usize,
    width: usize,
    seed: u64,
    horizon: f64,
    skyline: [(f64, f64); 3],
    skyline_base: f64,
    backdrop_depth: [f64; 2],
    backdrop_colour: [f64; 3],
    ground_colour: [f64; 3],
    objects: Vec<Object>,
    d_range: (f64, f64),
}

/// One rendered sample of a [`SceneLayout`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub sky: bool,
}

fn lattice(seed: u64, ix: u64, iy: u64) -> f64 {
    let h = splitmix(seed ^ splitmix(ix.wrapping_mul(0x1_0000_0001) ^ iy.wrapping_shl(20)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

impl SceneLayout {
    pub fn new(seed: u64, cfg: &SceneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (cfg.view_height, cfg.panorama_width());
        let f = cfg.focal();
        let hf = h as f64;
        let horizon = rng.gen_range(0.3..0.45) * hf;
        let mut skyline = [(0.0, 0.0); 3];
        for (k, s) in skyline.iter_mut().enumerate() {
            *s = (rng.gen_range(0.02..0.08) * hf / (k + 1) as f64, rng.gen_range(0.0..std::f64::consts::TAU));
        }
        let skyline_base = rng.gen_range(0.12..0.22) * hf;
        let backdrop_depth = [rng.gen_range(30.0..45.0), rng.gen_range(3.0..10.0)];
        let colour = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
        let backdrop_colour = colour(&mut rng, 0.3, 0.7);
        let ground_colour = colour(&mut rng, 0.25, 0.45);
        let count = rng.gen_range(5..=9);
        let mut objects = Vec::with_capacity(count);
        for _ in 0..count {
            let depth = rng.gen_range(3.0..28.0);
            let bottom = horizon + f * CAMERA_HEIGHT / depth;
            let size = rng.gen_range(1.0..4.5);
            let half_width = 0.5 * f * rng.gen_range(1.5..6.0) / depth;
            objects.push(Object {
                centre: rng.gen_range(0.0..w as f64),
                half_width,
                top: bottom - f * size / depth,
                bottom,
                depth,
                colour: colour(&mut rng, 0.05, 0.95),
                shape: if rng.gen::<bool>() { Shape::Box } else { Shape::Ellipse },
            });
        }
        // nearest first so the first hit occludes the rest
        objects.sort_by(|a, b| a.depth.total_cmp(&b.depth));
        Ok(Self {
            height: h,
            width: w,
            seed,
            horizon,
            skyline,
            skyline_base,
            backdrop_depth,
            backdrop_colour,
            ground_colour,
            objects,
            d_range: (cfg.d_min, cfg.d_max),
        })
    }

    fn wrap(&self, x: f64) -> f64 {
        x.rem_euclid(self.width as f64)
    }

    fn texture(&self, x: f64, y: f64, cell: f64, salt: u64) -> f64 {
        let cells = (self.width as f64 / cell).round() as u64;
        let (gx, gy) = (self.wrap(x) / cell, y / cell);
        let (ix, iy) = (gx.floor(), gy.floor());
        let (fx, fy) = (smooth(gx - ix), smooth(gy - iy));
        let (ix, iy) = (ix as u64 % cells, iy.max(0.0) as u64);
        let ix1 = (ix + 1) % cells;
        let s = self.seed ^ salt;
        let top = lattice(s, ix, iy) + fx * (lattice(s, ix1, iy) - lattice(s, ix, iy));
        let bot = lattice(s, ix, iy + 1) + fx * (lattice(s, ix1, iy + 1) - lattice(s, ix, iy + 1));
        top + fy * (bot - top)
    }

    /// Colour and depth at row `y`, column `x` (any integer; the ring wraps).
    pub fn render(&self, y: usize, x: i64) -> Sample {
        let (px, py) = (self.wrap(x as f64 + 0.5), y as f64 + 0.5);
        let theta = px / self.width as f64 * std::f64::consts::TAU;
        let f = self.width as f64 / std::f64::consts::TAU;

        let hit = self.objects.iter().find(|o| {
            let dx = (px - o.centre + self.width as f64 / 2.0).rem_euclid(self.width as f64) - self.width as f64 / 2.0;
            if py < o.top || py > o.bottom || dx.abs() > o.half_width {
                return false;
            }
            match o.shape {
                Shape::Box => true,
                Shape::Ellipse => {
                    let (cy, ry) = (0.5 * (o.top + o.bottom), 0.5 * (o.bottom - o.top));
                    (dx / o.half_width).powi(2) + ((py - cy) / ry).powi(2) <= 1.0
                }
            }
        });
        let back = self.backdrop_depth[0] + self.backdrop_depth[1] * (2.0 * theta).sin();
        let skyline: f64 = self.skyline_base
            + self.skyline.iter().enumerate().map(|(k, (a, ph))| a * ((k + 1) as f64 * 3.0 * theta + ph).sin()).sum::<f64>();

        let (base, depth, grain, sky) = if let Some(o) = hit {
            let grain = self.texture(px - o.centre, py - o.top, 3.0, 0xB0B);
            (o.colour, o.depth, grain, false)
        } else if py >= self.horizon {
            let d = (f * CAMERA_HEIGHT / (py - self.horizon)).min(back);
            // stripes fixed to the ground recede with distance
            let grain = 0.5 + 0.5 * (self.texture(px, 40.0 / d, 4.0, 0x6A0) - 0.5) + 0.25 * ((40.0 / d).fract() - 0.5);
            let base = if d >= back { self.backdrop_colour } else { self.ground_colour };
            (base, d, grain, false)
        } else if py >= self.horizon - skyline {
            (self.backdrop_colour, back, self.texture(px, py, 6.0, 0xBAC), false)
        } else {
            (SKY, self.d_range.1, 0.5, true)
        };
        let depth = depth.clamp(self.d_range.0, self.d_range.1);
        let fog = (-depth / FOG_DISTANCE).exp();
        let shade = 0.7 + 0.6 * grain;
        let rgb = if sky {
            SKY
        } else {
            [0, 1, 2].map(|c| (base[c] * shade).min(1.0) * fog + SKY[c] * (1.0 - fog))
        };
        Sample { rgb, depth, sky }
    }
}

/// Rendered panorama, quantised to the on-disk precision (8-bit colour,
/// `f32` depth).
#[derive(Clone, Debug, PartialEq)]
pub struct PanoramaScene {
    pub seed: u64,
    pub layout: SceneLayout,
    pub rgb: Image,
    /// `H x W_pano` metres.
    pub depth: Vec<f64>,
    /// Pixels without a range return.
    pub sky: Vec<bool>,
}

impl PanoramaScene {
    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }
}

pub fn quantise_colour(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<PanoramaScene> {
    let layout = SceneLayout::new(seed, cfg)?;
    let (h, w) = (layout.height, layout.width);
    let mut rgb = vec![0.0; CHANNELS * h * w];
    let mut depth = vec![0.0; h * w];
    let mut sky = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let s = layout.render(y, x as i64);
            for c in 0..CHANNELS {
                rgb[(c * h + y) * w + x] = quantise_colour(s.rgb[c]);
            }
            depth[y * w + x] = f64::from(s.depth as f32);
            sky[y * w + x] = s.sky;
        }
    }
    Ok(PanoramaScene { seed, layout, rgb: Image::new(h, w, rgb)?, depth, sky })
}

/// Six views of one scene with sparse metric ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewBatch {
    pub seed: u64,
    pub views: Vec<Image>,
    /// Dense depth `[6, 1, H, W]`.
    pub depth: Tensor<f64>,
    /// Measurement mask, same layout as `depth`.
    pub mask: Vec<bool>,
}

impl MultiViewBatch {
    pub fn new(seed: u64, views: Vec<Image>, depth: Tensor<f64>, mask: Vec<bool>) -> Result<Self> {
        if views.len() != VIEW_COUNT {
            return Err(Error::invalid(format!("expected {VIEW_COUNT} views, got {}", views.len())));
        }
        let (h, w) = (views[0].height(), views[0].width());
        if views.iter().any(|v| (v.height(), v.width()) != (h, w)) {
            return Err(Error::invalid("views differ in size"));
        }
        if depth.shape() != [VIEW_COUNT, 1, h, w] || mask.len() != depth.numel() {
            return Err(Error::shape("multi-view batch", &[VIEW_COUNT, 1, h, w], depth.shape()));
        }
        Ok(Self { seed, views, depth, mask })
    }

    pub fn height(&self) -> usize {
        self.views[0].height()
    }

    pub fn width(&self) -> usize {
        self.views[0].width()
    }

    /// Views stacked as `[6, 3, H, W]`.
    pub fn images<T: Real>(&self) -> Tensor<T> {
        stack_images(&self.views).expect("views share one size")
    }

    pub fn target<T: Real>(&self) -> Result<SparseDepthTarget<T>> {
        SparseDepthTarget::new(self.depth.cast(), self.mask.clone())
    }

    /// Measured fraction of each view's pixels.
    pub fn mask_density(&self) -> Vec<f64> {
        let plane = self.height() * self.width();
        self.mask.chunks(plane).map(|m| m.iter().filter(|&&v| v).count() as f64 / plane as f64).collect()
    }
}

/// Cuts the six ring views; view `i` starts at column `i * stride`.
pub fn slice_views(scene: &PanoramaScene, cfg: &SceneConfig) -> Result<MultiViewBatch> {
    cfg.validate()?;
    let (h, w) = (scene.height(), scene.width());
    if h != cfg.view_height || w != cfg.panorama_width() {
        return Err(Error::shape("slice_views", &[cfg.view_height, cfg.panorama_width()], &[h, w]));
    }
    let (vw, stride) = (cfg.view_width, cfg.view_stride());
    let col = |v: usize, x: usize| (v * stride + x) % w;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(scene.seed ^ 0x51CE));
    let mut views = Vec::with_capacity(VIEW_COUNT);
    let mut depth = Vec::with_capacity(VIEW_COUNT * h * vw);
    let mut mask = Vec::with_capacity(VIEW_COUNT * h * vw);
    for v in 0..VIEW_COUNT {
        views.push(Image::from_fn(h, vw, |c, y, x| scene.rgb.at(c, y, col(v, x))));
        depth.extend((0..h * vw).map(|i| scene.depth[(i / vw) * w + col(v, i % vw)]));
        let sky: Vec<bool> = (0..h * vw).map(|i| scene.sky[(i / vw) * w + col(v, i % vw)]).collect();
        mask.extend(scanline_mask(&mut rng, &sky, h, vw, cfg)?);
    }
    MultiViewBatch::new(scene.seed, views, Tensor::new([VIEW_COUNT, 1, h, vw], depth)?, mask)
}

/// Jittered scanlines with random dropout, redrawn until the density lies
/// within the configured bounds.
fn scanline_mask(rng: &mut ChaCha8Rng, sky: &[bool], h: usize, w: usize, cfg: &SceneConfig) -> Result<Vec<bool>> {
    let step = cfg.row_step;
    for _ in 0..MAX_MASK_ATTEMPTS {
        let mut mask = vec![false; h * w];
        let mut row = rng.gen_range(0..step) as i64;
        while (row as usize) < h {
            let jitter = rng.gen_range(-1..=1i64);
            let r = (row + jitter).clamp(0, h as i64 - 1) as usize;
            for x in 0..w {
                let i = r * w + x;
                mask[i] = !sky[i] && rng.gen_bool(cfg.keep_prob);
            }
            row += step as i64;
        }
        let density = mask.iter().filter(|&&m| m).count() as f64 / (h * w) as f64;
        if (cfg.min_density..=cfg.max_density).contains(&density) {
            return Ok(mask);
        }
    }
    Err(Error::invalid("could not draw a scanline mask within the density bounds"))
}

/// Scene seeds for a dataset of `count` scenes.
pub fn scene_seeds(seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| splitmix(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ i)).collect()
}

/// Generates `count` scenes derived from `seed`.
pub fn gen_dataset(count: usize, seed: u64, cfg: &SceneConfig) -> Result<Vec<MultiViewBatch>> {
    scene_seeds(seed, count).into_iter().map(|s| slice_views(&gen_scene(s, cfg)?, cfg)).collect()
}

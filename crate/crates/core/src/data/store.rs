//! Dataset directories: `index.json` plus, per scene, six PPM views and
//! DSD1 depth and mask tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MultiViewBatch;
use crate::attention::VIEW_COUNT;
use crate::augment::Image;
use crate::error::{Error, Result};
use crate::io::{dsd1, ppm};
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "dino-sd-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: usize,
    pub seed: u64,
    pub views: Vec<String>,
    pub depth: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format: String,
    pub version: u32,
    pub view_height: usize,
    pub view_width: usize,
    pub scenes: Vec<SceneEntry>,
}

pub fn write_dataset(batches: &[MultiViewBatch], dir: &Path) -> Result<DatasetIndex> {
    let first = batches.first().ok_or_else(|| Error::invalid("cannot write an empty dataset"))?;
    let (h, w) = (first.height(), first.width());
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut scenes = Vec::with_capacity(batches.len());
    for (id, b) in batches.iter().enumerate() {
        if (b.height(), b.width()) != (h, w) {
            return Err(Error::shape("write_dataset", &[h, w], &[b.height(), b.width()]));
        }
        let name = format!("scene_{id:04}");
        let sub = dir.join(&name);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut views = Vec::with_capacity(VIEW_COUNT);
        for (k, view) in b.views.iter().enumerate() {
            let file = format!("{name}/view_{k}.ppm");
            ppm::write(dir.join(&file), &view.to_rgb_bytes())?;
            views.push(file);
        }
        let depth = format!("{name}/depth.dsd1");
        dsd1::write(dir.join(&depth), &b.depth)?;
        let mask = format!("{name}/mask.dsd1");
        let m = Tensor::from_fn(b.depth.shape().to_vec(), |i| if b.mask[i] { 1.0f64 } else { 0.0 });
        dsd1::write(dir.join(&mask), &m)?;
        scenes.push(SceneEntry { id, seed: b.seed, views, depth, mask });
    }
    let index = DatasetIndex {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        view_height: h,
        view_width: w,
        scenes,
    };
    let path = dir.join("index.json");
    let text = serde_json::to_string_pretty(&index).expect("index serialises");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<MultiViewBatch>> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.clone(), source })?;
    if index.format != DATASET_FORMAT || index.version != DATASET_VERSION {
        return Err(Error::format(&path, format!("unsupported dataset {} v{}", index.format, index.version)));
    }
    let (h, w) = (index.view_height, index.view_width);
    let mut out = Vec::with_capacity(index.scenes.len());
    for s in &index.scenes {
        if s.views.len() != VIEW_COUNT {
            return Err(Error::format(&path, format!("scene {} lists {} views", s.id, s.views.len())));
        }
        let mut views = Vec::with_capacity(VIEW_COUNT);
        for file in &s.views {
            let p = dir.join(file);
            let img = Image::from_rgb_bytes(&ppm::read(&p)?)?;
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::format(&p, format!("expected {w}x{h}, found {}x{}", img.width(), img.height())));
            }
            views.push(img);
        }
        let expect = [VIEW_COUNT, 1, h, w];
        let depth_path = dir.join(&s.depth);
        let depth: Tensor<f64> = dsd1::read(&depth_path)?;
        if depth.shape() != expect {
            return Err(Error::format(&depth_path, format!("shape {:?}, expected {expect:?}", depth.shape())));
        }
        let mask_path = dir.join(&s.mask);
        let mask: Tensor<f64> = dsd1::read(&mask_path)?;
        if mask.shape() != expect || mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::format(&mask_path, "mask must be a 0/1 tensor shaped like the depth"));
        }
        let mask = mask.data().iter().map(|&m| m == 1.0).collect();
        out.push(MultiViewBatch::new(s.seed, views, depth, mask)?);
    }
    Ok(out)
}

//! Attention-mode ablation: every mode trained with several seeds on one
//! synthetic split, scored on a corrupted held-out set with and without
//! test-time restoration.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate_model, train, MetricReport, TrainConfig};
use crate::attention::AttentionMode;
use crate::augment::{CorruptionKind, CorruptionSpec, PreprocessFlags};
use crate::data::{gen_dataset, SceneConfig};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub scenes: usize,
    pub val_scenes: usize,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub modes: Vec<AttentionMode>,
    pub scene: SceneConfig,
    /// Base training settings; mode and seeds are overridden per run.
    pub train: TrainConfig,
    pub corruptions: Vec<CorruptionSpec>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let corruptions = CorruptionKind::ALL
            .iter()
            .enumerate()
            .map(|(i, &k)| CorruptionSpec { kind: k, severity: 3, seed: 1000 + i as u64 })
            .collect();
        Self {
            scenes: 200,
            val_scenes: 40,
            data_seed: 2024,
            seeds: vec![0, 1, 2],
            modes: AttentionMode::ALL.to_vec(),
            scene: SceneConfig::default(),
            train: TrainConfig { epochs: 3, ..TrainConfig::default() },
            corruptions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub attention: AttentionMode,
    pub seed: u64,
    pub best_epoch: usize,
    pub plain: MetricReport,
    pub restored: MetricReport,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    /// Mean Abs Rel of `mode` over seeds, with or without restoration.
    pub fn mean_abs_rel(&self, mode: AttentionMode, restored: bool) -> Option<f64> {
        let v: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.attention == mode)
            .map(|r| if restored { r.restored.abs_rel } else { r.plain.abs_rel })
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Runs the grid, calling `progress` after each trained model.
pub fn run_ablation<T: Real>(cfg: &AblationConfig, mut progress: impl FnMut(&AblationRun)) -> Result<AblationReport> {
    if cfg.val_scenes == 0 || cfg.val_scenes >= cfg.scenes {
        return Err(Error::invalid("validation split must be a proper, non-empty subset"));
    }
    let data = gen_dataset(cfg.scenes, cfg.data_seed, &cfg.scene)?;
    let (val, train_set) = data.split_at(cfg.val_scenes);
    let mut report = AblationReport::default();
    for &mode in &cfg.modes {
        for &seed in &cfg.seeds {
            let start = Instant::now();
            let tc = TrainConfig {
                attention: mode,
                seed,
                data_seed: seed,
                val_corruptions: cfg.corruptions.clone(),
                preprocess: PreprocessFlags::NONE,
                ..cfg.train.clone()
            };
            let out = train::<T>(&tc, train_set, val, None)?;
            let plain = out.epochs[out.best_epoch - 1].val.expect("validation ran");
            let restored = evaluate_model(&out.best, mode, val, &cfg.corruptions, PreprocessFlags::BOTH)?;
            let run = AblationRun {
                attention: mode,
                seed,
                best_epoch: out.best_epoch,
                plain,
                restored,
                seconds: start.elapsed().as_secs_f64(),
            };
            progress(&run);
            report.runs.push(run);
        }
    }
    Ok(report)
}

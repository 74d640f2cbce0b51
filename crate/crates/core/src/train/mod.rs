//! Training loop, evaluation metrics and the attention ablation harness.

mod ablation;
mod eval;
mod metrics;
mod schedule;

pub use ablation::{run_ablation, AblationConfig, AblationReport, AblationRun};
pub use eval::{corrupt_views, evaluate_checkpoint, evaluate_model, format_json_lines, format_table, EvalRow};
pub use metrics::{compute_metrics, pairwise_sum, MetricAccumulator, MetricReport};
pub use schedule::lr_schedule;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::augment::{augmix, stack_images, AugMixSpec, CorruptionSpec, Image, PreprocessFlags};
use crate::data::MultiViewBatch;
use crate::error::{Error, Result};
use crate::losses::{augmix_js_loss, silog_loss, smooth_loss, LossWeights, SparseDepthTarget};
use crate::model::{save_checkpoint, DinoSd, ModelConfig, ParamGroup};
use crate::scalar::Real;
use crate::seed::derive;
use crate::tensor::{Tape, Tensor, Var};

/// Floating-point width used for training and inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Every knob of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub attention: AttentionMode,
    pub precision: Precision,
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    /// Floor of the cosine schedule as a fraction of each group's rate.
    pub min_lr_ratio: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub epochs: usize,
    /// Stops early after this many optimiser steps.
    pub max_steps: Option<usize>,
    pub scenes_per_step: usize,
    /// First restart period in steps; one epoch when `None`.
    pub t0_steps: Option<usize>,
    pub t_mult: usize,
    /// Seed of the weight initialisation.
    pub seed: u64,
    /// Seed of shuffling and augmentation.
    pub data_seed: u64,
    pub loss: LossWeights,
    pub augmix: AugMixSpec,
    /// Adds the silog term of both augmented predictions.
    pub supervise_augmented: bool,
    /// Corruptions applied to the validation set (clean when empty).
    pub val_corruptions: Vec<CorruptionSpec>,
    /// Test-time restoration used during validation.
    pub preprocess: PreprocessFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            attention: AttentionMode::Adjacent,
            precision: Precision::F64,
            encoder_lr: 1e-4,
            decoder_lr: 4e-4,
            min_lr_ratio: 0.0,
            momentum: 0.9,
            grad_clip: None,
            epochs: 5,
            max_steps: None,
            scenes_per_step: 1,
            t0_steps: None,
            t_mult: 2,
            seed: 0,
            data_seed: 0,
            loss: LossWeights::default(),
            augmix: AugMixSpec::default(),
            supervise_augmented: false,
            val_corruptions: Vec::new(),
            preprocess: PreprocessFlags::NONE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.augmix.validate()?;
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.encoder_lr) || !positive(self.decoder_lr) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("min_lr_ratio must lie in [0, 1] and momentum in [0, 1)"));
        }
        if self.grad_clip.is_some_and(|c| !positive(c)) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        if self.epochs == 0 || self.scenes_per_step == 0 || self.t_mult == 0 || self.t0_steps == Some(0) {
            return Err(Error::invalid("epochs, scenes_per_step, t_mult and t0_steps must be positive"));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn uses_augmentation(&self) -> bool {
        self.loss.beta_augmix > 0.0 || self.supervise_augmented
    }
}

/// Summary of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    pub val: Option<MetricReport>,
}

/// Result of [`train`]. Snapshots are rounded to checkpoint precision.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real> {
    pub final_model: DinoSd<T>,
    pub first_epoch: DinoSd<T>,
    pub best: DinoSd<T>,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimiser step.
    pub step_losses: Vec<f64>,
}

/// Momentum gradient descent with one learning rate per parameter group.
struct Momentum<T> {
    velocity: Vec<Vec<T>>,
    mu: T,
}

impl<T: Real> Momentum<T> {
    fn new(model: &DinoSd<T>, mu: f64) -> Self {
        Self { velocity: model.params().entries().iter().map(|e| vec![T::zero(); e.value.numel()]).collect(), mu: T::lit(mu) }
    }

    fn step(&mut self, model: &mut DinoSd<T>, grads: &[Tensor<T>], lr: impl Fn(ParamGroup) -> f64, scale: T) {
        let ids: Vec<_> = model.params().ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let rate = T::lit(lr(model.params().entry(id).group));
            let value = model.params_mut().get_mut(id).data_mut();
            for ((p, v), &g) in value.iter_mut().zip(&mut self.velocity[k]).zip(grads[k].data()) {
                *v = self.mu * *v + g * scale;
                *p = *p - rate * *v;
            }
        }
    }
}

/// Views of `batches` concatenated scene-major, plus the merged target.
fn merge<T: Real>(batches: &[&MultiViewBatch], views: impl Fn(&MultiViewBatch) -> Vec<Image>) -> Result<Tensor<T>> {
    let all: Vec<Image> = batches.iter().flat_map(|b| views(b)).collect();
    stack_images(&all)
}

fn merge_target<T: Real>(batches: &[&MultiViewBatch]) -> Result<SparseDepthTarget<T>> {
    let first = batches[0];
    let mut shape = first.depth.shape().to_vec();
    shape[0] *= batches.len();
    let gt = batches.iter().flat_map(|b| b.depth.data().iter().map(|&d| T::lit(d))).collect();
    let valid = batches.iter().flat_map(|b| b.mask.iter().copied()).collect();
    SparseDepthTarget::new(Tensor::new(shape, gt)?, valid)
}

/// Loss of one step; the three image sets share one batched forward pass.
fn step_loss<'t, T: Real>(
    cfg: &TrainConfig,
    model: &DinoSd<T>,
    tape: &'t Tape<T>,
    params: &crate::model::Bound<'t, T>,
    clean: &Tensor<T>,
    augmented: Option<(Tensor<T>, Tensor<T>)>,
    target: &SparseDepthTarget<T>,
) -> Result<Var<'t, T>> {
    let w = &cfg.loss;
    let b = clean.shape()[0];
    let (pred, pa1, pa2) = match augmented {
        Some((a1, a2)) => {
            let mut data = clean.data().to_vec();
            data.extend_from_slice(a1.data());
            data.extend_from_slice(a2.data());
            let mut shape = clean.shape().to_vec();
            shape[0] *= 3;
            let all = model.forward(params, tape.constant(Tensor::new(shape, data)?)?, cfg.attention)?;
            (all.narrow(0, 0, b)?, Some(all.narrow(0, b, b)?), Some(all.narrow(0, 2 * b, b)?))
        }
        None => (model.forward(params, tape.constant(clean.clone())?, cfg.attention)?, None, None),
    };
    let mut loss = silog_loss(pred, target, w.lambda_silog)?;
    if w.alpha_smooth > 0.0 {
        loss = loss.add(smooth_loss(pred, clean)?.mul_scalar(T::lit(w.alpha_smooth))?)?;
    }
    if let (Some(a1), Some(a2)) = (pa1, pa2) {
        if w.beta_augmix > 0.0 {
            loss = loss.add(augmix_js_loss(pred, a1, a2)?.mul_scalar(T::lit(w.beta_augmix))?)?;
        }
        if cfg.supervise_augmented {
            loss = loss.add(silog_loss(a1, target, w.lambda_silog)?)?.add(silog_loss(a2, target, w.lambda_silog)?)?;
        }
    }
    Ok(loss)
}

fn snapshot<T: Real>(model: &DinoSd<T>) -> DinoSd<T> {
    let mut m = model.clone();
    m.params_mut().round_to_f32();
    m
}

/// Trains a fresh model on `train_set`, validating on `val_set` after every
/// epoch (skipped when empty).
///
/// With `out_dir`, writes `epoch1/`, `best/` and `final/` checkpoints,
/// `train_config.json` and one `metrics.jsonl` line per epoch.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    train_set: &[MultiViewBatch],
    val_set: &[MultiViewBatch],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut model = DinoSd::<T>::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Momentum::new(&model, cfg.momentum);
    let steps_per_epoch = train_set.len().div_ceil(cfg.scenes_per_step);
    let t0 = cfg.t0_steps.unwrap_or(steps_per_epoch);
    let mut metrics_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cfg_path = dir.join("train_config.json");
            fs::write(&cfg_path, serde_json::to_string_pretty(cfg).expect("config serialises"))
                .map_err(|e| Error::io(&cfg_path, e))?;
            let path = dir.join("metrics.jsonl");
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let mut step = 0usize;
    let mut step_losses = Vec::new();
    let mut epochs = Vec::new();
    let mut first_epoch = None;
    let mut best: Option<(f64, usize, DinoSd<T>)> = None;
    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(&[cfg.data_seed, epoch as u64])));
        let mut losses = Vec::with_capacity(steps_per_epoch);
        let (mut enc_lr, mut dec_lr) = (0.0, 0.0);
        for chunk in order.chunks(cfg.scenes_per_step) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let batches: Vec<&MultiViewBatch> = chunk.iter().map(|&i| &train_set[i]).collect();
            let clean = merge::<T>(&batches, |b| b.views.clone())?;
            let target = merge_target::<T>(&batches)?;
            let augmented = if cfg.uses_augmentation() {
                let aug = |branch: u64| {
                    merge::<T>(&batches, |b| {
                        b.views
                            .iter()
                            .enumerate()
                            .map(|(v, img)| {
                                let seed = derive(&[cfg.data_seed, step as u64, b.seed, v as u64, branch]);
                                augmix(img, &cfg.augmix, seed).expect("validated spec")
                            })
                            .collect()
                    })
                };
                Some((aug(1)?, aug(2)?))
            } else {
                None
            };

            let tape = Tape::new();
            let params = model.params().bind(&tape)?;
            let loss = step_loss(cfg, &model, &tape, &params, &clean, augmented, &target)?;
            let value = loss.item().as_f64();
            enc_lr = lr_schedule(step, t0, cfg.t_mult, cfg.encoder_lr, cfg.encoder_lr * cfg.min_lr_ratio);
            dec_lr = lr_schedule(step, t0, cfg.t_mult, cfg.decoder_lr, cfg.decoder_lr * cfg.min_lr_ratio);
            let diagnose = |detail: String| Error::NonFinite { epoch, step, detail };
            if !value.is_finite() {
                let seeds: Vec<u64> = batches.iter().map(|b| b.seed).collect();
                return Err(diagnose(format!("loss {value} on scenes {seeds:?} at lr {enc_lr:e}/{dec_lr:e}")));
            }
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor<T>> = params.vars().iter().map(|&v| grads.take(v).expect("parameter gradient")).collect();
            let mut sq_norm = 0.0;
            for (g, e) in grads.iter().zip(model.params().entries()) {
                let s: f64 = g.data().iter().map(|x| x.as_f64() * x.as_f64()).sum();
                if !s.is_finite() {
                    return Err(diagnose(format!("non-finite gradient for {}", e.name)));
                }
                sq_norm += s;
            }
            let scale = match cfg.grad_clip {
                Some(c) if sq_norm.sqrt() > c => c / sq_norm.sqrt(),
                _ => 1.0,
            };
            opt.step(&mut model, &grads, |g| if g == ParamGroup::Encoder { enc_lr } else { dec_lr }, T::lit(scale));
            losses.push(value);
            step_losses.push(value);
            step += 1;
        }
        if losses.is_empty() {
            break 'epochs;
        }

        let snap = snapshot(&model);
        let val = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_model(&snap, cfg.attention, val_set, &cfg.val_corruptions, cfg.preprocess)?)
        };
        let record = EpochRecord {
            epoch,
            steps: losses.len(),
            mean_loss: pairwise_sum(&losses) / losses.len() as f64,
            encoder_lr: enc_lr,
            decoder_lr: dec_lr,
            val,
        };
        if let Some((file, path)) = metrics_file.as_mut() {
            writeln!(file, "{}", serde_json::to_string(&record).expect("record serialises")).map_err(|e| Error::io(&*path, e))?;
        }
        if let Some(dir) = out_dir {
            if epoch == 1 {
                save_checkpoint(dir.join("epoch1"), &snap, Some(cfg.attention), Some(epoch))?;
            }
        }
        let score = val.map_or(record.mean_loss, |v| v.abs_rel);
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            if let Some(dir) = out_dir {
                save_checkpoint(dir.join("best"), &snap, Some(cfg.attention), Some(epoch))?;
            }
            best = Some((score, epoch, snap.clone()));
        }
        if epoch == 1 {
            first_epoch = Some(snap);
        }
        epochs.push(record);
        if cfg.max_steps.is_some_and(|m| step >= m) {
            break;
        }
    }

    let final_model = snapshot(&model);
    if let Some(dir) = out_dir {
        save_checkpoint(dir.join("final"), &final_model, Some(cfg.attention), epochs.last().map(|e| e.epoch))?;
    }
    let (_, best_epoch, best) = best.ok_or_else(|| Error::invalid("no training steps were run"))?;
    Ok(TrainOutcome {
        first_epoch: first_epoch.unwrap_or_else(|| final_model.clone()),
        final_model,
        best,
        best_epoch,
        epochs,
        step_losses,
    })
}

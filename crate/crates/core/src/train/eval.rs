//! Corrupt → restore → predict → score, and the result table.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{MetricAccumulator, MetricReport};
use crate::attention::AttentionMode;
use crate::augment::{corrupt, preprocess_test, stack_images, CorruptionSpec, Image, PreprocessFlags};
use crate::data::MultiViewBatch;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, DinoSd};
use crate::scalar::Real;
use crate::seed::derive;

/// The views of `batch` under `spec`; each view draws its own noise.
pub fn corrupt_views(batch: &MultiViewBatch, spec: &CorruptionSpec) -> Vec<Image> {
    batch
        .views
        .iter()
        .enumerate()
        .map(|(v, img)| {
            let seed = derive(&[spec.seed, batch.seed, v as u64]);
            corrupt(img, &CorruptionSpec { seed, ..*spec })
        })
        .collect()
}

/// Metrics of `model` over every scene of `data`, once per corruption in
/// `corruptions` (or once on clean images when the list is empty).
pub fn evaluate_model<T: Real>(
    model: &DinoSd<T>,
    mode: AttentionMode,
    data: &[MultiViewBatch],
    corruptions: &[CorruptionSpec],
    flags: PreprocessFlags,
) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut acc = MetricAccumulator::new();
    let clean = [None];
    let specs: Vec<Option<&CorruptionSpec>> =
        if corruptions.is_empty() { clean.to_vec() } else { corruptions.iter().map(Some).collect() };
    for spec in specs {
        for batch in data {
            let views = match spec {
                Some(s) => corrupt_views(batch, s),
                None => batch.views.clone(),
            };
            let views: Vec<Image> =
                if flags.is_identity() { views } else { views.iter().map(|v| preprocess_test(v, flags)).collect() };
            let pred = model.predict(&stack_images::<T>(&views)?, mode)?;
            acc.push(&pred, &batch.target::<T>()?)?;
        }
    }
    acc.finish()
}

/// One line of an evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub attention: AttentionMode,
    pub denoise: bool,
    pub equalize: bool,
    pub corruptions: usize,
    #[serde(flatten)]
    pub report: MetricReport,
}

/// Loads a checkpoint and evaluates it for each preprocessing setting.
/// `mode` overrides the attention mode recorded in the checkpoint.
pub fn evaluate_checkpoint<T: Real>(
    dir: &Path,
    data: &[MultiViewBatch],
    corruptions: &[CorruptionSpec],
    flags: &[PreprocessFlags],
    mode: Option<AttentionMode>,
) -> Result<Vec<EvalRow>> {
    let (model, manifest) = load_checkpoint::<T>(dir)?;
    let cfg = &model.config().encoder;
    if let Some(b) = data.first() {
        if (b.height(), b.width()) != (cfg.image_height, cfg.image_width) {
            return Err(Error::invalid(format!(
                "checkpoint expects {}x{} views, dataset has {}x{}",
                cfg.image_width,
                cfg.image_height,
                b.width(),
                b.height()
            )));
        }
    }
    let mode = mode.or(manifest.attention).unwrap_or(AttentionMode::None);
    flags
        .iter()
        .map(|&f| {
            Ok(EvalRow {
                label: dir.display().to_string(),
                attention: mode,
                denoise: f.denoise,
                equalize: f.equalize,
                corruptions: corruptions.len(),
                report: evaluate_model(&model, mode, data, corruptions, f)?,
            })
        })
        .collect()
}

/// Aligned text table in the column order of the usual depth benchmarks.
pub fn format_table(rows: &[EvalRow]) -> String {
    let tick = |b: bool| if b { "x" } else { "-" };
    let label_w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<label_w$}  {:<9}  {:>7}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>6}  {:>6}  {:>6}",
        "label", "attention", "denoise", "equalize", "abs_rel", "sq_rel", "rmse", "log_rmse", "a1", "a2", "a3"
    );
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            out,
            "{:<label_w$}  {:<9}  {:>7}  {:>8}  {:>8.4}  {:>8.4}  {:>8.3}  {:>8.4}  {:>6.3}  {:>6.3}  {:>6.3}",
            r.label,
            r.attention.to_string(),
            tick(r.denoise),
            tick(r.equalize),
            m.abs_rel,
            m.sq_rel,
            m.rmse,
            m.log_rmse,
            m.a1,
            m.a2,
            m.a3
        );
    }
    out
}

/// One JSON object per row.
pub fn format_json_lines(rows: &[EvalRow]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("row serialises") + "\n").collect()
}

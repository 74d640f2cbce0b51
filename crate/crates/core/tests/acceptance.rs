//! Exit criteria of the crate. Every criterion prints one PASS/FAIL line;
//! the test fails if any of them fails.
//!
//! The overfit and ablation criteria train real models (about an hour on
//! one core in a release build), so they run in their own tests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dino_sd::attention::{adjacent_view_cross_attention, AttentionMode, AttentionParams, RingTokens, VIEW_COUNT};
use dino_sd::checks::{gradient_suite, GRADIENT_TOLERANCE};
use dino_sd::data::{gen_dataset, read_dataset, write_dataset, SceneConfig};
use dino_sd::io::{dsd1, ppm};
use dino_sd::losses::{augmix_js_loss, loss_value, silog_loss, smooth_loss, SparseDepthTarget};
use dino_sd::model::{load_checkpoint, save_checkpoint, DinoSd, ModelConfig};
use dino_sd::train::{
    compute_metrics, evaluate_model, run_ablation, train, AblationConfig, AblationReport, TrainConfig,
};
use dino_sd::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn verdict(id: usize, title: &str, pass: bool, detail: &str) -> bool {
    println!("criterion {id} {} {title}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

// ---------------------------------------------------------------- 1

fn gradients() -> (bool, String) {
    let start = Instant::now();
    let reports = match gradient_suite(10, 2024) {
        Ok(r) => r,
        Err(e) => return (false, e.to_string()),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed || r.inputs < 10).map(|r| r.name).collect();
    let pass = failed.is_empty() && worst.max_rel_error < GRADIENT_TOLERANCE && secs < 120.0;
    (pass, format!("{} checks, worst {} at {:.2e}, failed {failed:?}, {secs:.1}s", reports.len(), worst.name, worst.max_rel_error))
}

// ---------------------------------------------------------------- 2

fn loss_oracles() -> Result<(bool, String), Error> {
    use std::f64::consts::{E, LN_2};
    let row = |v: &[f64]| Tensor::new([1, 1, 1, v.len()], v.to_vec());
    let t = SparseDepthTarget::new(row(&[E, E])?, vec![true, true])?;
    let silog = loss_value::<f64>(|tape| silog_loss(tape.constant(row(&[E, E * E])?)?, &t, 0.85))?;
    let js = loss_value::<f64>(|tape| {
        augmix_js_loss(tape.constant(row(&[1.0, 0.0])?)?, tape.constant(row(&[0.0, 1.0])?)?, tape.constant(row(&[0.5, 0.5])?)?)
    })?;
    // depth [[1, 2], [1, 2]] over a flat image: normalised by the mean 1.5,
    // both x differences are 2/3 with unit weight, both y differences are 0
    let flat = Tensor::full([1, 3, 2, 2], 0.3);
    let smooth = loss_value::<f64>(|tape| smooth_loss(tape.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 1.0, 2.0])?)?, &flat))?;

    let gt = Tensor::new([1, 1, 2, 3], vec![0.7, 3.0, 12.5, 40.0, 2.2, 9.9])?;
    let tz = SparseDepthTarget::new(gt.clone(), vec![true, true, false, true, true, true])?;
    let silog_zero = loss_value::<f64>(|tape| silog_loss(tape.constant(gt.clone())?, &tz, 0.85))?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = Tensor::from_fn([6, 3, 4, 5], |_| rng.gen_range(0.0..1.0));
    let smooth_zero = loss_value::<f64>(|tape| smooth_loss(tape.constant(Tensor::full([6, 1, 4, 5], 7.25))?, &img))?;
    let maps = Tensor::from_fn([6, 1, 4, 5], |_| rng.gen_range(0.1..80.0));
    let js_zero = loss_value::<f64>(|tape| {
        let m = tape.constant(maps.clone())?;
        augmix_js_loss(m, m, m)
    })?;

    let pass = (silog - 0.2875).abs() < 1e-10
        && (js - 2.0 * LN_2 / 3.0).abs() < 1e-10
        && (smooth - 2.0 / 3.0).abs() < 1e-10
        && silog_zero == 0.0
        && smooth_zero == 0.0
        && js_zero == 0.0;
    Ok((
        pass,
        format!("silog {silog:.12}, js {js:.12}, smooth {smooth:.12}, zeros ({silog_zero}, {smooth_zero}, {js_zero})"),
    ))
}

// ---------------------------------------------------------------- 3

/// Straight per-pixel definitions, accumulated left to right.
fn reference_metrics(pred: &[f64], gt: &[f64], valid: &[bool]) -> [f64; 7] {
    let (mut n, mut abs_rel, mut sq_rel, mut sq, mut log_sq) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut hits = [0.0; 3];
    for i in 0..pred.len() {
        if !valid[i] {
            continue;
        }
        let (p, g) = (pred[i], gt[i]);
        n += 1.0;
        abs_rel += (p - g).abs() / g;
        sq_rel += (p - g) * (p - g) / g;
        sq += (p - g) * (p - g);
        log_sq += (p.ln() - g.ln()).powi(2);
        let ratio = if p > g { p / g } else { g / p };
        for (k, t) in [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25].iter().enumerate() {
            if ratio < *t {
                hits[k] += 1.0;
            }
        }
    }
    [abs_rel / n, sq_rel / n, (sq / n).sqrt(), (log_sq / n).sqrt(), hits[0] / n, hits[1] / n, hits[2] / n]
}

fn metric_oracle() -> Result<(bool, String), Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    let mut nested = true;
    for _ in 0..100 {
        let shape = [rng.gen_range(1..4) * 6, 1, rng.gen_range(2..9), rng.gen_range(2..13)];
        let count: usize = shape.iter().product();
        let density = rng.gen_range(0.02..0.6);
        let mut valid: Vec<bool> = (0..count).map(|_| rng.gen_bool(density)).collect();
        valid[rng.gen_range(0..count)] = true;
        let gt: Vec<f64> = (0..count).map(|_| rng.gen_range(0.1..80.0)).collect();
        let spread = rng.gen_range(0.01..0.8);
        let pred: Vec<f64> = gt.iter().map(|g| g * (spread * rng.gen_range(-1.0..1.0f64)).exp()).collect();
        let target = SparseDepthTarget::new(Tensor::new(shape, gt.clone())?, valid.clone())?;
        let r = compute_metrics(&Tensor::new(shape, pred.clone())?, &target)?;
        let got = [r.abs_rel, r.sq_rel, r.rmse, r.log_rmse, r.a1, r.a2, r.a3];
        for (a, b) in got.iter().zip(reference_metrics(&pred, &gt, &valid)) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
        nested &= r.a1 <= r.a2 && r.a2 <= r.a3;
    }
    Ok((worst <= 1e-12 && nested, format!("100 fixtures, worst relative gap {worst:.2e}, nesting holds: {nested}")))
}

// ---------------------------------------------------------------- 4

fn far_views(v: usize) -> Vec<usize> {
    (0..VIEW_COUNT).filter(|&u| u != v && u != (v + 1) % VIEW_COUNT && u != (v + VIEW_COUNT - 1) % VIEW_COUNT).collect()
}

fn attention_locality() -> Result<(bool, String), Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut random = |shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.5..1.5));
    let (tokens, c) = (12, 8);
    let p = AttentionParams { w_q: random(&[c, c]), w_k: random(&[c, c]), w_v: random(&[c, c]), heads: 2, residual: true };
    let base = random(&[VIEW_COUNT, tokens, c]);
    let noise = random(&[VIEW_COUNT, tokens, c]);
    let run = |x: &Tensor<f64>| -> Result<Tensor<f64>, Error> {
        let tape = Tape::new();
        let ring = RingTokens::new(tape.constant(x.clone())?)?;
        let out = adjacent_view_cross_attention(&ring, &p.bind(&tape)?)?;
        let v = out.tokens.tokens().value().clone();
        Ok(v)
    };
    let per = tokens * c;
    let perturb = |x: &Tensor<f64>, views: &[usize], per: usize, other: &Tensor<f64>| {
        let mut y = x.clone();
        for &u in views {
            y.data_mut()[u * per..(u + 1) * per].copy_from_slice(&other.data()[u * per..(u + 1) * per]);
        }
        y
    };
    let reference = run(&base)?;
    let mut unit = true;
    let mut unit_control = true;
    for v in 0..VIEW_COUNT {
        let out = run(&perturb(&base, &far_views(v), per, &noise))?;
        unit &= out.data()[v * per..(v + 1) * per] == reference.data()[v * per..(v + 1) * per];
        let out = run(&perturb(&base, &[(v + 1) % VIEW_COUNT], per, &noise))?;
        unit_control &= out.data()[v * per..(v + 1) * per] != reference.data()[v * per..(v + 1) * per];
    }

    // Desk model with projections large enough for attention to matter.
    let mut model = DinoSd::<f64>::new(ModelConfig::default(), 12)?;
    let c = model.config().encoder.channels;
    let names: Vec<String> =
        model.params().entries().iter().filter(|e| e.name.contains("mv_attn")).map(|e| e.name.clone()).collect();
    for n in names {
        model.params_mut().set(&n, Tensor::from_fn([c, c], |i| if i / c == i % c { 2.0 } else { 0.0 }))?;
    }
    let (h, w) = (64, 96);
    let images = Tensor::from_fn([VIEW_COUNT, 3, h, w], |_| rng.gen_range(0.0..1.0));
    let other = Tensor::from_fn([VIEW_COUNT, 3, h, w], |_| rng.gen_range(0.0..1.0));
    let (img_per, depth_per) = (3 * h * w, h * w);
    let depth = model.predict(&images, AttentionMode::Adjacent)?;
    let mut model_level = true;
    let mut model_control = true;
    for v in 0..VIEW_COUNT {
        let out = model.predict(&perturb(&images, &far_views(v), img_per, &other), AttentionMode::Adjacent)?;
        model_level &= out.data()[v * depth_per..(v + 1) * depth_per] == depth.data()[v * depth_per..(v + 1) * depth_per];
        let out = model.predict(&perturb(&images, &[(v + 1) % VIEW_COUNT], img_per, &other), AttentionMode::Adjacent)?;
        model_control &= out.data()[v * depth_per..(v + 1) * depth_per] != depth.data()[v * depth_per..(v + 1) * depth_per];
    }
    Ok((
        unit && model_level && unit_control && model_control,
        format!(
            "far views leave output bit-identical: unit {unit}, model {model_level}; \
             a neighbour does reach the view: unit {unit_control}, model {model_control}"
        ),
    ))
}

// ---------------------------------------------------------------- 5

fn overfit() -> Result<(bool, String), Error> {
    let cfg = TrainConfig::from_json_file(&config_path("overfit.json"))?;
    let data = gen_dataset(2, 5, &SceneConfig::default())?;
    let start = Instant::now();
    let out = train::<f32>(&cfg, &data, &[], None)?;
    let report = evaluate_model(&out.final_model, cfg.attention, &data, &[], Default::default())?;
    let secs = start.elapsed().as_secs_f64();
    let steps = out.step_losses.len();
    Ok((
        report.abs_rel < 0.05 && steps <= 500 && secs < 900.0,
        format!("masked abs_rel {:.4} after {steps} steps, {secs:.0}s", report.abs_rel),
    ))
}

// ---------------------------------------------------------------- 6, 7

fn ablation() -> Result<AblationReport, Error> {
    let text = fs::read_to_string(config_path("ablation.json")).unwrap();
    let cfg: AblationConfig =
        serde_json::from_str(&text).map_err(|source| Error::Json { path: config_path("ablation.json"), source })?;
    run_ablation::<f32>(&cfg, |r| {
        eprintln!(
            "  {:<8} seed {} best epoch {} abs_rel {:.4} restored {:.4} ({:.0}s)",
            r.attention.to_string(),
            r.seed,
            r.best_epoch,
            r.plain.abs_rel,
            r.restored.abs_rel,
            r.seconds
        )
    })
}

fn ablation_direction(report: &AblationReport, secs: f64) -> (bool, String) {
    let m = |mode| report.mean_abs_rel(mode, false).unwrap_or(f64::NAN);
    let (none, selfa, adj) = (m(AttentionMode::None), m(AttentionMode::SelfAttention), m(AttentionMode::Adjacent));
    (
        adj < selfa && selfa < none && secs < 3.0 * 3600.0,
        format!("3-seed mean abs_rel adjacent {adj:.4} < self {selfa:.4} < none {none:.4}, {secs:.0}s"),
    )
}

fn preprocessing_direction(report: &AblationReport) -> (bool, String) {
    let mode = AttentionMode::SelfAttention;
    let plain = report.mean_abs_rel(mode, false).unwrap_or(f64::NAN);
    let restored = report.mean_abs_rel(mode, true).unwrap_or(f64::NAN);
    let per_seed: Vec<String> = report
        .runs
        .iter()
        .filter(|r| r.attention == mode)
        .map(|r| format!("{:.4}->{:.4}", r.plain.abs_rel, r.restored.abs_rel))
        .collect();
    (restored < plain, format!("self attention, 3-seed mean {plain:.4} -> {restored:.4} with denoise+equalize ({})", per_seed.join(", ")))
}

// ---------------------------------------------------------------- 8

fn hash_dir(dir: &Path) -> String {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, out)
            } else {
                out.push(p)
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    format!("{:x}", h.finalize())
}

fn determinism() -> Result<(bool, String), Error> {
    let scenes = gen_dataset(3, 88, &SceneConfig::default())?;
    let (val, set) = scenes.split_at(1);
    let cfg = TrainConfig {
        epochs: 2,
        encoder_lr: 1e-3,
        decoder_lr: 4e-3,
        val_corruptions: vec![dino_sd::augment::CorruptionSpec::new(dino_sd::augment::CorruptionKind::ShotNoise, 3, 2)?],
        ..TrainConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut hashes = Vec::new();
    for d in &dirs {
        train::<f64>(&cfg, set, val, Some(d.path()))?;
        let metrics = fs::read(d.path().join("metrics.jsonl")).unwrap();
        hashes.push((hash_dir(d.path()), format!("{:x}", Sha256::digest(&metrics))));
    }
    Ok((
        hashes[0] == hashes[1],
        format!("run hashes {} / {}, metrics {} / {}", &hashes[0].0[..12], &hashes[1].0[..12], &hashes[0].1[..12], &hashes[1].1[..12]),
    ))
}

// ---------------------------------------------------------------- 9

fn format_round_trips() -> Result<(bool, String), Error> {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    let batches = gen_dataset(3, 17, &SceneConfig::default())?;
    write_dataset(&batches, &data_dir)?;
    let dataset_ok = read_dataset(&data_dir)? == batches;

    let ckpt = tmp.path().join("ckpt");
    let model = DinoSd::<f32>::new(ModelConfig::default(), 3)?;
    let manifest = save_checkpoint(&ckpt, &model, Some(AttentionMode::Adjacent), Some(2))?;
    let (loaded, m) = load_checkpoint::<f32>(&ckpt)?;
    let checkpoint_ok = loaded.params() == model.params() && m.epoch == Some(2) && m.attention == Some(AttentionMode::Adjacent);

    let origin = Path::new("probe");
    let tensor_bytes = fs::read(data_dir.join("scene_0000/depth.dsd1")).unwrap();
    let image_bytes = fs::read(data_dir.join("scene_0000/view_0.ppm")).unwrap();
    // every strict prefix and a sample of single-byte flips
    let mut typed = true;
    for cut in (0..tensor_bytes.len()).step_by(97).chain([7, 8, 11, tensor_bytes.len() - 1]) {
        typed &= matches!(dsd1::decode::<f64>(&tensor_bytes[..cut], origin), Err(Error::Format { .. }));
    }
    for cut in (0..image_bytes.len()).step_by(89).chain([1, 2, 9, image_bytes.len() - 1]) {
        typed &= matches!(ppm::decode(&image_bytes[..cut], origin), Err(Error::Format { .. }));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let mut t = tensor_bytes.clone();
        let at = rng.gen_range(0..24);
        t[at] ^= 1 << rng.gen_range(0..8);
        typed &= matches!(dsd1::decode::<f64>(&t, origin), Ok(_) | Err(Error::Format { .. }));
        let mut p = image_bytes.clone();
        let at = rng.gen_range(0..16);
        p[at] ^= 1 << rng.gen_range(0..8);
        typed &= matches!(ppm::decode(&p, origin), Ok(_) | Err(Error::Format { .. }));
    }

    let victim = ckpt.join(&manifest.tensors[5].file);
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    typed &= matches!(load_checkpoint::<f32>(&ckpt), Err(Error::Format { .. }));
    fs::write(ckpt.join("manifest.json"), "{\"format\": ").unwrap();
    typed &= matches!(load_checkpoint::<f32>(&ckpt), Err(Error::Json { .. }));

    let depth = data_dir.join("scene_0001/depth.dsd1");
    fs::write(&depth, &tensor_bytes[..tensor_bytes.len() - 3]).unwrap();
    typed &= matches!(read_dataset(&data_dir), Err(Error::Format { .. }));
    let view = data_dir.join("scene_0000/view_3.ppm");
    fs::write(&view, &image_bytes[..image_bytes.len() - 1]).unwrap();
    typed &= matches!(read_dataset(&data_dir), Err(Error::Format { .. }));
    fs::write(data_dir.join("index.json"), "[").unwrap();
    typed &= matches!(read_dataset(&data_dir), Err(Error::Json { .. }));

    Ok((
        dataset_ok && checkpoint_ok && typed,
        format!("dataset bit-exact {dataset_ok}, checkpoint bit-exact {checkpoint_ok}, damaged files give typed errors {typed}"),
    ))
}

fn settle(r: Result<(bool, String), Error>) -> (bool, String) {
    r.unwrap_or_else(|e| (false, format!("error: {e}")))
}

#[test]
fn fast_criteria() {
    let results = [
        (1, "gradient suite", gradients()),
        (2, "loss oracles", settle(loss_oracles())),
        (3, "metric oracle", settle(metric_oracle())),
        (4, "attention locality", settle(attention_locality())),
        (8, "determinism", settle(determinism())),
        (9, "format round trips", settle(format_round_trips())),
    ];
    let all = results.iter().fold(true, |acc, (id, title, (pass, detail))| verdict(*id, title, *pass, detail) && acc);
    assert!(all, "see the FAIL lines above");
}

#[test]
fn overfit_criterion() {
    let (pass, detail) = settle(overfit());
    assert!(verdict(5, "overfit", pass, &detail), "{detail}");
}

#[test]
fn ablation_criteria() {
    let start = Instant::now();
    let (six, seven) = match ablation() {
        Ok(report) => {
            let secs = start.elapsed().as_secs_f64();
            (ablation_direction(&report, secs), preprocessing_direction(&report))
        }
        Err(e) => ((false, format!("error: {e}")), (false, format!("error: {e}"))),
    };
    let a = verdict(6, "ablation direction", six.0, &six.1);
    let b = verdict(7, "preprocessing direction", seven.0, &seven.1);
    assert!(a && b, "see the FAIL lines above");
}

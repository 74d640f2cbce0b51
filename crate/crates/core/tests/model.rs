use dino_sd::attention::{AttentionMode, VIEW_COUNT};
use dino_sd::losses::{total_loss, LossWeights, SparseDepthTarget};
use dino_sd::model::{load_checkpoint, save_checkpoint, Bound, DinoSd, EncoderConfig, ModelConfig, ParamId};
use dino_sd::tensor::gradcheck::finite_diff_check_many;
use dino_sd::{Error, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(h: usize, w: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { image_height: h, image_width: w, ..EncoderConfig::default() },
        ..ModelConfig::default()
    }
}

/// Binds `model` frozen except for `ids`, which take the vars `xs`.
fn bound_with<'t>(model: &DinoSd<f64>, tape: &'t Tape<f64>, ids: &[ParamId], xs: &[Var<'t, f64>]) -> dino_sd::Result<Bound<'t, f64>> {
    let frozen = model.params().bind_frozen(tape)?;
    let vars = model
        .params()
        .ids()
        .zip(frozen.vars())
        .map(|(id, v)| ids.iter().position(|&j| j == id).map_or(*v, |k| xs[k]))
        .collect();
    Ok(Bound::from_vars(vars))
}

fn images(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([b, 3, h, w], |_| rng.gen_range(0.0..1.0))
}

/// Same weights as `model` with every attention projection set to `scale * I`.
fn with_visible_attention(mut model: DinoSd<f64>, scale: f64) -> DinoSd<f64> {
    let c = model.config().encoder.channels;
    let names: Vec<String> =
        model.params().entries().iter().filter(|e| e.name.contains("mv_attn")).map(|e| e.name.clone()).collect();
    for n in names {
        let eye = Tensor::from_fn([c, c], |i| if i / c == i % c { scale } else { 0.0 });
        model.params_mut().set(&n, eye).unwrap();
    }
    model
}

#[test]
fn output_shape_and_range() {
    let model = DinoSd::<f64>::new(ModelConfig::default(), 3).unwrap();
    let x = images(6, 64, 96, 1);
    for mode in AttentionMode::ALL {
        let d = model.predict(&x, mode).unwrap();
        assert_eq!(d.shape(), &[6, 1, 64, 96]);
        let r = &model.config().range;
        assert!(d.data().iter().all(|&v| v > r.d_min && v < r.d_max));
    }
}

#[test]
fn forward_is_deterministic() {
    let x = images(6, 32, 48, 2);
    let a = DinoSd::<f64>::new(small_config(32, 48), 9).unwrap();
    let b = DinoSd::<f64>::new(small_config(32, 48), 9).unwrap();
    let pa = a.predict(&x, AttentionMode::Adjacent).unwrap();
    assert_eq!(pa, a.predict(&x, AttentionMode::Adjacent).unwrap());
    assert_eq!(pa, b.predict(&x, AttentionMode::Adjacent).unwrap());
}

#[test]
fn attention_modes_change_the_output() {
    let model = DinoSd::<f64>::new(small_config(32, 48), 4).unwrap();
    let x = images(6, 32, 48, 5);
    let none = model.predict(&x, AttentionMode::None).unwrap();
    let adj = model.predict(&x, AttentionMode::Adjacent).unwrap();
    let slf = model.predict(&x, AttentionMode::SelfAttention).unwrap();
    assert_ne!(none, adj);
    assert_ne!(none, slf);
    assert_ne!(adj, slf);
}

#[test]
fn rejects_bad_inputs() {
    let model = DinoSd::<f64>::new(small_config(32, 48), 0).unwrap();
    assert!(model.predict(&images(5, 32, 48, 0), AttentionMode::None).is_err());
    assert!(model.predict(&images(6, 32, 40, 0), AttentionMode::None).is_err());
    let bad = ModelConfig { encoder: EncoderConfig { image_height: 30, ..EncoderConfig::default() }, ..ModelConfig::default() };
    assert!(DinoSd::<f64>::new(bad, 0).is_err());
}

#[test]
fn tap_token_counts() {
    let model = DinoSd::<f64>::new(small_config(32, 48), 1).unwrap();
    let tape = Tape::new();
    let p = model.params().bind_frozen(&tape).unwrap();
    let taps = model.encode(&p, tape.constant(images(6, 32, 48, 1)).unwrap()).unwrap();
    assert_eq!(taps.len(), 4);
    for t in taps {
        assert_eq!(t.shape(), vec![6, 4 * 6, 64]);
    }
}

#[test]
fn zero_final_block_repeats_the_previous_tap() {
    let mut model = DinoSd::<f64>::new(small_config(32, 48), 1).unwrap();
    let last = model.config().encoder.blocks - 1;
    for id in model.block_output_params(last) {
        let z = Tensor::zeros(model.params().get(id).shape().to_vec());
        *model.params_mut().get_mut(id) = z;
    }
    let tape = Tape::new();
    let p = model.params().bind_frozen(&tape).unwrap();
    let taps = model.encode(&p, tape.constant(images(6, 32, 48, 7)).unwrap()).unwrap();
    assert_eq!(*taps[2].value(), *taps[3].value());
}

#[test]
fn every_tap_reaches_the_patch_embedding() {
    let model = DinoSd::<f64>::new(small_config(32, 48), 2).unwrap();
    let embed = model.params().id("encoder.embed.weight").unwrap();
    for k in 0..4 {
        let tape = Tape::new();
        let p = model.params().bind(&tape).unwrap();
        let taps = model.encode(&p, tape.constant(images(6, 32, 48, 3)).unwrap()).unwrap();
        let loss = taps[k].sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(p[embed]).unwrap();
        let norm: f64 = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0, "tap {k}");
    }
}

#[test]
fn constant_tokens_decode_to_a_constant_map() {
    let mut model = DinoSd::<f64>::new(small_config(64, 64), 0).unwrap();
    let (c, cf) = (model.config().encoder.channels, model.config().decoder.fusion_channels);
    let names: Vec<(String, Vec<usize>)> =
        model.params().entries().iter().map(|e| (e.name.clone(), e.value.shape().to_vec())).collect();
    for (name, shape) in names {
        if name.ends_with("reassemble.weight") {
            // delta kernel copying input channel o to output channel o
            let w = Tensor::from_fn(shape, |i| {
                let (o, rest) = (i / (c * 9), i % (c * 9));
                if rest == o * 9 + 4 { 1.0 } else { 0.0 }
            });
            model.params_mut().set(&name, w).unwrap();
        } else if name.ends_with("fuse.weight") {
            model.params_mut().set(&name, Tensor::zeros(shape)).unwrap();
        }
    }
    let tape = Tape::new();
    let p = model.params().bind_frozen(&tape).unwrap();
    let t = model.config().encoder.tokens();
    let token = Tensor::from_fn([6, t, c], |i| 0.5 + 0.01 * (i % c) as f64);
    let taps: Vec<_> = (0..4).map(|_| tape.constant(token.clone()).unwrap()).collect();
    for mode in AttentionMode::ALL {
        let fused = model.decode(&p, &taps, mode).unwrap();
        let v = fused.value();
        assert_eq!(v.shape(), &[6, cf, 32, 32]);
        let plane = 32 * 32;
        for ch in 0..6 * cf {
            let slice = &v.data()[ch * plane..(ch + 1) * plane];
            assert!(slice.iter().all(|&x| (x - slice[0]).abs() < 1e-12), "{mode} channel {ch}");
        }
    }
}

#[test]
fn parameter_count_matches_the_architecture() {
    let cfg = ModelConfig::default();
    let model = DinoSd::<f64>::new(cfg.clone(), 0).unwrap();
    let e = &cfg.encoder;
    let (c, n, cf, hc) = (e.channels, e.patch_size, cfg.decoder.fusion_channels, cfg.decoder.head_channels);
    let hidden = c * e.mlp_ratio;
    let tokens = (e.image_height / n) * (e.image_width / n);
    let embed = 3 * n * n * c + c + tokens * c;
    let block = 2 * c + 4 * c * c + c + 2 * c + c * hidden + hidden + hidden * c + c;
    let stage = cf * c * 9 + cf + cf * cf * 9 + cf;
    let attention = 2 * 3 * c * c;
    let head = hc * cf * 9 + hc + hc * 9 + 1;
    let expected = embed + e.blocks * block + 4 * stage + attention + head;
    assert_eq!(model.parameter_count(), expected);
    assert_eq!(model.parameter_count(), 457_441);
    assert!(expected < 2_000_000);
    assert_eq!(DinoSd::<f64>::new(cfg, 99).unwrap().parameter_count(), expected);
}

#[test]
fn far_views_do_not_reach_a_view_through_adjacent_attention() {
    let model = with_visible_attention(DinoSd::<f64>::new(small_config(32, 48), 6).unwrap(), 2.0);
    let x = images(6, 32, 48, 8);
    let base = model.predict(&x, AttentionMode::Adjacent).unwrap();
    let plane = 32 * 48;
    let view0 = |t: &Tensor<f64>| t.data()[..plane].to_vec();
    for far in [2, 3, 4] {
        let mut y = x.clone();
        let span = 3 * plane;
        for v in &mut y.data_mut()[far * span..(far + 1) * span] {
            *v = 1.0 - *v;
        }
        let out = model.predict(&y, AttentionMode::Adjacent).unwrap();
        assert_eq!(view0(&out), view0(&base), "view {far}");
        // the same perturbation is visible under joint self attention
        let s0 = model.predict(&x, AttentionMode::SelfAttention).unwrap();
        let s1 = model.predict(&y, AttentionMode::SelfAttention).unwrap();
        assert_ne!(view0(&s0), view0(&s1));
    }
    let mut y = x.clone();
    for v in &mut y.data_mut()[3 * plane..6 * plane] {
        *v = 1.0 - *v;
    }
    assert_ne!(view0(&model.predict(&y, AttentionMode::Adjacent).unwrap()), view0(&base));
}

#[test]
fn depth_head_midpoint_and_gradients() {
    let mut model = DinoSd::<f64>::new(small_config(32, 48), 1).unwrap();
    let r = model.config().range;
    // zero second conv: sigmoid(0) = 0.5 everywhere
    for name in ["head.conv2.weight", "head.conv2.bias"] {
        let s = model.params().get(model.params().id(name).unwrap()).shape().to_vec();
        model.params_mut().set(name, Tensor::zeros(s)).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cf = model.config().decoder.fusion_channels;
    let feats = Tensor::from_fn([6, cf, 16, 24], |_| rng.gen_range(-1.0..1.0));
    let tape = Tape::new();
    let p = model.params().bind_frozen(&tape).unwrap();
    let d = model.depth_head(&p, tape.constant(feats.clone()).unwrap()).unwrap();
    let mid = 0.5 * (r.d_min + r.d_max);
    assert!(d.value().data().iter().all(|&v| (v - mid).abs() < 1e-12));

    let model = DinoSd::<f64>::new(small_config(32, 48), 1).unwrap();
    let names = ["head.conv1.weight", "head.conv1.bias", "head.conv2.weight", "head.conv2.bias"];
    let ids: Vec<ParamId> = names.iter().map(|n| model.params().id(n).unwrap()).collect();
    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| model.params().get(id).clone()).collect();
    let check = finite_diff_check_many(
        |tape, xs| {
            let p = bound_with(&model, tape, &ids, xs)?;
            let d = model.depth_head(&p, tape.constant(feats.clone())?)?;
            d.log()?.mean_all()
        },
        &inputs,
        1e-5,
        Some(40),
        3,
    )
    .unwrap();
    assert!(check.passes(1e-4), "{check:?}");
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let cfg = small_config(32, 48);
    let model = DinoSd::<f64>::new(cfg, 12).unwrap();
    let model = with_visible_attention(model, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let clean = images(6, 32, 48, 30);
    let aug1 = images(6, 32, 48, 31);
    let aug2 = images(6, 32, 48, 32);
    let gt = Tensor::from_fn([6, 1, 32, 48], |_| rng.gen_range(2.0..40.0));
    let valid = (0..gt.numel()).map(|_| rng.gen_bool(0.1)).collect();
    let target = SparseDepthTarget::new(gt, valid).unwrap();
    let inputs: Vec<Tensor<f64>> = model.params().entries().iter().map(|e| e.value.clone()).collect();
    let weights = LossWeights::default();
    let check = finite_diff_check_many(
        |tape, xs| {
            let p = Bound::from_vars(xs.to_vec());
            let run = |img: &Tensor<f64>| model.forward(&p, tape.constant(img.clone())?, AttentionMode::Adjacent);
            total_loss(run(&clean)?, run(&aug1)?, run(&aug2)?, &target, &clean, &weights)
        },
        &inputs,
        1e-5,
        Some(20),
        77,
    )
    .unwrap();
    assert!(check.passes(1e-4), "{check:?}");
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = DinoSd::<f64>::new(small_config(32, 48), 5).unwrap();
    model.params_mut().round_to_f32();
    let manifest = save_checkpoint(dir.path(), &model, Some(AttentionMode::Adjacent), Some(1)).unwrap();
    assert_eq!(manifest.tensors.len(), model.params().len());
    let (loaded, m) = load_checkpoint::<f64>(dir.path()).unwrap();
    assert_eq!(loaded.params(), model.params());
    assert_eq!(m.attention, Some(AttentionMode::Adjacent));

    let victim = dir.path().join(&manifest.tensors[3].file);
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(Error::Format { .. })));

    std::fs::write(dir.path().join("manifest.json"), "{ not json").unwrap();
    assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(Error::Json { .. })));
}

#[test]
fn batches_of_several_scenes_match_single_scenes() {
    let model = DinoSd::<f64>::new(small_config(32, 48), 8).unwrap();
    let a = images(VIEW_COUNT, 32, 48, 40);
    let b = images(VIEW_COUNT, 32, 48, 41);
    let mut both = a.data().to_vec();
    both.extend_from_slice(b.data());
    let both = Tensor::new([12, 3, 32, 48], both).unwrap();
    for mode in AttentionMode::ALL {
        let joint = model.predict(&both, mode).unwrap();
        let pa = model.predict(&a, mode).unwrap();
        let pb = model.predict(&b, mode).unwrap();
        let n = pa.numel();
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-10);
        assert!(close(&joint.data()[..n], pa.data()), "{mode}");
        assert!(close(&joint.data()[n..], pb.data()), "{mode}");
    }
}

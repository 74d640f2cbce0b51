//! Registry of finite-difference gradient checks covering every
//! differentiable operation, both attention mechanisms and the losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{adjacent_view_cross_attention, cross_view_self_attention, AttentionWeights, RingTokens};
use crate::error::Result;
use crate::losses::{augmix_js_loss, silog_loss, smooth_loss, total_loss, LossWeights, SparseDepthTarget};
use crate::seed::derive;
use crate::tensor::gradcheck::finite_diff_check_many;
use crate::tensor::{Tape, Tensor, Var};

/// Relative-error bound every registered check must meet.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Coordinates checked per random input; smaller inputs are checked whole.
pub const COORDINATES_PER_DRAW: usize = 128;

type Loss = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>], &Fixture) -> Result<Var<'t, f64>>;

/// Constants shared by one check's inputs (projection weights, masks, images).
pub struct Fixture {
    rng_seed: u64,
    weights: Vec<Tensor<f64>>,
    target: Option<SparseDepthTarget<f64>>,
    image: Option<Tensor<f64>>,
}

impl Fixture {
    /// `sum(x * r)` with a fixed random `r`, so every output element matters.
    fn project<'t>(&self, tape: &'t Tape<f64>, x: Var<'t, f64>) -> Result<Var<'t, f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed ^ 0xF00D);
        let r = Tensor::from_fn(x.shape(), |_| rng.gen_range(-1.0..1.0));
        x.mul(tape.constant(r)?)?.sum_all()
    }
}

/// One registered check.
pub struct GradientCase {
    pub name: &'static str,
    /// Builds the inputs and constants for one random draw.
    make: fn(&mut ChaCha8Rng, u64) -> (Vec<Tensor<f64>>, Fixture),
    loss: Loss,
}

/// Outcome of one registered check over all of its random inputs.
#[derive(Clone, Debug, Serialize)]
pub struct GradientReport {
    pub name: &'static str,
    pub inputs: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..2.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn plain(inputs: Vec<Tensor<f64>>, seed: u64) -> (Vec<Tensor<f64>>, Fixture) {
    (inputs, Fixture { rng_seed: seed, weights: Vec::new(), target: None, image: None })
}

/// Depth map whose horizontal and vertical neighbours differ by at least
/// `step / 2`, keeping the edge-aware smoothness term away from its `|.|` kink.
fn depth_map(rng: &mut ChaCha8Rng, step: f64) -> Tensor<f64> {
    let [_, _, h, w] = DEPTH;
    let jitter = step / 4.0;
    Tensor::from_fn(DEPTH.to_vec(), |i| {
        let (y, x) = ((i / w) % h, i % w);
        1.0 + step * ((x + 2 * y) % 5) as f64 + rng.gen_range(-jitter..jitter)
    })
}

/// Ground truth within a few percent of `pred` on a random 30% of pixels.
fn target_near(rng: &mut ChaCha8Rng, pred: &Tensor<f64>) -> SparseDepthTarget<f64> {
    let gt = Tensor::from_fn(pred.shape().to_vec(), |i| pred.data()[i] * rng.gen_range(-0.05f64..0.05).exp());
    let mut valid: Vec<bool> = (0..gt.numel()).map(|_| rng.gen_bool(0.3)).collect();
    valid[0] = true;
    SparseDepthTarget::new(gt, valid).expect("positive depth")
}

fn depth_target(rng: &mut ChaCha8Rng, shape: &[usize]) -> SparseDepthTarget<f64> {
    let gt = uniform(rng, shape, 0.5, 2.0);
    let mut valid: Vec<bool> = (0..gt.numel()).map(|_| rng.gen_bool(0.3)).collect();
    valid[0] = true;
    SparseDepthTarget::new(gt, valid).expect("positive depth")
}

fn attention_fixture(rng: &mut ChaCha8Rng, seed: u64) -> (Vec<Tensor<f64>>, Fixture) {
    let (t, c) = (2, 4);
    let tokens = uniform(rng, &[6, t, c], -1.0, 1.0);
    let weights = (0..3).map(|_| uniform(rng, &[c, c], -0.8, 0.8)).collect();
    (vec![tokens], Fixture { rng_seed: seed, weights, target: None, image: None })
}

fn attention_weights<'t>(tape: &'t Tape<f64>, fx: &Fixture) -> Result<AttentionWeights<'t, f64>> {
    Ok(AttentionWeights {
        w_q: tape.leaf(fx.weights[0].clone())?,
        w_k: tape.leaf(fx.weights[1].clone())?,
        w_v: tape.leaf(fx.weights[2].clone())?,
        heads: 2,
        residual: true,
    })
}

const DEPTH: [usize; 4] = [6, 1, 8, 12];

/// All registered checks.
pub fn gradient_cases() -> Vec<GradientCase> {
    macro_rules! case {
        ($name:expr, |$rng:ident, $seed:ident| $make:expr, |$tape:ident, $x:ident, $fx:ident| $loss:expr) => {
            GradientCase {
                name: $name,
                make: |$rng, $seed| $make,
                loss: |$tape, $x, $fx| $loss,
            }
        };
    }
    vec![
        case!("add", |r, s| plain(vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[4], -2.0, 2.0)], s), |t, x, f| f.project(t, x[0].add(x[1])?)),
        case!("sub", |r, s| plain(vec![uniform(r, &[2, 3, 4], -2.0, 2.0), uniform(r, &[3, 1], -2.0, 2.0)], s), |t, x, f| f.project(t, x[0].sub(x[1])?)),
        case!("mul", |r, s| plain(vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[1, 4], -2.0, 2.0)], s), |t, x, f| f.project(t, x[0].mul(x[1])?)),
        case!("div", |r, s| plain(vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], 0.5, 2.0)], s), |t, x, f| f.project(t, x[0].div(x[1])?)),
        case!("add_scalar", |r, s| plain(vec![uniform(r, &[5], -2.0, 2.0)], s), |t, x, f| f.project(t, x[0].add_scalar(1.5)?)),
        case!("mul_scalar", |r, s| plain(vec![uniform(r, &[5], -2.0, 2.0)], s), |t, x, f| f.project(t, x[0].mul_scalar(-0.7)?)),
        case!("neg", |r, s| plain(vec![uniform(r, &[5], -2.0, 2.0)], s), |t, x, f| f.project(t, x[0].neg()?)),
        case!("clamp_min", |r, s| plain(vec![away_from_zero(r, &[6])], s), |t, x, f| f.project(t, x[0].clamp_min(0.0)?)),
        case!("log", |r, s| plain(vec![uniform(r, &[3, 4], 0.2, 5.0)], s), |t, x, f| f.project(t, x[0].log()?)),
        case!("exp", |r, s| plain(vec![uniform(r, &[3, 4], -3.0, 3.0)], s), |t, x, f| f.project(t, x[0].exp()?)),
        case!("sigmoid", |r, s| plain(vec![uniform(r, &[3, 4], -4.0, 4.0)], s), |t, x, f| f.project(t, x[0].sigmoid()?)),
        case!("relu", |r, s| plain(vec![away_from_zero(r, &[3, 4])], s), |t, x, f| f.project(t, x[0].relu()?)),
        case!("abs", |r, s| plain(vec![away_from_zero(r, &[3, 4])], s), |t, x, f| f.project(t, x[0].abs()?)),
        case!("square", |r, s| plain(vec![uniform(r, &[3, 4], -2.0, 2.0)], s), |t, x, f| f.project(t, x[0].square()?)),
        case!("matmul", |r, s| plain(vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)], s), |t, x, f| f.project(t, x[0].matmul(x[1])?)),
        case!("matmul_batched", |r, s| plain(vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[1, 4, 2], -1.0, 1.0)], s), |t, x, f| f.project(t, x[0].matmul(x[1])?)),
        case!("softmax", |r, s| plain(vec![uniform(r, &[3, 5], -3.0, 3.0)], s), |t, x, f| f.project(t, x[0].softmax(1)?)),
        case!("softmax_first_component", |r, s| plain(vec![uniform(r, &[4], -3.0, 3.0)], s), |_t, x, _f| x[0].softmax(0)?.narrow(0, 0, 1)?.sum_all()),
        case!("layer_norm", |r, s| plain(vec![uniform(r, &[3, 6], -2.0, 2.0)], s), |t, x, f| f.project(t, x[0].layer_norm(1e-6)?)),
        case!("sum", |r, s| plain(vec![uniform(r, &[2, 3, 4], -2.0, 2.0)], s), |t, x, f| f.project(t, x[0].sum(&[0, 2], true)?)),
        case!("mean", |r, s| plain(vec![uniform(r, &[2, 3, 4], -2.0, 2.0)], s), |t, x, f| f.project(t, x[0].mean(&[1], false)?)),
        case!("sum_of_squares", |r, s| plain(vec![uniform(r, &[4, 3], -2.0, 2.0)], s), |_t, x, _f| x[0].square()?.sum_all()),
        case!("reshape", |r, s| plain(vec![uniform(r, &[2, 6], -2.0, 2.0)], s), |t, x, f| f.project(t, x[0].reshape(&[3, 4])?.square()?)),
        case!("permute", |r, s| plain(vec![uniform(r, &[2, 3, 4], -2.0, 2.0)], s), |t, x, f| f.project(t, x[0].permute(&[2, 0, 1])?.square()?)),
        case!("transpose", |r, s| plain(vec![uniform(r, &[3, 4], -2.0, 2.0)], s), |t, x, f| f.project(t, x[0].transpose(0, 1)?.square()?)),
        case!("concat", |r, s| plain(vec![uniform(r, &[2, 3], -2.0, 2.0), uniform(r, &[2, 2], -2.0, 2.0)], s), |t, x, f| f.project(t, Var::concat(&[x[0], x[1]], 1)?.square()?)),
        case!("narrow", |r, s| plain(vec![uniform(r, &[4, 5], -2.0, 2.0)], s), |t, x, f| f.project(t, x[0].narrow(1, 1, 3)?.square()?)),
        case!("index_select", |r, s| plain(vec![uniform(r, &[4, 3], -2.0, 2.0)], s), |t, x, f| f.project(t, x[0].index_select(0, &[3, 0, 0, 2])?.square()?)),
        case!("conv2d", |r, s| plain(vec![uniform(r, &[1, 2, 4, 4], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0)], s), |t, x, f| f.project(t, x[0].conv2d(x[1])?)),
        case!("resample_up", |r, s| plain(vec![uniform(r, &[1, 2, 3, 4], -1.0, 1.0)], s), |t, x, f| f.project(t, x[0].resample_bilinear(2.0)?)),
        case!("resample_down", |r, s| plain(vec![uniform(r, &[1, 2, 6, 8], -1.0, 1.0)], s), |t, x, f| f.project(t, x[0].resample_bilinear(0.5)?)),
        case!("resample_to", |r, s| plain(vec![uniform(r, &[2, 1, 4, 5], -1.0, 1.0)], s), |t, x, f| f.project(t, x[0].resample_to(7, 3)?)),
        case!("cross_view_self_attention", |r, s| attention_fixture(r, s), |t, x, f| {
            let w = attention_weights(t, f)?;
            f.project(t, cross_view_self_attention(&RingTokens::new(x[0])?, &w)?.tokens.tokens())
        }),
        case!("adjacent_view_cross_attention", |r, s| attention_fixture(r, s), |t, x, f| {
            let w = attention_weights(t, f)?;
            f.project(t, adjacent_view_cross_attention(&RingTokens::new(x[0])?, &w)?.tokens.tokens())
        }),
        case!("silog_loss", |r, s| {
            let target = depth_target(r, &DEPTH);
            let pred = depth_map(r, 0.2);
            (vec![pred], Fixture { rng_seed: s, weights: Vec::new(), target: Some(target), image: None })
        }, |_t, x, f| silog_loss(x[0], f.target.as_ref().expect("target"), 0.85)),
        case!("smooth_loss", |r, s| {
            let image = uniform(r, &[6, 3, 8, 12], 0.0, 1.0);
            let depth = depth_map(r, 0.2);
            (vec![depth], Fixture { rng_seed: s, weights: Vec::new(), target: None, image: Some(image) })
        }, |_t, x, f| smooth_loss(x[0], f.image.as_ref().expect("image"))),
        case!("augmix_js_loss", |r, s| plain((0..3).map(|_| uniform(r, &DEPTH, 0.5, 2.0)).collect(), s), |_t, x, _f| augmix_js_loss(x[0], x[1], x[2])),
        case!("total_loss", |r, s| {
            // small total so the difference noise stays below every term's gradient
            let clean = depth_map(r, 0.05);
            let target = target_near(r, &clean);
            let image = uniform(r, &[6, 3, 8, 12], 0.0, 1.0);
            let preds = vec![clean, uniform(r, &DEPTH, 0.5, 2.0), uniform(r, &DEPTH, 0.5, 2.0)];
            (preds, Fixture { rng_seed: s, weights: Vec::new(), target: Some(target), image: Some(image) })
        }, |_t, x, f| {
            // comparable weights so every term is visible at the tolerance
            let w = LossWeights { lambda_silog: 0.85, alpha_smooth: 0.5, beta_augmix: 0.5 };
            total_loss(x[0], x[1], x[2], f.target.as_ref().expect("target"), f.image.as_ref().expect("image"), &w)
        }),
    ]
}

impl GradientCase {
    /// Checks `draws` random inputs.
    pub fn run(&self, draws: usize, seed: u64) -> Result<GradientReport> {
        let mut worst = 0.0f64;
        for d in 0..draws {
            let s = derive(&[seed, d as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (inputs, fixture) = (self.make)(&mut rng, s);
            let loss = self.loss;
            let check = finite_diff_check_many(|tape, xs| loss(tape, xs, &fixture), &inputs, FD_STEP, Some(COORDINATES_PER_DRAW), s)?;
            worst = worst.max(check.max_rel_error);
        }
        Ok(GradientReport { name: self.name, inputs: draws, max_rel_error: worst, passed: worst < GRADIENT_TOLERANCE })
    }
}

/// Runs every registered check with `draws` random inputs each.
pub fn gradient_suite(draws: usize, seed: u64) -> Result<Vec<GradientReport>> {
    gradient_cases().iter().map(|c| c.run(draws, derive(&[seed, fxhash(c.name)]))).collect()
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0u64, |h, b| (h.rotate_left(5) ^ u64::from(b)).wrapping_mul(0x517C_C1B7_2722_0A95))
}

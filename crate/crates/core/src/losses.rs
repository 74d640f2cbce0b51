//! Training losses: scale-invariant log loss, edge-aware smoothness and the
//! three-way Jensen-Shannon consistency between clean and augmented
//! predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Tape, Tensor, Var};

/// Weights of `L = L_silog + alpha * L_smooth + beta * L_js`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_silog: f64,
    pub alpha_smooth: f64,
    pub beta_augmix: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_silog: 0.85, alpha_smooth: 1e-3, beta_augmix: 1e-2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_silog) || self.alpha_smooth < 0.0 || self.beta_augmix < 0.0 {
            return Err(Error::invalid(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Sparse metric ground truth `[B, 1, H, W]` with its validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepthTarget<T> {
    pub gt: Tensor<T>,
    pub valid: Vec<bool>,
}

impl<T: Real> SparseDepthTarget<T> {
    pub fn new(gt: Tensor<T>, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != gt.numel() {
            return Err(Error::invalid(format!("mask has {} entries for depth of shape {:?}", valid.len(), gt.shape())));
        }
        if gt.data().iter().zip(&valid).any(|(&d, &v)| v && !(d > T::zero())) {
            return Err(Error::invalid("ground truth must be positive wherever the mask is set"));
        }
        Ok(Self { gt, valid })
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    fn mask_tensor(&self) -> Tensor<T> {
        Tensor::from_fn(self.gt.shape().to_vec(), |i| if self.valid[i] { T::one() } else { T::zero() })
    }
}

/// `(1/n) Σ d_i² − (λ/n²)(Σ d_i)²` with `d_i = ln pred_i − ln gt_i` over the
/// `n` valid pixels of the whole batch.
pub fn silog_loss<'t, T: Real>(pred: Var<'t, T>, target: &SparseDepthTarget<T>, lambda: f64) -> Result<Var<'t, T>> {
    if pred.shape() != target.gt.shape() {
        return Err(Error::shape("silog", &pred.shape(), target.gt.shape()));
    }
    let n = target.valid_count();
    if n == 0 {
        return Err(Error::NoValidPixels("silog"));
    }
    let tape = pred.tape();
    let log_gt = Tensor::from_fn(target.gt.shape().to_vec(), |i| {
        if target.valid[i] {
            target.gt.data()[i].ln()
        } else {
            T::zero()
        }
    });
    let mask = tape.constant(target.mask_tensor())?;
    let d = pred.log()?.sub(tape.constant(log_gt)?)?.mul(mask)?;
    let n = T::from_usize(n).unwrap();
    let mean_sq = d.square()?.sum_all()?.mul_scalar(T::one() / n)?;
    let sq_mean = d.sum_all()?.square()?.mul_scalar(T::lit(lambda) / (n * n))?;
    mean_sq.sub(sq_mean)
}

/// Channel-mean grayscale of `[B, 3, H, W]` images as `[B, 1, H, W]`.
fn grayscale<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    let [b, c, h, w] = s[..] else {
        return Err(Error::invalid(format!("image must be [B, C, H, W], got {s:?}")));
    };
    let plane = h * w;
    let d = image.data();
    let cn = T::from_usize(c).unwrap();
    Ok(Tensor::from_fn([b, 1, h, w], |i| {
        let (bi, p) = (i / plane, i % plane);
        (0..c).map(|ch| d[(bi * c + ch) * plane + p]).sum::<T>() / cn
    }))
}

/// Edge-aware smoothness of mean-normalised depth.
///
/// `d* = depth / mean_view(depth)`; forward differences along x and y are
/// weighted by `exp(-|∂I|)` of the grayscale image. Each direction is
/// averaged over its difference positions and the two averages are summed.
pub fn smooth_loss<'t, T: Real>(depth: Var<'t, T>, image: &Tensor<T>) -> Result<Var<'t, T>> {
    let ds = depth.shape();
    let [b, one, h, w] = ds[..] else {
        return Err(Error::invalid(format!("depth must be [B, 1, H, W], got {ds:?}")));
    };
    let is = image.shape();
    if one != 1 || is.len() != 4 || is[0] != b || is[2] != h || is[3] != w {
        return Err(Error::shape("smooth", &ds, is));
    }
    let tape = depth.tape();
    let gray = grayscale(image)?;
    let edge_weight = |dy: usize, dx: usize| -> Tensor<T> {
        let (oh, ow) = (h - dy, w - dx);
        let g = gray.data();
        Tensor::from_fn([b, 1, oh, ow], |i| {
            let (bi, r) = (i / (oh * ow), i % (oh * ow));
            let (y, x) = (r / ow, r % ow);
            let base = bi * h * w;
            let diff = g[base + (y + dy) * w + x + dx] - g[base + y * w + x];
            (-diff.abs()).exp()
        })
    };
    let norm = depth.div(depth.mean(&[1, 2, 3], true)?)?;
    let mut total: Option<Var<'t, T>> = None;
    if w > 1 {
        let gx = norm.narrow(3, 1, w - 1)?.sub(norm.narrow(3, 0, w - 1)?)?;
        let term = gx.abs()?.mul(tape.constant(edge_weight(0, 1))?)?.mean_all()?;
        total = Some(term);
    }
    if h > 1 {
        let gy = norm.narrow(2, 1, h - 1)?.sub(norm.narrow(2, 0, h - 1)?)?;
        let term = gy.abs()?.mul(tape.constant(edge_weight(1, 0))?)?.mean_all()?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => depth.sum_all()?.mul_scalar(T::zero()),
    }
}

/// Per-view pixel distribution `value / Σ value` of a `[B, 1, H, W]` map.
fn view_distribution<'t, T: Real>(map: Var<'t, T>) -> Result<Var<'t, T>> {
    {
        let v = map.value();
        let per_view = v.numel() / v.shape()[0];
        if v.data().iter().any(|&x| x < T::zero() || !x.is_finite()) {
            return Err(Error::invalid("augmix consistency needs non-negative finite maps"));
        }
        if v.data().chunks(per_view).any(|c| c.iter().copied().sum::<T>() <= T::zero()) {
            return Err(Error::invalid("augmix consistency needs maps with positive mass per view"));
        }
    }
    map.div(map.sum(&[1, 2, 3], true)?)
}

/// `KL(p || m)` per view, summed over pixels; `0 · ln 0` contributes 0.
/// The ratio is taken before the log, so nearby `p` and `m` do not cancel.
fn kl_per_view<'t, T: Real>(p: Var<'t, T>, m: Var<'t, T>) -> Result<Var<'t, T>> {
    p.mul(p.div(m)?.log()?)?.sum(&[1, 2, 3], false)
}

/// Jensen-Shannon consistency of the clean and two augmented depth maps.
///
/// Each map is normalised per view into a distribution over pixels;
/// `P_mix` is their average and the loss is
/// `(KL(P_s‖P_mix) + KL(P_a1‖P_mix) + KL(P_a2‖P_mix)) / 3`, averaged over views.
pub fn augmix_js_loss<'t, T: Real>(clean: Var<'t, T>, aug1: Var<'t, T>, aug2: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = clean.shape();
    for other in [aug1, aug2] {
        if other.shape() != shape {
            return Err(Error::shape("augmix_js", &shape, &other.shape()));
        }
    }
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::invalid(format!("depth maps must be [B, 1, H, W], got {shape:?}")));
    }
    let third = T::one() / T::lit(3.0);
    let ps = [view_distribution(clean)?, view_distribution(aug1)?, view_distribution(aug2)?];
    // written around the first map so three identical maps mix to exactly that map
    let spread = ps[1].sub(ps[0])?.add(ps[2].sub(ps[0])?)?;
    // pixels empty in all three maps: 0 / eps instead of 0 / 0
    let mix = ps[0].add(spread.mul_scalar(third)?)?.clamp_min(T::lit(T::CLAMP_EPS))?;
    let mut kl = kl_per_view(ps[0], mix)?;
    for p in &ps[1..] {
        kl = kl.add(kl_per_view(*p, mix)?)?;
    }
    kl.mul_scalar(third)?.mean_all()
}

/// `L_silog + alpha * L_smooth + beta * L_js`; silog and smoothness use the
/// clean prediction.
pub fn total_loss<'t, T: Real>(
    pred_clean: Var<'t, T>,
    pred_aug1: Var<'t, T>,
    pred_aug2: Var<'t, T>,
    target: &SparseDepthTarget<T>,
    image_clean: &Tensor<T>,
    w: &LossWeights,
) -> Result<Var<'t, T>> {
    w.validate()?;
    let silog = silog_loss(pred_clean, target, w.lambda_silog)?;
    let smooth = smooth_loss(pred_clean, image_clean)?;
    let js = augmix_js_loss(pred_clean, pred_aug1, pred_aug2)?;
    silog
        .add(smooth.mul_scalar(T::lit(w.alpha_smooth))?)?
        .add(js.mul_scalar(T::lit(w.beta_augmix))?)
}

/// Evaluates a loss closure on fresh constants and returns its value.
pub fn loss_value<T: Real>(f: impl for<'t> FnOnce(&'t Tape<T>) -> Result<Var<'t, T>>) -> Result<T> {
    let tape = Tape::new();
    let v = f(&tape)?;
    let out = v.item();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, LN_2};

    fn target(gt: Vec<f64>, valid: Vec<bool>, shape: [usize; 4]) -> SparseDepthTarget<f64> {
        SparseDepthTarget::new(Tensor::new(shape, gt).unwrap(), valid).unwrap()
    }

    #[test]
    fn silog_hand_case() {
        let t = target(vec![E, E], vec![true, true], [1, 1, 1, 2]);
        let l = loss_value::<f64>(|tape| {
            let p = tape.constant(Tensor::new([1, 1, 1, 2], vec![E, E * E]).unwrap())?;
            silog_loss(p, &t, 0.85)
        })
        .unwrap();
        assert!((l - 0.2875).abs() < 1e-10, "{l}");
    }

    #[test]
    fn silog_perfect_prediction_is_zero() {
        let gt = vec![3.0, 7.5, 12.0, 0.0];
        let t = target(gt.clone(), vec![true, true, true, false], [1, 1, 2, 2]);
        let l = loss_value::<f64>(|tape| silog_loss(tape.constant(Tensor::new([1, 1, 2, 2], gt)?)?, &t, 0.85)).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn silog_without_valid_pixels_is_an_error() {
        let t = target(vec![1.0; 4], vec![false; 4], [1, 1, 2, 2]);
        let r = loss_value::<f64>(|tape| silog_loss(tape.constant(Tensor::ones([1, 1, 2, 2]))?, &t, 0.85));
        assert!(matches!(r, Err(Error::NoValidPixels(_))));
    }

    #[test]
    fn full_lambda_silog_is_scale_invariant() {
        let t = target(vec![2.0, 5.0, 9.0, 4.0], vec![true; 4], [1, 1, 2, 2]);
        let base = vec![2.5, 4.0, 11.0, 3.0];
        let l1 = loss_value::<f64>(|tape| silog_loss(tape.constant(Tensor::new([1, 1, 2, 2], base.clone())?)?, &t, 1.0)).unwrap();
        let scaled: Vec<f64> = base.iter().map(|v| v * 3.7).collect();
        let l2 = loss_value::<f64>(|tape| silog_loss(tape.constant(Tensor::new([1, 1, 2, 2], scaled)?)?, &t, 1.0)).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn smooth_hand_case_and_zero_case() {
        let img = Tensor::full([1, 3, 2, 2], 0.4);
        let l = loss_value::<f64>(|tape| {
            smooth_loss(tape.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 1.0, 2.0])?)?, &img)
        })
        .unwrap();
        // mean depth 1.5: normalised rows [2/3, 4/3]; x term 2/3, y term 0
        assert!((l - 2.0 / 3.0).abs() < 1e-10, "{l}");
        let z = loss_value::<f64>(|tape| smooth_loss(tape.constant(Tensor::full([2, 1, 3, 4], 5.0))?, &img_like(2, 3, 4))).unwrap();
        assert_eq!(z, 0.0);
    }

    fn img_like(b: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn([b, 3, h, w], |i| ((i * 37) % 11) as f64 / 11.0)
    }

    #[test]
    fn smoothness_is_edge_aware() {
        let ramp = Tensor::from_fn([1, 1, 4, 4], |i| 1.0 + (i % 4) as f64);
        let flat = Tensor::full([1, 3, 4, 4], 0.5);
        let edges = Tensor::from_fn([1, 3, 4, 4], |i| if (i % 4) % 2 == 0 { 0.0 } else { 1.0 });
        let lf = loss_value::<f64>(|tape| smooth_loss(tape.constant(ramp.clone())?, &flat)).unwrap();
        let le = loss_value::<f64>(|tape| smooth_loss(tape.constant(ramp.clone())?, &edges)).unwrap();
        assert!(lf > le);
    }

    #[test]
    fn js_hand_case() {
        let mk = |v: [f64; 2]| Tensor::new([1, 1, 1, 2], v.to_vec()).unwrap();
        let l = loss_value::<f64>(|tape| {
            augmix_js_loss(tape.constant(mk([1.0, 0.0]))?, tape.constant(mk([0.0, 1.0]))?, tape.constant(mk([0.5, 0.5]))?)
        })
        .unwrap();
        assert!((l - 2.0 * LN_2 / 3.0).abs() < 1e-10, "{l}");
    }

    #[test]
    fn js_identical_maps_is_zero_and_rejects_negative() {
        let m = Tensor::from_fn([6, 1, 2, 3], |i| 1.0 + i as f64);
        let l = loss_value::<f64>(|tape| {
            let a = tape.constant(m.clone())?;
            augmix_js_loss(a, a, a)
        })
        .unwrap();
        assert_eq!(l, 0.0);
        let bad = Tensor::new([1, 1, 1, 2], vec![1.0, -1.0]).unwrap();
        let r = loss_value::<f64>(|tape| {
            let a = tape.constant(bad.clone())?;
            augmix_js_loss(a, a, a)
        });
        assert!(r.is_err());
    }

    #[test]
    fn total_with_zero_weights_is_silog() {
        let t = target(vec![2.0, 5.0, 9.0, 4.0], vec![true, false, true, true], [1, 1, 2, 2]);
        let p = Tensor::new([1, 1, 2, 2], vec![2.5, 4.0, 11.0, 3.0]).unwrap();
        let img = img_like(1, 2, 2);
        let w = LossWeights { alpha_smooth: 0.0, beta_augmix: 0.0, ..Default::default() };
        let total = loss_value::<f64>(|tape| {
            let a = tape.constant(p.clone())?;
            total_loss(a, a, a, &t, &img, &w)
        })
        .unwrap();
        let silog = loss_value::<f64>(|tape| silog_loss(tape.constant(p.clone())?, &t, 0.85)).unwrap();
        assert_eq!(total, silog);
    }
}

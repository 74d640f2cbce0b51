//! Central finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - numeric| / (|analytic| + 1e-10)` over checked coordinates.
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, h: T, samples: Option<usize>, seed: u64) -> Result<GradCheck>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    finite_diff_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), h, samples, seed)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step `h`.
///
/// With `samples = Some(k)`, `k` coordinates are drawn uniformly without
/// replacement across all inputs; otherwise every coordinate is checked.
pub fn finite_diff_check_many<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    h: T,
    samples: Option<usize>,
    seed: u64,
) -> Result<GradCheck>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let analytic: Vec<Tensor<T>> = {
        let tape = Tape::new();
        let vars = inputs.iter().map(|x| tape.leaf(x.clone())).collect::<Result<Vec<_>>>()?;
        let loss = f(&tape, &vars)?;
        let mut grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.take(*v).expect("leaf gradient")).collect()
    };

    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let tape = Tape::new();
        let vars = xs.iter().map(|x| tape.constant(x.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item().as_f64())
    };

    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<usize> = match samples {
        Some(k) if k < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = rand::seq::index::sample(&mut rng, total, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..total).collect(),
    };

    let mut work = inputs.to_vec();
    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    for flat in picks {
        let (mut which, mut idx) = (0, flat);
        while idx >= sizes[which] {
            idx -= sizes[which];
            which += 1;
        }
        let orig = work[which].data()[idx];
        work[which].data_mut()[idx] = orig + h;
        let plus = eval(&work)?;
        work[which].data_mut()[idx] = orig - h;
        let minus = eval(&work)?;
        work[which].data_mut()[idx] = orig;

        let numeric = (plus - minus) / (2.0 * h.as_f64());
        let a = analytic[which].data()[idx].as_f64();
        let rel = (a - numeric).abs() / (a.abs() + 1e-10);
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst = (which, idx);
        }
        report.checked += 1;
    }
    Ok(report)
}

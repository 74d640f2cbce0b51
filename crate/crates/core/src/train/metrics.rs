//! Standard depth-estimation error metrics over valid pixels.

pub use crate::tensor::pairwise_sum;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::SparseDepthTarget;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub log_rmse: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub pixels: usize,
}



/// Per-pixel terms collected across any number of predictions.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    abs_rel: Vec<f64>,
    sq_rel: Vec<f64>,
    sq: Vec<f64>,
    log_sq: Vec<f64>,
    within: [usize; 3],
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pixels(&self) -> usize {
        self.abs_rel.len()
    }

    pub fn push_pixel(&mut self, pred: f64, gt: f64) {
        let diff = pred - gt;
        self.abs_rel.push(diff.abs() / gt);
        self.sq_rel.push(diff * diff / gt);
        self.sq.push(diff * diff);
        let ld = pred.ln() - gt.ln();
        self.log_sq.push(ld * ld);
        let ratio = (pred / gt).max(gt / pred);
        for (k, count) in self.within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *count += 1;
            }
        }
    }

    pub fn push<T: Real>(&mut self, pred: &Tensor<T>, target: &SparseDepthTarget<T>) -> Result<()> {
        if pred.shape() != target.gt.shape() {
            return Err(Error::shape("metrics", pred.shape(), target.gt.shape()));
        }
        for ((p, g), &v) in pred.data().iter().zip(target.gt.data()).zip(&target.valid) {
            if v {
                self.push_pixel(p.as_f64(), g.as_f64());
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricReport> {
        let n = self.pixels();
        if n == 0 {
            return Err(Error::NoValidPixels("metrics"));
        }
        let nf = n as f64;
        let mean = |v: &[f64]| pairwise_sum(v) / nf;
        Ok(MetricReport {
            abs_rel: mean(&self.abs_rel),
            sq_rel: mean(&self.sq_rel),
            rmse: mean(&self.sq).sqrt(),
            log_rmse: mean(&self.log_sq).sqrt(),
            a1: self.within[0] as f64 / nf,
            a2: self.within[1] as f64 / nf,
            a3: self.within[2] as f64 / nf,
            pixels: n,
        })
    }
}

pub fn compute_metrics<T: Real>(pred: &Tensor<T>, target: &SparseDepthTarget<T>) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    acc.push(pred, target)?;
    acc.finish()
}

use super::tape::{GradSink, Op, Var};
use super::{check_axis, Tensor};
use crate::error::Result;
use crate::scalar::Real;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, T: Real> Var<'t, T> {
    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(self, axis: usize) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            check_axis("softmax", x.value.shape(), axis)?;
            (softmax_forward(&x.value, axis), x.requires_grad)
        };
        self.tape.push(value, Op::Softmax(self.id, axis), rg)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(self, eps: T) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            let d = *x.value.shape().last().unwrap();
            let mut out = x.value.data().to_vec();
            for row in out.chunks_mut(d) {
                let (mean, rstd) = row_stats(row, eps);
                row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
            }
            (Tensor::from_parts(x.value.shape().to_vec(), out), x.requires_grad)
        };
        self.tape.push(value, Op::LayerNorm(self.id, eps), rg)
    }
}

fn row_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_usize(row.len()).unwrap();
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

pub(crate) fn softmax_forward<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let at = |j: usize| base + j * inner;
            let max = (0..n).map(|j| xd[at(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..n {
                let e = (xd[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(super) fn backward_softmax<T: Real>(
    y: &Tensor<T>,
    axis: usize,
    g: &[T],
    input: usize,
    sink: &mut GradSink<'_, T>,
) {
    let Some(slot) = sink.slot(input) else { return };
    let (outer, n, inner) = split_axis(y.shape(), axis);
    let yd = y.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let dot: T = (0..n).map(|j| g[base + j * inner] * yd[base + j * inner]).sum();
            for j in 0..n {
                let k = base + j * inner;
                slot[k] += yd[k] * (g[k] - dot);
            }
        }
    }
}

pub(super) fn backward_layer_norm<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    eps: T,
    g: &[T],
    input: usize,
    sink: &mut GradSink<'_, T>,
) {
    let Some(slot) = sink.slot(input) else { return };
    let d = *x.shape().last().unwrap();
    let n = T::from_usize(d).unwrap();
    for ((xr, yr), (gr, sr)) in x
        .data()
        .chunks(d)
        .zip(y.data().chunks(d))
        .zip(g.chunks(d).zip(slot.chunks_mut(d)))
    {
        let (_, rstd) = row_stats(xr, eps);
        let mean_g = gr.iter().copied().sum::<T>() / n;
        let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
        for j in 0..d {
            sr[j] += rstd * (gr[j] - mean_g - yr[j] * mean_gy);
        }
    }
}

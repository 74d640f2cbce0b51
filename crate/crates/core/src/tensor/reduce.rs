use super::broadcast::Broadcast;
use super::tape::{GradSink, Op, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

fn keep_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

fn validate(shape: &[usize], axes: &[usize]) -> Result<()> {
    if axes.is_empty() {
        return Err(Error::EmptyReduction { op: "reduce" });
    }
    for (i, &a) in axes.iter().enumerate() {
        if a >= shape.len() || axes[..i].contains(&a) {
            return Err(Error::invalid(format!("reduce: bad axes {axes:?} for shape {shape:?}")));
        }
    }
    Ok(())
}

impl<'t, T: Real> Var<'t, T> {
    /// Sums or averages over `axes`. Reduced axes are dropped unless
    /// `keepdim`; reducing every axis yields shape `[1]`.
    pub fn reduce(self, kind: ReduceKind, axes: &[usize], keepdim: bool) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            let shape = x.value.shape();
            validate(shape, axes)?;
            let keep = keep_shape(shape, axes);
            let bc = Broadcast::new("reduce", shape, &keep)?;
            let outputs: usize = keep.iter().product();
            let xd = x.value.data();
            let trailing = axes.iter().all(|&a| a + axes.len() >= shape.len());
            let mut acc = if trailing {
                // each output owns one contiguous run of inputs
                xd.chunks(xd.len() / outputs.max(1)).map(pairwise_sum).collect()
            } else {
                let mut acc = vec![T::zero(); outputs];
                bc.for_each(|o, _, ib| acc[ib] += xd[o]);
                acc
            };
            if kind == ReduceKind::Mean {
                let count = T::from_usize(x.value.numel() / acc.len()).unwrap();
                acc.iter_mut().for_each(|v| *v = *v / count);
            }
            let out_shape = if keepdim {
                keep
            } else {
                let s: Vec<usize> =
                    shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
                if s.is_empty() {
                    vec![1]
                } else {
                    s
                }
            };
            (Tensor::from_parts(out_shape, acc), x.requires_grad)
        };
        self.tape.push(value, Op::Reduce { input: self.id, kind, axes: axes.to_vec() }, rg)
    }

    pub fn sum(self, axes: &[usize], keepdim: bool) -> Result<Self> {
        self.reduce(ReduceKind::Sum, axes, keepdim)
    }

    pub fn mean(self, axes: &[usize], keepdim: bool) -> Result<Self> {
        self.reduce(ReduceKind::Mean, axes, keepdim)
    }

    pub fn sum_all(self) -> Result<Self> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.sum(&axes, false)
    }

    pub fn mean_all(self) -> Result<Self> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.mean(&axes, false)
    }
}

/// Sum by recursive halving; the result depends only on the sequence, and
/// rounding error grows as `O(log n)`.
pub fn pairwise_sum<T: Real>(v: &[T]) -> T {
    const LEAF: usize = 8;
    if v.len() <= LEAF {
        return v.iter().fold(T::zero(), |a, &b| a + b);
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

pub(super) fn backward_reduce<T: Real>(
    x: &Tensor<T>,
    kind: ReduceKind,
    axes: &[usize],
    g: &[T],
    input: usize,
    sink: &mut GradSink<'_, T>,
) {
    let Some(slot) = sink.slot(input) else { return };
    let keep = keep_shape(x.shape(), axes);
    let bc = Broadcast::new("reduce", x.shape(), &keep).expect("validated in forward");
    match kind {
        ReduceKind::Sum => bc.for_each(|o, _, ib| slot[o] += g[ib]),
        ReduceKind::Mean => {
            let count = T::from_usize(x.numel() / g.len()).unwrap();
            bc.for_each(|o, _, ib| slot[o] += g[ib] / count)
        }
    }
}

use super::broadcast::Broadcast;
use super::tape::{GradSink, Op, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatLayout, Real};

struct MatmulPlan {
    batch: Broadcast,
    m: usize,
    k: usize,
    p: usize,
}

fn padded_batch(shape: &[usize]) -> Vec<usize> {
    let b = &shape[..shape.len() - 2];
    if b.is_empty() {
        vec![1]
    } else {
        b.to_vec()
    }
}

fn plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, p) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let batch = Broadcast::new("matmul", &padded_batch(a), &padded_batch(b))
        .map_err(|_| Error::shape("matmul", a, b))?;
    Ok(MatmulPlan { batch, m, k, p })
}

impl<'t, T: Real> Var<'t, T> {
    /// Batched matrix product `[.., M, K] x [.., K, P] -> [.., M, P]`.
    ///
    /// Leading batch dimensions broadcast; a rank-2 operand is shared by
    /// every batch entry of the other.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Self> {
        self.same_tape(&other)?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            (matmul_forward(&a.value, &b.value)?, a.requires_grad || b.requires_grad)
        };
        self.tape.push(value, Op::MatMul(self.id, other.id), rg)
    }
}

pub(crate) fn matmul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let pl = plan(a.shape(), b.shape())?;
    let (m, k, p) = (pl.m, pl.k, pl.p);
    let mut out = vec![T::zero(); pl.batch.numel() * m * p];
    pl.batch.for_each(|o, ia, ib| {
        gemm(
            T::one(),
            a.data(),
            MatLayout::row_major(ia * m * k, m, k),
            b.data(),
            MatLayout::row_major(ib * k * p, k, p),
            T::zero(),
            &mut out,
            MatLayout::row_major(o * m * p, m, p),
        )
    });
    let mut shape = if a.rank() == 2 && b.rank() == 2 { vec![] } else { pl.batch.out.clone() };
    shape.extend([m, p]);
    Ok(Tensor::from_parts(shape, out))
}

pub(super) fn backward_matmul<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &[T],
    a_id: usize,
    b_id: usize,
    sink: &mut GradSink<'_, T>,
) {
    let pl = plan(a.shape(), b.shape()).expect("validated in forward");
    let (m, k, p) = (pl.m, pl.k, pl.p);
    if sink.wants(a_id) {
        let mut ga = vec![T::zero(); a.numel()];
        pl.batch.for_each(|o, ia, ib| {
            // dA = dC * B^T
            gemm(
                T::one(),
                g,
                MatLayout::row_major(o * m * p, m, p),
                b.data(),
                MatLayout::row_major(ib * k * p, k, p).t(),
                T::one(),
                &mut ga,
                MatLayout::row_major(ia * m * k, m, k),
            )
        });
        sink.add_owned(a_id, ga);
    }
    if sink.wants(b_id) {
        let mut gb = vec![T::zero(); b.numel()];
        pl.batch.for_each(|o, ia, ib| {
            // dB = A^T * dC
            gemm(
                T::one(),
                a.data(),
                MatLayout::row_major(ia * m * k, m, k).t(),
                g,
                MatLayout::row_major(o * m * p, m, p),
                T::one(),
                &mut gb,
                MatLayout::row_major(ib * k * p, k, p),
            )
        });
        sink.add_owned(b_id, gb);
    }
}

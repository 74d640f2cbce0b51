use super::tape::{GradSink, Node, Op, Var};
use super::{check_axis, strides, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    let inner = out_shape[rank - 1];
    let inner_step = step[rank - 1];
    while out.len() < n {
        let mut s = src;
        for _ in 0..inner {
            out.push(data[s]);
            s += inner_step;
        }
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            counter[d] += 1;
            src += step[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= step[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    (out_shape, out)
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

impl<'t, T: Real> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            (x.value.clone().reshape(shape.to_vec())?, x.requires_grad)
        };
        self.tape.push(value, Op::Reshape(self.id), rg)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            let shape = x.value.shape();
            let mut seen = vec![false; shape.len()];
            if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::invalid(format!("permute: {perm:?} is not a permutation of {shape:?}")));
            }
            let (s, d) = permute_data(x.value.data(), shape, perm);
            (Tensor::from_parts(s, d), x.requires_grad)
        };
        self.tape.push(value, Op::Permute(self.id, perm.to_vec()), rg)
    }

    pub fn transpose(self, a: usize, b: usize) -> Result<Self> {
        let rank = self.value().rank();
        check_axis("transpose", &self.shape(), a.max(b))?;
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Joins vars along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Self> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        for p in parts {
            first.same_tape(p)?;
        }
        let tape = first.tape;
        let (value, rg) = {
            let nodes = tape.nodes();
            let base = nodes[first.id].value.shape().to_vec();
            check_axis("concat", &base, axis)?;
            let mut total = 0;
            for p in parts {
                let s = nodes[p.id].value.shape();
                let ok = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !ok {
                    return Err(Error::shape("concat", &base, s));
                }
                total += s[axis];
            }
            let (outer, _) = outer_inner(&base, axis);
            let mut shape = base.clone();
            shape[axis] = total;
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let chunk = v.numel() / outer;
                    out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            (Tensor::from_parts(shape, out), parts.iter().any(|p| nodes[p.id].requires_grad))
        };
        tape.push(value, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), rg)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            let shape = x.value.shape();
            check_axis("narrow", shape, axis)?;
            if len == 0 || start + len > shape[axis] {
                return Err(Error::invalid(format!(
                    "narrow: range {start}..{} exceeds axis {axis} of {shape:?}",
                    start + len
                )));
            }
            let (outer, inner) = outer_inner(shape, axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            let xd = x.value.data();
            for o in 0..outer {
                let from = (o * shape[axis] + start) * inner;
                out.extend_from_slice(&xd[from..from + len * inner]);
            }
            let mut s = shape.to_vec();
            s[axis] = len;
            (Tensor::from_parts(s, out), x.requires_grad)
        };
        self.tape.push(value, Op::Narrow { input: self.id, axis, start }, rg)
    }

    /// Gathers entries of `axis` in the given order (repeats allowed).
    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            let shape = x.value.shape();
            check_axis("index_select", shape, axis)?;
            if indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
                return Err(Error::invalid(format!(
                    "index_select: indices {indices:?} invalid for axis {axis} of {shape:?}"
                )));
            }
            let (outer, inner) = outer_inner(shape, axis);
            let xd = x.value.data();
            let mut out = Vec::with_capacity(outer * indices.len() * inner);
            for o in 0..outer {
                for &i in indices {
                    let from = (o * shape[axis] + i) * inner;
                    out.extend_from_slice(&xd[from..from + inner]);
                }
            }
            let mut s = shape.to_vec();
            s[axis] = indices.len();
            (Tensor::from_parts(s, out), x.requires_grad)
        };
        self.tape.push(value, Op::IndexSelect { input: self.id, axis, indices: indices.to_vec() }, rg)
    }
}

pub(super) fn backward_permute<T: Real>(
    out_shape: &[usize],
    perm: &[usize],
    g: &[T],
    input: usize,
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(input) {
        return;
    }
    let (_, back) = permute_data(g, out_shape, &inverse(perm));
    sink.add_owned(input, back);
}

pub(super) fn backward_concat<T: Real>(
    nodes: &[Node<T>],
    inputs: &[usize],
    axis: usize,
    out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (outer, _) = outer_inner(out.shape(), axis);
    let row = out.numel() / outer;
    let mut offset = 0;
    for &id in inputs {
        let chunk = nodes[id].value.numel() / outer;
        if let Some(slot) = sink.slot(id) {
            for o in 0..outer {
                let src = &g[o * row + offset..o * row + offset + chunk];
                for (s, &v) in slot[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                    *s += v;
                }
            }
        }
        offset += chunk;
    }
}

pub(super) fn backward_narrow<T: Real>(
    x: &Tensor<T>,
    axis: usize,
    start: usize,
    out: &Tensor<T>,
    g: &[T],
    input: usize,
    sink: &mut GradSink<'_, T>,
) {
    let Some(slot) = sink.slot(input) else { return };
    let shape = x.shape();
    let (outer, inner) = outer_inner(shape, axis);
    let len = out.shape()[axis];
    for o in 0..outer {
        let to = (o * shape[axis] + start) * inner;
        let from = o * len * inner;
        for (s, &v) in slot[to..to + len * inner].iter_mut().zip(&g[from..from + len * inner]) {
            *s += v;
        }
    }
}

pub(super) fn backward_index_select<T: Real>(
    x: &Tensor<T>,
    axis: usize,
    indices: &[usize],
    g: &[T],
    input: usize,
    sink: &mut GradSink<'_, T>,
) {
    let Some(slot) = sink.slot(input) else { return };
    let shape = x.shape();
    let (outer, inner) = outer_inner(shape, axis);
    let mut from = 0;
    for o in 0..outer {
        for &i in indices {
            let to = (o * shape[axis] + i) * inner;
            for (s, &v) in slot[to..to + inner].iter_mut().zip(&g[from..from + inner]) {
                *s += v;
            }
            from += inner;
        }
    }
}

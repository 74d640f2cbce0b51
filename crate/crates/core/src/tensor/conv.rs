use super::tape::{GradSink, Op, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatLayout, Real};

#[derive(Clone, Copy)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
}

impl Geom {
    fn of(x: &[usize], w: &[usize]) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || w[1] != x[1] || w[2] != w[3] || w[2] % 2 == 0 {
            return Err(Error::shape("conv2d", x, w));
        }
        Ok(Self { n: x[0], c: x[1], h: x[2], w: x[3], o: w[0], k: w[2] })
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one image `[C, H, W]` into `[C*k*k, H*W]` with zero padding.
fn im2col<T: Real>(g: Geom, img: &[T], col: &mut [T]) {
    let pad = (g.k / 2) as isize;
    let hw = g.pixels();
    for c in 0..g.c {
        let plane = &img[c * hw..(c + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * hw;
                let dst = &mut col[row..row + hw];
                let dx = kx as isize - pad;
                for y in 0..g.h {
                    let sy = y as isize + ky as isize - pad;
                    let line = &mut dst[y * g.w..(y + 1) * g.w];
                    if sy < 0 || sy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    let lo = (-dx).max(0) as usize;
                    let hi = (g.w as isize - dx).min(g.w as isize).max(lo as isize) as usize;
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if hi > lo {
                        let off = (lo as isize + dx) as usize;
                        line[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
fn col2im<T: Real>(g: Geom, col: &[T], img: &mut [T]) {
    let pad = (g.k / 2) as isize;
    let hw = g.pixels();
    for c in 0..g.c {
        let plane = &mut img[c * hw..(c + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * hw;
                let src = &col[row..row + hw];
                let dx = kx as isize - pad;
                for y in 0..g.h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let line = &src[y * g.w..(y + 1) * g.w];
                    let dst = &mut plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    let lo = (-dx).max(0) as usize;
                    let hi = (g.w as isize - dx).min(g.w as isize).max(lo as isize) as usize;
                    if hi > lo {
                        let off = (lo as isize + dx) as usize;
                        for (d, &v) in dst[off..off + hi - lo].iter_mut().zip(&line[lo..hi]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Same-size cross-correlation: `[N,C,H,W] * [O,C,k,k] -> [N,O,H,W]`,
    /// stride 1, zero padding `k/2`, odd `k`.
    pub fn conv2d(self, weight: Var<'t, T>) -> Result<Self> {
        self.same_tape(&weight)?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (x, w) = (&nodes[self.id], &nodes[weight.id]);
            let g = Geom::of(x.value.shape(), w.value.shape())?;
            let (patch, hw) = (g.patch(), g.pixels());
            let mut col = vec![T::zero(); patch * hw];
            let mut out = vec![T::zero(); g.n * g.o * hw];
            let xd = x.value.data();
            for b in 0..g.n {
                im2col(g, &xd[b * g.c * hw..(b + 1) * g.c * hw], &mut col);
                gemm(
                    T::one(),
                    w.value.data(),
                    MatLayout::row_major(0, g.o, patch),
                    &col,
                    MatLayout::row_major(0, patch, hw),
                    T::zero(),
                    &mut out,
                    MatLayout::row_major(b * g.o * hw, g.o, hw),
                );
            }
            (Tensor::from_parts(vec![g.n, g.o, g.h, g.w], out), x.requires_grad || w.requires_grad)
        };
        self.tape.push(value, Op::Conv2d { input: self.id, weight: weight.id }, rg)
    }
}

pub(super) fn backward_conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &[T],
    x_id: usize,
    w_id: usize,
    sink: &mut GradSink<'_, T>,
) {
    let geo = Geom::of(x.shape(), w.shape()).expect("validated in forward");
    let (patch, hw) = (geo.patch(), geo.pixels());
    let want_x = sink.wants(x_id);
    let want_w = sink.wants(w_id);
    let mut col = vec![T::zero(); patch * hw];
    let mut gw = if want_w { vec![T::zero(); w.numel()] } else { Vec::new() };
    let mut gx = if want_x { vec![T::zero(); x.numel()] } else { Vec::new() };
    let xd = x.data();
    for b in 0..geo.n {
        let go = MatLayout::row_major(b * geo.o * hw, geo.o, hw);
        if want_w {
            im2col(geo, &xd[b * geo.c * hw..(b + 1) * geo.c * hw], &mut col);
            gemm(
                T::one(),
                g,
                go,
                &col,
                MatLayout::row_major(0, patch, hw).t(),
                T::one(),
                &mut gw,
                MatLayout::row_major(0, geo.o, patch),
            );
        }
        if want_x {
            gemm(
                T::one(),
                w.data(),
                MatLayout::row_major(0, geo.o, patch).t(),
                g,
                go,
                T::zero(),
                &mut col,
                MatLayout::row_major(0, patch, hw),
            );
            col2im(geo, &col, &mut gx[b * geo.c * hw..(b + 1) * geo.c * hw]);
        }
    }
    if want_w {
        sink.add_owned(w_id, gw);
    }
    if want_x {
        sink.add_owned(x_id, gx);
    }
}

use super::tape::{GradSink, Op, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// `round(len * scale)`, rejecting non-positive scales and empty outputs.
pub(crate) fn output_extent(len: usize, scale: f64) -> Result<usize> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("resample scale must be positive, got {scale}")));
    }
    let out = (len as f64 * scale).round() as usize;
    if out == 0 {
        return Err(Error::invalid(format!("resample of extent {len} by {scale} is empty")));
    }
    Ok(out)
}

/// Source taps `(lo, hi, frac)` for each output coordinate, half-pixel
/// centres (align-corners off), clamped at the borders.
pub(crate) fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

fn geometry(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c, h, w] => Ok((n * c, *h, *w)),
        _ => Err(Error::invalid(format!("resample expects [N,C,H,W], got {shape:?}"))),
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Bilinear resize of `[N,C,H,W]` to `[N,C,round(sH),round(sW)]`.
    pub fn resample_bilinear(self, scale: f64) -> Result<Self> {
        let shape = self.shape();
        let (_, h, w) = geometry(&shape)?;
        self.resample_to(output_extent(h, scale)?, output_extent(w, scale)?)
    }

    /// Bilinear resize of `[N,C,H,W]` to an explicit spatial size.
    pub fn resample_to(self, out_h: usize, out_w: usize) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            let shape = x.value.shape();
            let (planes, h, w) = geometry(shape)?;
            if out_h == 0 || out_w == 0 {
                return Err(Error::invalid("resample to an empty extent"));
            }
            let ty = axis_taps(h, out_h);
            let tx = axis_taps(w, out_w);
            let xd = x.value.data();
            let mut out = Vec::with_capacity(planes * out_h * out_w);
            for p in 0..planes {
                let plane = &xd[p * h * w..(p + 1) * h * w];
                for &(y0, y1, fy) in &ty {
                    let fy = T::lit(fy);
                    let (r0, r1) = (&plane[y0 * w..(y0 + 1) * w], &plane[y1 * w..(y1 + 1) * w]);
                    for &(x0, x1, fx) in &tx {
                        let fx = T::lit(fx);
                        let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                        let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                        out.push(top + fy * (bot - top));
                    }
                }
            }
            let mut s = shape.to_vec();
            s[2] = out_h;
            s[3] = out_w;
            (Tensor::from_parts(s, out), x.requires_grad)
        };
        self.tape.push(value, Op::Resample(self.id), rg)
    }
}

pub(super) fn backward_resample<T: Real>(
    x: &Tensor<T>,
    out: &Tensor<T>,
    g: &[T],
    input: usize,
    sink: &mut GradSink<'_, T>,
) {
    let Some(slot) = sink.slot(input) else { return };
    let (planes, h, w) = geometry(x.shape()).expect("validated in forward");
    let (oh, ow) = (out.shape()[2], out.shape()[3]);
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let one = T::one();
    let mut k = 0;
    for p in 0..planes {
        let base = p * h * w;
        for &(y0, y1, fy) in &ty {
            let fy = T::lit(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::lit(fx);
                let gv = g[k];
                k += 1;
                slot[base + y0 * w + x0] += gv * (one - fx) * (one - fy);
                slot[base + y0 * w + x1] += gv * fx * (one - fy);
                slot[base + y1 * w + x0] += gv * (one - fx) * fy;
                slot[base + y1 * w + x1] += gv * fx * fy;
            }
        }
    }
}

use super::broadcast::Broadcast;
use super::tape::{GradSink, Op, Var};
use super::Tensor;
use crate::error::Result;
use crate::scalar::Real;

#[inline]
fn clamp_divisor<T: Real>(b: T) -> (T, bool) {
    let eps = T::lit(T::CLAMP_EPS);
    if b.abs() >= eps {
        (b, false)
    } else if b < T::zero() {
        (-eps, true)
    } else {
        (eps, true)
    }
}

#[inline]
fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn exp_ceiling<T: Real>() -> T {
    // largest argument with a finite exponential, minus a little headroom
    T::max_value().ln() - T::lit(1.0)
}

impl<'t, T: Real> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_tape(&other)?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let bc = Broadcast::new(name, a.value.shape(), b.value.shape())?;
            let (ad, bd) = (a.value.data(), b.value.data());
            let mut out = Vec::with_capacity(bc.numel());
            bc.for_each(|_, ia, ib| out.push(f(ad[ia], bd[ib])));
            (Tensor::from_parts(bc.out.clone(), out), a.requires_grad || b.requires_grad)
        };
        let op = match name {
            "add" => Op::Add(self.id, other.id),
            "sub" => Op::Sub(self.id, other.id),
            "mul" => Op::Mul(self.id, other.id),
            _ => Op::Div(self.id, other.id),
        };
        self.tape.push(value, op, rg)
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            (n.value.map(f), n.requires_grad)
        };
        self.tape.push(value, op, rg)
    }

    /// Broadcasting `self + other`.
    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b)
    }

    /// Broadcasting division; divisors smaller than `1e-8` in magnitude are
    /// clamped to `±1e-8` (zero maps to `+1e-8`).
    pub fn div(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "div", |a, b| a / clamp_divisor(b).0)
    }

    pub fn add_scalar(self, c: T) -> Result<Self> {
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn mul_scalar(self, c: T) -> Result<Self> {
        self.unary(Op::MulScalar(self.id, c), |v| v * c)
    }

    pub fn neg(self) -> Result<Self> {
        self.mul_scalar(-T::one())
    }

    /// `max(self, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(self, floor: T) -> Result<Self> {
        self.unary(Op::ClampMin(self.id, floor), |v| v.max(floor))
    }

    /// Natural log of `max(x, 1e-8)`.
    pub fn log(self) -> Result<Self> {
        let eps = T::lit(T::CLAMP_EPS);
        self.unary(Op::Log(self.id), |v| v.max(eps).ln())
    }

    /// Exponential with the argument clamped so the result stays finite.
    pub fn exp(self) -> Result<Self> {
        let hi = exp_ceiling::<T>();
        self.unary(Op::Exp(self.id), |v| v.min(hi).exp())
    }

    pub fn sigmoid(self) -> Result<Self> {
        self.unary(Op::Sigmoid(self.id), stable_sigmoid)
    }

    pub fn relu(self) -> Result<Self> {
        self.unary(Op::Relu(self.id), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn abs(self) -> Result<Self> {
        self.unary(Op::Abs(self.id), |v| v.abs())
    }

    pub fn square(self) -> Result<Self> {
        self.unary(Op::Square(self.id), |v| v * v)
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward_binary<T: Real>(
    op: &Op<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    out: &Tensor<T>,
    g: &[T],
    ia_id: usize,
    ib_id: usize,
    sink: &mut GradSink<'_, T>,
) {
    let bc = Broadcast::new("backward", a.shape(), b.shape()).expect("shapes validated in forward");
    debug_assert_eq!(bc.out, out.shape());
    let want_a = sink.wants(ia_id);
    let want_b = sink.wants(ib_id);
    let mut ga = if want_a { vec![T::zero(); a.numel()] } else { Vec::new() };
    let mut gb = if want_b { vec![T::zero(); b.numel()] } else { Vec::new() };
    let (ad, bd) = (a.data(), b.data());
    match op {
        Op::Add(..) => bc.for_each(|o, i, j| {
            if want_a {
                ga[i] += g[o];
            }
            if want_b {
                gb[j] += g[o];
            }
        }),
        Op::Sub(..) => bc.for_each(|o, i, j| {
            if want_a {
                ga[i] += g[o];
            }
            if want_b {
                gb[j] -= g[o];
            }
        }),
        Op::Mul(..) => bc.for_each(|o, i, j| {
            if want_a {
                ga[i] += g[o] * bd[j];
            }
            if want_b {
                gb[j] += g[o] * ad[i];
            }
        }),
        Op::Div(..) => bc.for_each(|o, i, j| {
            let (den, clamped) = clamp_divisor(bd[j]);
            if want_a {
                ga[i] += g[o] / den;
            }
            if want_b && !clamped {
                gb[j] -= g[o] * ad[i] / (den * den);
            }
        }),
        _ => unreachable!(),
    }
    if want_a {
        sink.add_owned(ia_id, ga);
    }
    if want_b {
        sink.add_owned(ib_id, gb);
    }
}

pub(super) fn backward_unary<T: Real>(
    op: &Op<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    g: &[T],
    input: usize,
    sink: &mut GradSink<'_, T>,
) {
    let Some(slot) = sink.slot(input) else { return };
    let (xd, yd) = (x.data(), y.data());
    let zero = T::zero();
    macro_rules! each {
        (|$i:ident| $e:expr) => {
            for $i in 0..g.len() {
                slot[$i] += $e;
            }
        };
    }
    match op {
        Op::AddScalar(_) => each!(|i| g[i]),
        Op::MulScalar(_, c) => each!(|i| g[i] * *c),
        Op::ClampMin(_, floor) => each!(|i| if xd[i] >= *floor { g[i] } else { zero }),
        Op::Log(_) => {
            let eps = T::lit(T::CLAMP_EPS);
            each!(|i| if xd[i] > eps { g[i] / xd[i] } else { zero })
        }
        Op::Exp(_) => {
            let hi = exp_ceiling::<T>();
            each!(|i| if xd[i] < hi { g[i] * yd[i] } else { zero })
        }
        Op::Sigmoid(_) => each!(|i| g[i] * yd[i] * (T::one() - yd[i])),
        Op::Relu(_) => each!(|i| if xd[i] > zero { g[i] } else { zero }),
        Op::Abs(_) => each!(|i| if xd[i] > zero {
            g[i]
        } else if xd[i] < zero {
            -g[i]
        } else {
            zero
        }),
        Op::Square(_) => each!(|i| g[i] * (xd[i] + xd[i])),
        _ => unreachable!(),
    }
}

//! Attention over the six-camera ring.
//!
//! Tokens of a batch of `N` scenes are kept in one `[6N, T, C]` var, scene
//! major (`scene * 6 + view`). Two mechanisms mix information across views:
//!
//! * [`cross_view_self_attention`] joins the tokens of all six views of a
//!   scene into one `6T` sequence and runs self attention over it.
//! * [`adjacent_view_cross_attention`] lets each view query only the `2T`
//!   tokens of its two ring neighbours.
//!
//! Projections act on row vectors: `Q = F W_Q` with `F: [.., T, C]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Tape, Tensor, Var};

pub const VIEW_COUNT: usize = 6;

/// `(previous, next)` view on the ring.
pub fn ring_neighbors(view: usize) -> Result<(usize, usize)> {
    if view >= VIEW_COUNT {
        return Err(Error::invalid(format!("view index {view} outside 0..{VIEW_COUNT}")));
    }
    Ok(((view + VIEW_COUNT - 1) % VIEW_COUNT, (view + 1) % VIEW_COUNT))
}

/// Which multi-view mechanism the decoder inserts before fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    None,
    #[serde(rename = "self")]
    SelfAttention,
    Adjacent,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 3] = [AttentionMode::None, AttentionMode::SelfAttention, AttentionMode::Adjacent];

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::None => "none",
            AttentionMode::SelfAttention => "self",
            AttentionMode::Adjacent => "adjacent",
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "self" => Ok(Self::SelfAttention),
            "adjacent" => Ok(Self::Adjacent),
            other => Err(Error::invalid(format!("unknown attention mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Owned projection weights for one multi-view attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub heads: usize,
    /// Add the attended term to the input (`F + Attn`) instead of replacing it.
    pub residual: bool,
}

impl<T: Real> AttentionParams<T> {
    pub fn identity(channels: usize, heads: usize, residual: bool) -> Self {
        let eye = Tensor::from_fn([channels, channels], |i| if i / channels == i % channels { T::one() } else { T::zero() });
        Self { w_q: eye.clone(), w_k: eye.clone(), w_v: eye, heads, residual }
    }

    /// Registers the weights on `tape` as differentiable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Result<AttentionWeights<'t, T>> {
        Ok(AttentionWeights {
            w_q: tape.leaf(self.w_q.clone())?,
            w_k: tape.leaf(self.w_k.clone())?,
            w_v: tape.leaf(self.w_v.clone())?,
            heads: self.heads,
            residual: self.residual,
        })
    }
}

/// Projection weights already recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'t, T: Real> {
    pub w_q: Var<'t, T>,
    pub w_k: Var<'t, T>,
    pub w_v: Var<'t, T>,
    pub heads: usize,
    pub residual: bool,
}

/// Tokens of a single view: `[N, T, C]`.
#[derive(Clone, Copy, Debug)]
pub struct ViewTokens<'t, T: Real> {
    pub view_index: usize,
    pub tokens: Var<'t, T>,
}

/// Tokens of all six views, `[6N, T, C]` scene major.
#[derive(Clone, Copy, Debug)]
pub struct RingTokens<'t, T: Real> {
    tokens: Var<'t, T>,
    scenes: usize,
}

fn dims3(v: &Var<'_, impl Real>) -> Result<[usize; 3]> {
    match v.shape()[..] {
        [a, b, c] => Ok([a, b, c]),
        ref s => Err(Error::invalid(format!("expected [N, T, C] tokens, got {s:?}"))),
    }
}

impl<'t, T: Real> RingTokens<'t, T> {
    pub fn new(tokens: Var<'t, T>) -> Result<Self> {
        let [b, _, _] = dims3(&tokens)?;
        if b == 0 || b % VIEW_COUNT != 0 {
            return Err(Error::invalid(format!("batch of {b} is not a whole number of six-view scenes")));
        }
        Ok(Self { tokens, scenes: b / VIEW_COUNT })
    }

    /// Stacks six per-view token sets given in ring order.
    pub fn from_views(views: &[ViewTokens<'t, T>]) -> Result<Self> {
        if views.len() != VIEW_COUNT {
            return Err(Error::invalid(format!("expected {VIEW_COUNT} views, got {}", views.len())));
        }
        let reference = dims3(&views[0].tokens)?;
        let mut parts = Vec::with_capacity(VIEW_COUNT);
        for (i, v) in views.iter().enumerate() {
            if v.view_index != i {
                return Err(Error::invalid(format!("view {i} carries index {}", v.view_index)));
            }
            let d = dims3(&v.tokens)?;
            if d != reference {
                return Err(Error::shape("multi-view tokens", &reference, &d));
            }
            let [n, t, c] = d;
            parts.push(v.tokens.reshape(&[n, 1, t, c])?);
        }
        let [n, t, c] = reference;
        let stacked = Var::concat(&parts, 1)?.reshape(&[n * VIEW_COUNT, t, c])?;
        Ok(Self { tokens: stacked, scenes: n })
    }

    pub fn tokens(&self) -> Var<'t, T> {
        self.tokens
    }

    pub fn scenes(&self) -> usize {
        self.scenes
    }

    pub fn view(&self, index: usize) -> Result<ViewTokens<'t, T>> {
        ring_neighbors(index)?;
        let [_, t, c] = dims3(&self.tokens)?;
        let per_scene = self.tokens.reshape(&[self.scenes, VIEW_COUNT, t, c])?;
        let tokens = per_scene.narrow(1, index, 1)?.reshape(&[self.scenes, t, c])?;
        Ok(ViewTokens { view_index: index, tokens })
    }

    pub fn views(&self) -> Result<Vec<ViewTokens<'t, T>>> {
        (0..VIEW_COUNT).map(|i| self.view(i)).collect()
    }
}

/// Result of one multi-view attention call.
#[derive(Clone, Debug)]
pub struct AttentionOutput<'t, T: Real> {
    pub tokens: RingTokens<'t, T>,
    /// Shape of the score buffer `[batch, heads, queries, keys]`.
    pub scores_shape: Vec<usize>,
}

impl<T: Real> AttentionOutput<'_, T> {
    pub fn score_elements(&self) -> usize {
        self.scores_shape.iter().product()
    }
}

fn split_heads<'t, T: Real>(x: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let [b, t, c] = dims3(&x)?;
    x.reshape(&[b, t, heads, c / heads])?.permute(&[0, 2, 1, 3])
}

/// Multi-head scaled dot-product attention without output projection.
///
/// `queries: [B, Tq, C]`, `context: [B, Tk, C]` → `([B, Tq, C], score shape)`.
/// Scores are scaled by `1/sqrt(C / heads)`.
pub fn scaled_dot_product<'t, T: Real>(
    queries: Var<'t, T>,
    context: Var<'t, T>,
    w_q: Var<'t, T>,
    w_k: Var<'t, T>,
    w_v: Var<'t, T>,
    heads: usize,
) -> Result<(Var<'t, T>, Vec<usize>)> {
    let [b, tq, c] = dims3(&queries)?;
    let [bk, _, ck] = dims3(&context)?;
    if b != bk || c != ck {
        return Err(Error::shape("attention", &queries.shape(), &context.shape()));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid(format!("{heads} heads do not divide {c} channels")));
    }
    let q = split_heads(queries.matmul(w_q)?, heads)?;
    let k = split_heads(context.matmul(w_k)?, heads)?;
    let v = split_heads(context.matmul(w_v)?, heads)?;
    let scale = T::one() / T::from_usize(c / heads).unwrap().sqrt();
    let scores = q.matmul(k.transpose(2, 3)?)?.mul_scalar(scale)?;
    let scores_shape = scores.shape();
    let attended = scores.softmax(3)?.matmul(v)?;
    let merged = attended.permute(&[0, 2, 1, 3])?.reshape(&[b, tq, c])?;
    Ok((merged, scores_shape))
}

fn finish<'t, T: Real>(input: Var<'t, T>, attended: Var<'t, T>, residual: bool) -> Result<Var<'t, T>> {
    if residual {
        input.add(attended)
    } else {
        Ok(attended)
    }
}

/// Joint self attention over the concatenated tokens of all six views.
pub fn cross_view_self_attention<'t, T: Real>(
    views: &RingTokens<'t, T>,
    w: &AttentionWeights<'t, T>,
) -> Result<AttentionOutput<'t, T>> {
    let [b, t, c] = dims3(&views.tokens)?;
    let n = views.scenes;
    let joint = views.tokens.reshape(&[n, VIEW_COUNT * t, c])?;
    let (attended, scores_shape) = scaled_dot_product(joint, joint, w.w_q, w.w_k, w.w_v, w.heads)?;
    let out = finish(views.tokens, attended.reshape(&[b, t, c])?, w.residual)?;
    Ok(AttentionOutput { tokens: RingTokens { tokens: out, scenes: n }, scores_shape })
}

/// Each view attends to the joint `2T` tokens of its two ring neighbours.
pub fn adjacent_view_cross_attention<'t, T: Real>(
    views: &RingTokens<'t, T>,
    w: &AttentionWeights<'t, T>,
) -> Result<AttentionOutput<'t, T>> {
    let n = views.scenes;
    let mut prev = Vec::with_capacity(n * VIEW_COUNT);
    let mut next = Vec::with_capacity(n * VIEW_COUNT);
    for s in 0..n {
        for v in 0..VIEW_COUNT {
            let (p, q) = ring_neighbors(v)?;
            prev.push(s * VIEW_COUNT + p);
            next.push(s * VIEW_COUNT + q);
        }
    }
    let context = Var::concat(
        &[views.tokens.index_select(0, &prev)?, views.tokens.index_select(0, &next)?],
        1,
    )?;
    let (attended, scores_shape) = scaled_dot_product(views.tokens, context, w.w_q, w.w_k, w.w_v, w.heads)?;
    let out = finish(views.tokens, attended, w.residual)?;
    Ok(AttentionOutput { tokens: RingTokens { tokens: out, scenes: n }, scores_shape })
}

/// Dispatches on `mode`; [`AttentionMode::None`] passes tokens through.
pub fn apply<'t, T: Real>(
    mode: AttentionMode,
    views: &RingTokens<'t, T>,
    w: &AttentionWeights<'t, T>,
) -> Result<RingTokens<'t, T>> {
    Ok(match mode {
        AttentionMode::None => *views,
        AttentionMode::SelfAttention => cross_view_self_attention(views, w)?.tokens,
        AttentionMode::Adjacent => adjacent_view_cross_attention(views, w)?.tokens,
    })
}

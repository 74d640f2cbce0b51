//! The surround-view depth network.
//!
//! A patch-transformer encoder processes every view independently and
//! exposes the token sets of its last four blocks. The decoder reassembles
//! each tap into a spatial map, runs multi-view attention on the two
//! attention stages, resamples by the stage scale and fuses the maps
//! coarse-to-fine with residual conv units. A two-conv sigmoid head maps the
//! fused features to metric depth in `[d_min, d_max]`.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, ManifestEntry, CHECKPOINT_VERSION};
pub use config::{DecoderConfig, DepthRange, EncoderConfig, ModelConfig, StageSpec};
pub use params::{Bound, ParamEntry, ParamGroup, ParamId, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{self, AttentionMode, AttentionWeights, RingTokens, VIEW_COUNT};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Tape, Tensor, Var};
use params::trunc_normal;

const PROJ_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Debug)]
struct ConvIds {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct StageIds {
    reassemble: ConvIds,
    attention: Option<[ParamId; 3]>,
    fuse: ConvIds,
}

#[derive(Clone, Debug)]
struct Layout {
    embed_w: ParamId,
    embed_b: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    stages: Vec<StageIds>,
    head1: ConvIds,
    head2: ConvIds,
}

/// Network weights plus architecture.
#[derive(Clone, Debug)]
pub struct DinoSd<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

fn he_normal<T: Real>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).unwrap();
    Tensor::from_fn(shape.to_vec(), |_| T::lit(normal.sample(rng)))
}

impl<T: Real> DinoSd<T> {
    /// Randomly initialised network.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let e = &config.encoder;
        let d = &config.decoder;
        let (c, hidden) = (e.channels, e.channels * e.mlp_ratio);
        use ParamGroup::{Decoder, Encoder};

        let embed_w = p.insert("encoder.embed.weight", Encoder, "encoder.embed", trunc_normal(&[e.patch_dim(), c], PROJ_STD, &mut rng));
        let embed_b = p.insert("encoder.embed.bias", Encoder, "encoder.embed", Tensor::zeros([c]));
        let pos = p.insert("encoder.pos", Encoder, "encoder.embed", trunc_normal(&[e.tokens(), c], PROJ_STD, &mut rng));
        let mut blocks = Vec::with_capacity(e.blocks);
        for b in 0..e.blocks {
            let stage = format!("encoder.block{b}");
            let mut w = |name: &str, t: Tensor<T>| p.insert(&format!("{stage}.{name}"), Encoder, &stage, t);
            blocks.push(BlockIds {
                ln1_g: w("ln1.gain", Tensor::ones([c])),
                ln1_b: w("ln1.bias", Tensor::zeros([c])),
                wq: w("attn.q", trunc_normal(&[c, c], PROJ_STD, &mut rng)),
                wk: w("attn.k", trunc_normal(&[c, c], PROJ_STD, &mut rng)),
                wv: w("attn.v", trunc_normal(&[c, c], PROJ_STD, &mut rng)),
                wo: w("attn.out.weight", trunc_normal(&[c, c], PROJ_STD, &mut rng)),
                bo: w("attn.out.bias", Tensor::zeros([c])),
                ln2_g: w("ln2.gain", Tensor::ones([c])),
                ln2_b: w("ln2.bias", Tensor::zeros([c])),
                fc1_w: w("mlp.fc1.weight", trunc_normal(&[c, hidden], PROJ_STD, &mut rng)),
                fc1_b: w("mlp.fc1.bias", Tensor::zeros([hidden])),
                fc2_w: w("mlp.fc2.weight", trunc_normal(&[hidden, c], PROJ_STD, &mut rng)),
                fc2_b: w("mlp.fc2.bias", Tensor::zeros([c])),
            });
        }

        let cf = d.fusion_channels;
        let mut stages = Vec::with_capacity(d.stages.len());
        for (i, spec) in d.stages.iter().enumerate() {
            let stage = format!("decoder.stage{i}");
            let mut w = |name: &str, t: Tensor<T>| p.insert(&format!("{stage}.{name}"), Decoder, &stage, t);
            let reassemble = ConvIds {
                weight: w("reassemble.weight", he_normal(&[cf, c, 3, 3], c * 9, 1.0, &mut rng)),
                bias: w("reassemble.bias", Tensor::zeros([cf, 1, 1])),
            };
            let attention = spec.multiview.then(|| {
                [
                    w("mv_attn.q", trunc_normal(&[c, c], PROJ_STD, &mut rng)),
                    w("mv_attn.k", trunc_normal(&[c, c], PROJ_STD, &mut rng)),
                    w("mv_attn.v", trunc_normal(&[c, c], PROJ_STD, &mut rng)),
                ]
            });
            // residual conv units start close to the identity map
            let fuse = ConvIds {
                weight: w("fuse.weight", he_normal(&[cf, cf, 3, 3], cf * 9, 0.1, &mut rng)),
                bias: w("fuse.bias", Tensor::zeros([cf, 1, 1])),
            };
            stages.push(StageIds { reassemble, attention, fuse });
        }

        let hc = d.head_channels;
        let r = &config.range;
        let frac = (config.init_depth - r.d_min) / r.span();
        let logit = (frac / (1.0 - frac)).ln();
        let mut w = |name: &str, t: Tensor<T>| p.insert(name, Decoder, "head", t);
        let head1 = ConvIds {
            weight: w("head.conv1.weight", he_normal(&[hc, cf, 3, 3], cf * 9, 1.0, &mut rng)),
            bias: w("head.conv1.bias", Tensor::zeros([hc, 1, 1])),
        };
        let head2 = ConvIds {
            weight: w("head.conv2.weight", he_normal(&[1, hc, 3, 3], hc * 9, 0.1, &mut rng)),
            bias: w("head.conv2.bias", Tensor::full([1, 1, 1], T::lit(logit))),
        };

        let layout = Layout { embed_w, embed_b, pos, blocks, stages, head1, head2 };
        Ok(Self { config, params: p, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Parameters making up the residual branches of encoder block `index`.
    pub fn block_output_params(&self, index: usize) -> Vec<ParamId> {
        let b = &self.layout.blocks[index];
        vec![b.wo, b.bo, b.fc2_w, b.fc2_b]
    }

    /// Per-view encoder: `[6N, 3, H, W]` images to the token sets
    /// `[6N, T, C]` after each of the last four blocks (oldest first).
    pub fn encode<'t>(&self, p: &Bound<'t, T>, images: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let e = &self.config.encoder;
        let shape = images.shape();
        let [b, ch, h, w] = shape[..] else {
            return Err(Error::invalid(format!("encoder expects [B, 3, H, W], got {shape:?}")));
        };
        if ch != 3 || h % e.patch_size != 0 || w % e.patch_size != 0 {
            return Err(Error::invalid(format!(
                "images {shape:?} do not split into 3-channel {n}x{n} patches",
                n = e.patch_size
            )));
        }
        if (h, w) != (e.image_height, e.image_width) {
            return Err(Error::shape("encoder input", &[e.image_height, e.image_width], &[h, w]));
        }
        let n = e.patch_size;
        let (gh, gw) = (h / n, w / n);
        let patches = images
            .reshape(&[b, 3, gh, n, gw, n])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[b, gh * gw, 3 * n * n])?;
        let l = &self.layout;
        let mut x = patches.matmul(p[l.embed_w])?.add(p[l.embed_b])?.add(p[l.pos])?;
        let eps = T::lit(LN_EPS);
        let mut taps = Vec::with_capacity(4);
        for (i, blk) in l.blocks.iter().enumerate() {
            let y = x.layer_norm(eps)?.mul(p[blk.ln1_g])?.add(p[blk.ln1_b])?;
            let (att, _) = attention::scaled_dot_product(y, y, p[blk.wq], p[blk.wk], p[blk.wv], e.heads)?;
            x = x.add(att.matmul(p[blk.wo])?.add(p[blk.bo])?)?;
            let y = x.layer_norm(eps)?.mul(p[blk.ln2_g])?.add(p[blk.ln2_b])?;
            let hidden = y.matmul(p[blk.fc1_w])?.add(p[blk.fc1_b])?.relu()?;
            x = x.add(hidden.matmul(p[blk.fc2_w])?.add(p[blk.fc2_b])?)?;
            if i + 4 >= l.blocks.len() {
                taps.push(x);
            }
        }
        Ok(taps)
    }

    /// Fuses the four encoder taps (oldest first) into `[6N, Cf, h', w']`.
    pub fn decode<'t>(&self, p: &Bound<'t, T>, taps: &[Var<'t, T>], mode: AttentionMode) -> Result<Var<'t, T>> {
        if taps.len() != 4 {
            return Err(Error::invalid(format!("decoder expects 4 taps, got {}", taps.len())));
        }
        let e = &self.config.encoder;
        let d = &self.config.decoder;
        let (gh, gw) = e.token_grid();
        let mut fused: Option<Var<'t, T>> = None;
        for (spec, ids) in d.stages.iter().zip(&self.layout.stages) {
            let tokens = taps[4 - spec.tap_from_end];
            let shape = tokens.shape();
            let [b, t, c] = shape[..] else {
                return Err(Error::invalid(format!("tap tokens must be [B, T, C], got {shape:?}")));
            };
            if t != gh * gw || c != e.channels {
                return Err(Error::shape("decoder tap", &[gh * gw, e.channels], &[t, c]));
            }
            let tokens = match (ids.attention, mode) {
                (Some([q, k, v]), m) if m != AttentionMode::None => {
                    let ring = RingTokens::new(tokens)?;
                    let w = AttentionWeights {
                        w_q: p[q],
                        w_k: p[k],
                        w_v: p[v],
                        heads: d.attention_heads,
                        residual: d.residual_attention,
                    };
                    attention::apply(m, &ring, &w)?.tokens()
                }
                _ => tokens,
            };
            let map = tokens.permute(&[0, 2, 1])?.reshape(&[b, c, gh, gw])?;
            let map = map
                .conv2d(p[ids.reassemble.weight])?
                .add(p[ids.reassemble.bias])?
                .resample_bilinear(spec.scale)?;
            let x = match fused {
                None => map,
                Some(prev) => {
                    let s = map.shape();
                    prev.resample_to(s[2], s[3])?.add(map)?
                }
            };
            // residual conv unit
            let branch = x.relu()?.conv2d(p[ids.fuse.weight])?.add(p[ids.fuse.bias])?;
            fused = Some(x.add(branch)?);
        }
        Ok(fused.expect("four stages"))
    }

    /// conv → relu → conv → sigmoid → affine depth, resized to `H x W`.
    pub fn depth_head<'t>(&self, p: &Bound<'t, T>, features: Var<'t, T>) -> Result<Var<'t, T>> {
        let l = &self.layout;
        let r = &self.config.range;
        let e = &self.config.encoder;
        let s = features
            .conv2d(p[l.head1.weight])?
            .add(p[l.head1.bias])?
            .relu()?
            .conv2d(p[l.head2.weight])?
            .add(p[l.head2.bias])?
            .sigmoid()?;
        s.mul_scalar(T::lit(r.span()))?
            .add_scalar(T::lit(r.d_min))?
            .resample_to(e.image_height, e.image_width)
    }

    /// Images `[6N, 3, H, W]` to depth `[6N, 1, H, W]`.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, images: Var<'t, T>, mode: AttentionMode) -> Result<Var<'t, T>> {
        let b = images.shape()[0];
        if b == 0 || b % VIEW_COUNT != 0 {
            return Err(Error::invalid(format!("batch of {b} images is not a set of six-view scenes")));
        }
        let taps = self.encode(p, images)?;
        let fused = self.decode(p, &taps, mode)?;
        self.depth_head(p, fused)
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, images: &Tensor<T>, mode: AttentionMode) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape)?;
        let x = tape.constant(images.clone())?;
        let depth = self.forward(&p, x, mode)?;
        let out = depth.value().clone();
        Ok(out)
    }
}

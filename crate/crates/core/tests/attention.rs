use dino_sd::attention::{
    adjacent_view_cross_attention, cross_view_self_attention, ring_neighbors, AttentionParams, RingTokens, ViewTokens,
    VIEW_COUNT,
};
use dino_sd::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn params(c: usize, heads: usize, residual: bool, seed: u64) -> AttentionParams<f64> {
    AttentionParams { w_q: random(&[c, c], seed), w_k: random(&[c, c], seed + 1), w_v: random(&[c, c], seed + 2), heads, residual }
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    SelfJoint,
    Adjacent,
}

/// Runs one mechanism on `[6N, T, C]` tokens and returns the output values
/// plus the score buffer shape.
fn run(kind: Kind, tokens: &Tensor<f64>, p: &AttentionParams<f64>) -> (Tensor<f64>, Vec<usize>) {
    let tape = Tape::new();
    let ring = RingTokens::new(tape.constant(tokens.clone()).unwrap()).unwrap();
    let w = p.bind(&tape).unwrap();
    let out = match kind {
        Kind::SelfJoint => cross_view_self_attention(&ring, &w).unwrap(),
        Kind::Adjacent => adjacent_view_cross_attention(&ring, &w).unwrap(),
    };
    let v = out.tokens.tokens().value().clone();
    (v, out.scores_shape)
}

/// Rows of view `v` (scene 0) as a flat slice.
fn view(t: &Tensor<f64>, v: usize) -> &[f64] {
    let per = t.numel() / t.shape()[0];
    &t.data()[v * per..(v + 1) * per]
}

/// Reorders the views of a one-scene tensor: output view `i` is input view `perm[i]`.
fn permute_views(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let data = perm.iter().flat_map(|&p| view(t, p).to_vec()).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Scalar single-head attention of `query` over `keys`, C = 2, row-vector
/// projections.
fn hand_attention(query: [f64; 2], keys: &[[f64; 2]], wq: [[f64; 2]; 2], wk: [[f64; 2]; 2], wv: [[f64; 2]; 2]) -> [f64; 2] {
    let proj = |f: [f64; 2], w: [[f64; 2]; 2]| [f[0] * w[0][0] + f[1] * w[1][0], f[0] * w[0][1] + f[1] * w[1][1]];
    let q = proj(query, wq);
    let scores: Vec<f64> = keys
        .iter()
        .map(|&f| {
            let k = proj(f, wk);
            (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt()
        })
        .collect();
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut out = [0.0; 2];
    for (w, &f) in e.iter().zip(keys) {
        let v = proj(f, wv);
        out[0] += w / z * v[0];
        out[1] += w / z * v[1];
    }
    out
}

const WQ: [[f64; 2]; 2] = [[1.0, 0.5], [0.0, 2.0]];
const WK: [[f64; 2]; 2] = [[1.5, 0.0], [-0.5, 1.0]];
const WV: [[f64; 2]; 2] = [[0.0, 1.0], [1.0, 0.3]];
const VIEWS: [[f64; 2]; 6] = [[0.3, -0.2], [1.0, 0.4], [-0.7, 0.9], [0.2, 0.2], [-1.1, -0.3], [0.6, -0.8]];

fn hand_fixture(residual: bool) -> (Tensor<f64>, AttentionParams<f64>) {
    let tokens = Tensor::new([6, 1, 2], VIEWS.iter().flatten().copied().collect()).unwrap();
    let m = |w: [[f64; 2]; 2]| Tensor::new([2, 2], w.iter().flatten().copied().collect()).unwrap();
    (tokens, AttentionParams { w_q: m(WQ), w_k: m(WK), w_v: m(WV), heads: 1, residual })
}

#[test]
fn self_attention_matches_hand_computation() {
    let (tokens, p) = hand_fixture(false);
    let (out, _) = run(Kind::SelfJoint, &tokens, &p);
    for v in 0..6 {
        let expect = hand_attention(VIEWS[v], &VIEWS, WQ, WK, WV);
        assert!(close(view(&out, v), &expect, 1e-12), "view {v}");
    }
}

#[test]
fn adjacent_attention_matches_hand_computation() {
    for residual in [false, true] {
        let (tokens, p) = hand_fixture(residual);
        let (out, _) = run(Kind::Adjacent, &tokens, &p);
        for v in 0..6 {
            let (a, b) = ring_neighbors(v).unwrap();
            let mut expect = hand_attention(VIEWS[v], &[VIEWS[a], VIEWS[b]], WQ, WK, WV);
            if residual {
                expect[0] += VIEWS[v][0];
                expect[1] += VIEWS[v][1];
            }
            assert!(close(view(&out, v), &expect, 1e-12), "view {v}");
        }
        // view 0 sees exactly views 5 and 1
        let expect = hand_attention(VIEWS[0], &[VIEWS[5], VIEWS[1]], WQ, WK, WV);
        if !residual {
            assert!(close(view(&out, 0), &expect, 1e-12));
        }
    }
}

#[test]
fn identical_tokens_are_a_fixed_point() {
    let token = [0.4, -1.3, 0.8, 0.1];
    let tokens = Tensor::from_fn([6, 1, 4], |i| token[i % 4]);
    let eye = AttentionParams::<f64>::identity(4, 1, false);
    let (out, _) = run(Kind::SelfJoint, &tokens, &eye);
    assert!(close(out.data(), tokens.data(), 1e-15));
    let (out, _) = run(Kind::Adjacent, &tokens, &eye);
    assert!(close(out.data(), tokens.data(), 1e-15));
    // residual form: input plus the common token
    let eye = AttentionParams::<f64>::identity(4, 2, true);
    let (out, _) = run(Kind::Adjacent, &tokens, &eye);
    let doubled: Vec<f64> = tokens.data().iter().map(|v| 2.0 * v).collect();
    assert!(close(out.data(), &doubled, 1e-15));
}

#[test]
fn self_attention_is_equivariant_to_view_permutations() {
    let tokens = random(&[6, 2, 4], 11);
    let p = params(4, 2, true, 20);
    let (out, _) = run(Kind::SelfJoint, &tokens, &p);
    for perm in [[3, 0, 5, 1, 4, 2], [5, 4, 3, 2, 1, 0], [1, 0, 2, 3, 4, 5]] {
        let (permuted, _) = run(Kind::SelfJoint, &permute_views(&tokens, &perm), &p);
        assert!(close(permuted.data(), permute_views(&out, &perm).data(), 1e-12));
    }
}

#[test]
fn both_mechanisms_commute_with_ring_rotation() {
    let tokens = random(&[6, 3, 4], 12);
    for kind in [Kind::SelfJoint, Kind::Adjacent] {
        let p = params(4, 2, true, 30);
        let (out, _) = run(kind, &tokens, &p);
        for k in 1..6 {
            let rot: Vec<usize> = (0..6).map(|i| (i + k) % 6).collect();
            let (rotated, _) = run(kind, &permute_views(&tokens, &rot), &p);
            assert!(close(rotated.data(), permute_views(&out, &rot).data(), 1e-12), "shift {k}");
        }
    }
}

#[test]
fn adjacent_attention_is_not_permutation_equivariant() {
    // swapping two views changes who is whose neighbour
    let tokens = random(&[6, 2, 4], 13);
    let p = params(4, 2, true, 40);
    let perm = [0, 2, 1, 3, 4, 5];
    let (out, _) = run(Kind::Adjacent, &tokens, &p);
    let (permuted, _) = run(Kind::Adjacent, &permute_views(&tokens, &perm), &p);
    assert!(!close(permuted.data(), permute_views(&out, &perm).data(), 1e-9));
}

#[test]
fn score_buffers_have_the_expected_sizes() {
    for (n, t, heads) in [(1, 2, 1), (1, 4, 2), (2, 3, 2)] {
        let tokens = random(&[6 * n, t, 4], 14);
        let p = params(4, heads, true, 50);
        let (_, s) = run(Kind::SelfJoint, &tokens, &p);
        assert_eq!(s.iter().product::<usize>(), n * heads * (6 * t) * (6 * t));
        assert_eq!(s, vec![n, heads, 6 * t, 6 * t]);
        let (_, s) = run(Kind::Adjacent, &tokens, &p);
        assert_eq!(s.iter().product::<usize>(), n * heads * 6 * t * 2 * t);
        assert_eq!(s, vec![6 * n, heads, t, 2 * t]);
    }
}

#[test]
fn far_views_leave_adjacent_output_bit_identical() {
    let scenes = 2;
    let tokens = random(&[6 * scenes, 3, 4], 15);
    let p = params(4, 2, true, 60);
    let (base, _) = run(Kind::Adjacent, &tokens, &p);
    let (base_self, _) = run(Kind::SelfJoint, &tokens, &p);
    let per = 3 * 4;
    for target in 0..VIEW_COUNT {
        for offset in [2, 3, 4] {
            let far = (target + offset) % VIEW_COUNT;
            let mut changed = tokens.clone();
            for s in 0..scenes {
                let row = (s * VIEW_COUNT + far) * per;
                for v in &mut changed.data_mut()[row..row + per] {
                    *v = 10.0 * *v + 3.0;
                }
            }
            let (out, _) = run(Kind::Adjacent, &changed, &p);
            let (out_self, _) = run(Kind::SelfJoint, &changed, &p);
            for s in 0..scenes {
                let row = (s * VIEW_COUNT + target) * per;
                assert_eq!(&out.data()[row..row + per], &base.data()[row..row + per], "view {target} far {far}");
                assert_ne!(&out_self.data()[row..row + per], &base_self.data()[row..row + per]);
            }
        }
        // a neighbour does matter
        let near = (target + 1) % VIEW_COUNT;
        let mut changed = tokens.clone();
        for v in &mut changed.data_mut()[near * per..(near + 1) * per] {
            *v += 1.0;
        }
        let (out, _) = run(Kind::Adjacent, &changed, &p);
        assert_ne!(&out.data()[target * per..(target + 1) * per], &base.data()[target * per..(target + 1) * per]);
    }
}

#[test]
fn scenes_do_not_interact() {
    let a = random(&[6, 2, 4], 16);
    let b = random(&[6, 2, 4], 17);
    let both = Tensor::new([12, 2, 4], a.data().iter().chain(b.data()).copied().collect()).unwrap();
    let p = params(4, 2, true, 70);
    for kind in [Kind::SelfJoint, Kind::Adjacent] {
        let (joint, _) = run(kind, &both, &p);
        let (ra, _) = run(kind, &a, &p);
        let (rb, _) = run(kind, &b, &p);
        assert!(close(&joint.data()[..a.numel()], ra.data(), 1e-14));
        assert!(close(&joint.data()[a.numel()..], rb.data(), 1e-14));
    }
}

#[test]
fn ring_from_views_round_trips() {
    let tokens = random(&[12, 2, 4], 18);
    let tape = Tape::new();
    let ring = RingTokens::new(tape.constant(tokens.clone()).unwrap()).unwrap();
    let views: Vec<ViewTokens<'_, f64>> = ring.views().unwrap();
    assert_eq!(views[2].tokens.shape(), vec![2, 2, 4]);
    let again = RingTokens::from_views(&views).unwrap();
    assert_eq!(*again.tokens().value(), tokens);
    assert!(RingTokens::new(tape.constant(Tensor::<f64>::ones([5, 2, 4])).unwrap()).is_err());
}

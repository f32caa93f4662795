use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vt_core::block::{vt_block_forward, VtBlockConfig, VtBlockWeights};
use vt_core::projector::{project_tokens, ProjectorWeights};
use vt_core::tensor::Tape;
use vt_core::tokenizer::{
    centroid_tokenize, cluster_tokenize, filter_tokenize, kmeans_centroids, recurrent_tokenize, TokenizerKind,
};
use vt_core::transformer::{token_ffn, token_self_attention, transformer_forward, TransformerWeights};
use vt_core::Tensor;
use vt_oracles::vt_scalar::{self, BlockWeights};
use vt_oracles::Mat;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0) * scale)
}

/// Sample `b` of an `[N, C, H, W]` map as an `HW x C` matrix.
fn pixel_mat(x: &Tensor<f64>, b: usize) -> Mat {
    let [_, c, h, w] = *x.shape() else { panic!() };
    (0..h * w).map(|p| (0..c).map(|ch| x.data()[(b * c + ch) * h * w + p]).collect()).collect()
}

/// Rank-2 tensor, or sample `b` of a rank-3 tensor, as rows.
fn rows_of(t: &Tensor<f64>, b: usize) -> Mat {
    let s = t.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let off = if s.len() == 3 { b * r * c } else { 0 };
    (0..r).map(|i| t.data()[off + i * c..off + (i + 1) * c].to_vec()).collect()
}

fn assert_close(got: &Mat, want: &Mat, tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: rows");
    for (gr, wr) in got.iter().zip(want) {
        for (g, w) in gr.iter().zip(wr) {
            assert!((g - w).abs() <= tol * w.abs().max(1.0), "{what}: {g} vs {w}");
        }
    }
}

/// 1x1 conv weight `[O, C, 1, 1]` as a `C x O` row map.
fn pointwise_as_mat(w: &Tensor<f64>) -> Mat {
    let (o, c) = (w.shape()[0], w.shape()[1]);
    (0..c).map(|ci| (0..o).map(|oi| w.data()[oi * c + ci]).collect()).collect()
}

#[test]
fn tokenizers_match_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tape = Tape::<f64>::new();
    let x = rand_tensor(&mut rng, &[2, 5, 3, 4], 2.0);
    let w_a = rand_tensor(&mut rng, &[5, 6], 1.0);
    let t_in = rand_tensor(&mut rng, &[2, 6, 7], 1.0);
    let w_t2r = rand_tensor(&mut rng, &[7, 5], 1.0);
    let xv = tape.constant(x.clone());
    let f = filter_tokenize(&xv, &tape.constant(w_a.clone())).unwrap();
    let r = recurrent_tokenize(&xv, &tape.constant(t_in.clone()), &tape.constant(w_t2r.clone())).unwrap();
    for b in 0..2 {
        let xm = pixel_mat(&x, b);
        let (t, a) = vt_scalar::filter_tokenize(&xm, &rows_of(&w_a, 0));
        assert_close(&rows_of(f.tokens.value(), b), &t, 1e-12, "filter tokens");
        assert_close(&rows_of(f.attention.as_ref().unwrap().value(), b), &a, 1e-12, "filter attention");
        let (t, a) = vt_scalar::recurrent_tokenize(&xm, &rows_of(&t_in, b), &rows_of(&w_t2r, 0));
        assert_close(&rows_of(r.tokens.value(), b), &t, 1e-12, "recurrent tokens");
        assert_close(&rows_of(r.attention.as_ref().unwrap().value(), b), &a, 1e-12, "recurrent attention");
    }
}

#[test]
fn kmeans_is_bit_exact_with_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (shape, l, niter) in [([2, 4, 6, 6], 4, 10), ([1, 3, 7, 5], 6, 3), ([1, 8, 14, 14], 32, 10), ([1, 2, 4, 4], 16, 5)] {
        let x = rand_tensor(&mut rng, &shape, 1.0).map(|v| if v.abs() < 0.05 { 0.0 } else { v });
        let got = kmeans_centroids(&x, l, niter).unwrap();
        let want = vt_oracles::lloyds(x.data(), (shape[0], shape[1], shape[2], shape[3]), l, niter);
        assert_eq!(got.data(), &want[..], "{shape:?} L={l}");
    }
}

#[test]
fn cluster_tokenizer_uses_centroids_as_grouping_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 4, 5, 5], 1.0);
    let tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let out = cluster_tokenize(&xv, 4, 10).unwrap();
    let u = vt_oracles::lloyds(x.data(), (1, 4, 5, 5), 4, 10);
    let w_k: Mat = (0..4).map(|c| u[c * 4..(c + 1) * 4].to_vec()).collect();
    let (t, a) = vt_scalar::centroid_tokenize(&pixel_mat(&x, 0), &w_k);
    assert_close(&rows_of(out.tokens.value(), 0), &t, 1e-12, "cluster tokens");
    assert_close(&rows_of(out.attention.unwrap().value(), 0), &a, 1e-12, "cluster attention");
}

#[test]
fn cluster_tokenizer_blocks_gradient_into_centroids() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[1, 3, 4, 4], 1.0);
    let tape = Tape::<f64>::new();
    let xv = tape.param("x", x.clone());
    let loss = cluster_tokenize(&xv, 4, 10).unwrap().tokens.sum();
    let g_full = tape.gradients(&loss).unwrap().get("x").unwrap().clone();

    let tape2 = Tape::<f64>::new();
    let xv2 = tape2.param("x", x.clone());
    let fixed = tape2.constant(kmeans_centroids(&x, 4, 10).unwrap());
    let loss2 = centroid_tokenize(&xv2, &fixed).unwrap().tokens.sum();
    let g_fixed = tape2.gradients(&loss2).unwrap().get("x").unwrap().clone();
    assert_eq!(g_full.data(), g_fixed.data());
}

#[test]
fn transformer_and_projector_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tape = Tape::<f64>::new();
    let t = rand_tensor(&mut rng, &[2, 6, 5], 1.5);
    let k = rand_tensor(&mut rng, &[5, 3], 1.0);
    let q = rand_tensor(&mut rng, &[5, 3], 1.0);
    let f1 = rand_tensor(&mut rng, &[5, 5], 1.0);
    let f2 = rand_tensor(&mut rng, &[5, 5], 1.0);
    let x = rand_tensor(&mut rng, &[2, 4, 3, 3], 1.0);
    let wq = rand_tensor(&mut rng, &[4, 2], 1.0);
    let wk = rand_tensor(&mut rng, &[5, 2], 1.0);
    let wv = rand_tensor(&mut rng, &[5, 4], 1.0);
    let c = |v: &Tensor<f64>| tape.constant(v.clone());
    let tv = c(&t);
    let (sa, s) = token_self_attention(&tv, &c(&k), &c(&q)).unwrap();
    let ff = token_ffn(&tv, &c(&f1), &c(&f2)).unwrap();
    let weights = TransformerWeights { key: c(&k), query: c(&q), ffn_in: c(&f1), ffn_out: c(&f2) };
    let full = transformer_forward(&tv, &weights).unwrap();
    let pw = ProjectorWeights { query: c(&wq), key: c(&wk), value: c(&wv) };
    let (xo, p) = project_tokens(&c(&x), &tv, &pw).unwrap();
    for b in 0..2 {
        let tm = rows_of(&t, b);
        let (want_sa, want_s) = vt_scalar::self_attention(&tm, &rows_of(&k, 0), &rows_of(&q, 0));
        assert_close(&rows_of(sa.value(), b), &want_sa, 1e-12, "self-attention");
        assert_close(&rows_of(s.value(), b), &want_s, 1e-12, "attention weights");
        let want_ff = vt_scalar::ffn(&tm, &rows_of(&f1, 0), &rows_of(&f2, 0));
        assert_close(&rows_of(ff.value(), b), &want_ff, 1e-12, "ffn");
        let want_full =
            vt_scalar::transformer(&tm, &rows_of(&k, 0), &rows_of(&q, 0), &rows_of(&f1, 0), &rows_of(&f2, 0));
        assert_close(&rows_of(full.value(), b), &want_full, 1e-12, "transformer");
        let (want_x, want_p) =
            vt_scalar::project(&pixel_mat(&x, b), &tm, &rows_of(&wq, 0), &rows_of(&wk, 0), &rows_of(&wv, 0));
        assert_close(&pixel_mat(xo.value(), b), &want_x, 1e-12, "projected map");
        assert_close(&rows_of(p.value(), b), &want_p, 1e-12, "projection weights");
    }
}

fn block_against_oracle(kind: TokenizerKind, c_in: usize, c_out: usize, c_tok: usize, projector: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(6 + c_in as u64);
    let cfg = VtBlockConfig { projector, attn_dim: 3, proj_dim: 2, ..VtBlockConfig::new(c_in, c_out, c_tok, 4, kind) };
    let weights: Vec<(&str, Tensor<f64>)> =
        cfg.param_shapes().into_iter().map(|(n, s)| (n, rand_tensor(&mut rng, &s, 0.7))).collect();
    let x = rand_tensor(&mut rng, &[2, c_in, 3, 4], 1.0);
    let t_prev = rand_tensor(&mut rng, &[2, 4, c_tok], 1.0);
    let tape = Tape::<f64>::new();
    let w = VtBlockWeights::from_lookup(&cfg, |name| {
        Ok(tape.constant(weights.iter().find(|(n, _)| *n == name).unwrap().1.clone()))
    })
    .unwrap();
    let tp = tape.constant(t_prev.clone());
    let out = vt_block_forward(&tape.constant(x.clone()), Some(&tp), &cfg, &w).unwrap();
    let get = |n: &str| weights.iter().find(|(m, _)| *m == n).map(|(_, t)| t);
    for b in 0..2 {
        let bw = BlockWeights {
            channel_adapter: get("channel_adapter").map(pointwise_as_mat),
            tokenizer: rows_of(get("tokenizer.grouping").or(get("tokenizer.token_to_grouping")).unwrap(), 0),
            recurrent: kind == TokenizerKind::Recurrent,
            token_adapter: get("token_adapter").map(|t| rows_of(t, 0)),
            k: rows_of(get("transformer.key").unwrap(), 0),
            q: rows_of(get("transformer.query").unwrap(), 0),
            f1: rows_of(get("transformer.ffn_in").unwrap(), 0),
            f2: rows_of(get("transformer.ffn_out").unwrap(), 0),
            projector: projector.then(|| {
                (
                    rows_of(get("projector.query").unwrap(), 0),
                    rows_of(get("projector.key").unwrap(), 0),
                    rows_of(get("projector.value").unwrap(), 0),
                )
            }),
        };
        let tb = rows_of(&t_prev, b);
        let (xo, to, a) = vt_scalar::vt_block(&pixel_mat(&x, b), Some(&tb), &bw);
        assert_close(&pixel_mat(out.features.value(), b), &xo, 1e-11, "block features");
        assert_close(&rows_of(out.tokens.value(), b), &to, 1e-11, "block tokens");
        assert_close(&rows_of(out.attention.as_ref().unwrap().value(), b), &a, 1e-11, "block attention");
    }
}

#[test]
fn block_matches_oracle() {
    block_against_oracle(TokenizerKind::Filter, 5, 5, 5, true);
    block_against_oracle(TokenizerKind::Filter, 3, 5, 6, true);
    block_against_oracle(TokenizerKind::Recurrent, 4, 5, 6, true);
    block_against_oracle(TokenizerKind::Recurrent, 5, 5, 5, false);
}

#[test]
fn gradient_suite_within_tolerance() {
    for case in vt_core::gradcheck::run_gradcheck_suite(11, 1e-5).unwrap() {
        assert!(case.report.max_rel_error <= 1e-4, "{}: {:?}", case.name, case.report);
    }
}

fn permute_tokens(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let [n, l, c] = *t.shape() else { panic!() };
    Tensor::from_fn(&[n, l, c], |i| {
        let (b, rest) = (i / (l * c), i % (l * c));
        let (li, ci) = (rest / c, rest % c);
        t.data()[b * l * c + perm[li] * c + ci]
    })
}

fn small_tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n = shape.iter().product::<usize>();
    proptest::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tokenizer_attention_columns_are_distributions(
        x in small_tensor(vec![1, 3, 3, 4]),
        w in small_tensor(vec![3, 5]),
    ) {
        let tape = Tape::<f64>::new();
        let out = filter_tokenize(&tape.constant(x.clone()), &tape.constant(w)).unwrap();
        let a = out.attention.unwrap();
        for l in 0..5 {
            let s: f64 = (0..12).map(|p| a.value().get(&[0, p, l])).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
        // Each token channel lies within the range of that channel's pixels.
        for ch in 0..3 {
            let vals = &x.data()[ch * 12..(ch + 1) * 12];
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for l in 0..5 {
                let v = out.tokens.value().get(&[0, l, ch]);
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn transformer_is_permutation_equivariant(
        t in small_tensor(vec![1, 5, 4]),
        k in small_tensor(vec![4, 3]),
        q in small_tensor(vec![4, 3]),
        f1 in small_tensor(vec![4, 4]),
        f2 in small_tensor(vec![4, 4]),
        seed in any::<u64>(),
    ) {
        let mut perm: Vec<usize> = (0..5).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..5).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let tape = Tape::<f64>::new();
        let c = |v: &Tensor<f64>| tape.constant(v.clone());
        let w = TransformerWeights { key: c(&k), query: c(&q), ffn_in: c(&f1), ffn_out: c(&f2) };
        let a = transformer_forward(&c(&permute_tokens(&t, &perm)), &w).unwrap();
        let b = transformer_forward(&c(&t), &w).unwrap();
        let diff = a.value().max_abs_diff(&permute_tokens(b.value(), &perm));
        prop_assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn self_attention_rows_are_distributions(
        t in small_tensor(vec![2, 4, 3]),
        k in small_tensor(vec![3, 2]),
        q in small_tensor(vec![3, 2]),
    ) {
        let tape = Tape::<f64>::new();
        let (_, s) = token_self_attention(&tape.constant(t), &tape.constant(k), &tape.constant(q)).unwrap();
        for row in s.value().data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn projector_reassociation_is_stable(
        x in small_tensor(vec![1, 4, 2, 3]),
        t in small_tensor(vec![1, 3, 5]),
        wq in small_tensor(vec![4, 2]),
        wk in small_tensor(vec![5, 2]),
        wv in small_tensor(vec![5, 4]),
    ) {
        let tape = Tape::<f64>::new();
        let c = |v: &Tensor<f64>| tape.constant(v.clone());
        let pw = ProjectorWeights { query: c(&wq), key: c(&wk), value: c(&wv) };
        let (xo, _) = project_tokens(&c(&x), &c(&t), &pw).unwrap();
        let (want, _) = vt_scalar::project(&pixel_mat(&x, 0), &rows_of(&t, 0), &rows_of(&wq, 0), &rows_of(&wk, 0), &rows_of(&wv, 0));
        assert_close(&pixel_mat(xo.value(), 0), &want, 1e-9, "reassociated projector");
    }

    #[test]
    fn recurrent_attention_columns_are_distributions(
        x in small_tensor(vec![1, 2, 3, 3]),
        t_in in small_tensor(vec![1, 4, 3]),
        w in small_tensor(vec![3, 2]),
    ) {
        let tape = Tape::<f64>::new();
        let out = recurrent_tokenize(&tape.constant(x), &tape.constant(t_in), &tape.constant(w)).unwrap();
        let a = out.attention.unwrap();
        for l in 0..4 {
            let s: f64 = (0..9).map(|p| a.value().get(&[0, p, l])).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn kmeans_centroids_are_unit_or_zero(x in small_tensor(vec![1, 3, 4, 4]), l in prop::sample::select(vec![1usize, 2, 3, 4, 6, 8, 9, 12, 16])) {
        let u = kmeans_centroids(&x, l, 10).unwrap();
        for j in 0..l {
            let n: f64 = (0..3).map(|c| u.get(&[0, c, j]).powi(2)).sum::<f64>().sqrt();
            prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
        }
    }
}


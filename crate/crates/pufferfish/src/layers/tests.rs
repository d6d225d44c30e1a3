use super::*;
use crate::layers::gradcheck::{check_all, check_layer, DEFAULT_EPS, DEFAULT_TOL};
use crate::layers::init::init_layer;
use crate::numerics::{matmul, roll_conv_weight, truncated_split, unroll_conv_weight, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

fn dense(t: Tensor) -> Activation {
    Activation::Dense(t)
}

fn new_layer(spec: LayerSpec, seed: u64) -> Layer {
    let mut layer = Layer::new(spec).unwrap();
    init_layer(&mut layer, &mut rng(seed));
    layer
}

fn rel_close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    let scale = a.frob_norm().max(b.frob_norm()).max(1e-12);
    a.sub(b).unwrap().frob_norm() <= tol * scale
}

fn fc_spec(m: usize, n: usize, rank: RankMode, bias: bool) -> LayerSpec {
    let mut s = LayerSpec::vanilla("fc", LayerKind::Fc { m, n, tied: false }, bias);
    s.rank_mode = rank;
    s
}

#[test]
fn spec_validation_rejects_bad_ranks() {
    assert!(Layer::new(fc_spec(4, 6, RankMode::Factorized(5), false)).is_err());
    assert!(Layer::new(fc_spec(4, 6, RankMode::Factorized(0), false)).is_err());
    assert!(Layer::new(fc_spec(4, 6, RankMode::Factorized(4), false)).is_ok());
    let attn_bias = LayerSpec::vanilla(
        "a",
        LayerKind::MultiHeadAttention {
            heads: 2,
            head_dim: 3,
            causal: false,
        },
        true,
    );
    assert!(Layer::new(attn_bias).is_err());
}

#[test]
fn backward_before_forward_is_a_state_error() {
    let mut layer = new_layer(fc_spec(3, 2, RankMode::Vanilla, true), 1);
    let err = layer.backward(&Tensor::zeros(&[1, 2])).unwrap_err();
    assert!(matches!(err, crate::Error::State(_)));
}

#[test]
fn factorized_fc_with_exact_factors_matches_vanilla() {
    let w = random_tensor(&[6, 5], 2);
    let mut vanilla = new_layer(fc_spec(6, 5, RankMode::Vanilla, false), 3);
    *vanilla.state.param_mut("weight").unwrap() = w.clone();
    let (u, v) = truncated_split(&w, 5).unwrap();
    let mut fact = new_layer(fc_spec(6, 5, RankMode::Factorized(5), false), 4);
    *fact.state.param_mut("u").unwrap() = u;
    *fact.state.param_mut("v").unwrap() = v;
    let x = dense(random_tensor(&[4, 6], 5));
    let a = vanilla.forward(&x, Mode::Eval).unwrap();
    let b = fact.forward(&x, Mode::Eval).unwrap();
    assert!(rel_close(a.dense().unwrap(), b.dense().unwrap(), 1e-9));
}

#[test]
fn factorized_fc_composes_two_matmuls() {
    let mut fact = new_layer(fc_spec(7, 4, RankMode::Factorized(2), false), 6);
    let u = fact.state.param("u").unwrap().clone();
    let v = fact.state.param("v").unwrap().clone();
    let x = random_tensor(&[3, 7], 7);
    let got = fact.forward(&dense(x.clone()), Mode::Eval).unwrap();
    let want = matmul(&matmul(&x, &u).unwrap(), &v).unwrap();
    assert_eq!(got.dense().unwrap(), &want);
}

#[test]
fn lstm_zero_weights_halves_cell_state() {
    // all-zero weights and biases: i = f = o = 0.5, g = 0, so
    // c_t = 0.5 c_{t-1} and h_t = 0.5 tanh(0.5 c_{t-1})
    let (d, h) = (4usize, 3usize);
    let mut layer = new_layer(
        LayerSpec::vanilla("lstm", LayerKind::LstmCell { d, h }, true),
        8,
    );
    for (_, t) in layer.state.params.iter_mut() {
        *t = Tensor::zeros(t.shape());
    }
    let c0 = random_tensor(&[1, h], 9);
    let h0 = random_tensor(&[1, h], 10);
    layer.state.lstm_carry = Some((h0, c0.clone()));
    let out = layer
        .forward(&dense(random_tensor(&[1, d], 11)), Mode::Eval)
        .unwrap();
    let out = out.dense().unwrap();
    let (h1, c1) = layer.state.lstm_carry.clone().unwrap();
    for j in 0..h {
        let want_c = 0.5 * c0.data()[j];
        let want_h = 0.5 * (0.5 * c0.data()[j]).tanh();
        assert!((c1.data()[j] - want_c).abs() <= 1e-12);
        assert!((h1.data()[j] - want_h).abs() <= 1e-12);
        assert!((out.at2(0, j) - want_h).abs() <= 1e-12);
    }
}

#[test]
fn single_head_identity_attention_returns_value_vector() {
    let d = 4usize;
    let mut layer = new_layer(
        LayerSpec::vanilla(
            "attn",
            LayerKind::MultiHeadAttention {
                heads: 1,
                head_dim: d,
                causal: false,
            },
            false,
        ),
        12,
    );
    for proj in ["wq", "wk", "wv", "wo"] {
        *layer.state.param_mut(proj).unwrap() = Tensor::eye(d);
    }
    let x = random_tensor(&[1, d], 13);
    let out = layer.forward(&dense(x.clone()), Mode::Eval).unwrap();
    assert!(rel_close(out.dense().unwrap(), &x, 1e-12));
}

#[test]
fn attention_softmax_rows_sum_to_one() {
    let mut layer = new_layer(
        LayerSpec::vanilla(
            "attn",
            LayerKind::MultiHeadAttention {
                heads: 2,
                head_dim: 3,
                causal: true,
            },
            false,
        ),
        14,
    );
    let x = random_tensor(&[5, 6], 15);
    layer.forward(&dense(x), Mode::Train).unwrap();
    let Some(Cache::Attention(cache)) = &layer.state.cache else {
        panic!("no attention cache");
    };
    for attn in cache.attn_weights() {
        for i in 0..attn.rows() {
            let sum: f64 = attn.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn factorized_conv_matches_reconstructed_convolution() {
    // r-filter conv followed by the 1x1 projection == conv with roll(U V)
    let (c_in, c_out, k, r) = (2usize, 4usize, 3usize, 2usize);
    let mut fact = new_layer(
        LayerSpec {
            name: "conv".into(),
            kind: LayerKind::Conv2d {
                c_in,
                c_out,
                k,
                stride: 1,
                pad: 1,
            },
            rank_mode: RankMode::Factorized(r),
            has_bias: false,
        },
        16,
    );
    let u = fact.state.param("u").unwrap().clone();
    let v = fact.state.param("v").unwrap().clone();
    let w_rec =
        roll_conv_weight(&matmul(&unroll_conv_weight(&u).unwrap(), &v).unwrap(), c_in, k).unwrap();
    let mut vanilla = new_layer(
        LayerSpec::vanilla(
            "conv_rec",
            LayerKind::Conv2d {
                c_in,
                c_out,
                k,
                stride: 1,
                pad: 1,
            },
            false,
        ),
        17,
    );
    *vanilla.state.param_mut("weight").unwrap() = w_rec;
    let x = dense(random_tensor(&[2, c_in, 5, 5], 18));
    let a = fact.forward(&x, Mode::Eval).unwrap();
    let b = vanilla.forward(&x, Mode::Eval).unwrap();
    let diff = a
        .dense()
        .unwrap()
        .sub(b.dense().unwrap())
        .unwrap()
        .frob_norm();
    assert!(diff <= 1e-10, "diff {diff}");
}

/// Every kind at its natural rank bound must reproduce its vanilla twin.
#[test]
fn full_rank_equivalence_every_kind() {
    // fc
    {
        let w = random_tensor(&[6, 9], 20);
        let mut vanilla = new_layer(fc_spec(6, 9, RankMode::Vanilla, true), 21);
        *vanilla.state.param_mut("weight").unwrap() = w.clone();
        let bias = vanilla.state.param("bias").unwrap().clone();
        let (u, v) = truncated_split(&w, 6).unwrap();
        let mut fact = new_layer(fc_spec(6, 9, RankMode::Factorized(6), true), 22);
        *fact.state.param_mut("u").unwrap() = u;
        *fact.state.param_mut("v").unwrap() = v;
        *fact.state.param_mut("bias").unwrap() = bias;
        let x = dense(random_tensor(&[3, 6], 23));
        let a = vanilla.forward(&x, Mode::Eval).unwrap();
        let b = fact.forward(&x, Mode::Eval).unwrap();
        assert!(rel_close(a.dense().unwrap(), b.dense().unwrap(), 1e-9));
    }
    // conv, bound = min(c_in k^2, c_out) = c_out
    {
        let (c_in, c_out, k) = (3usize, 8usize, 2usize);
        let kind = LayerKind::Conv2d {
            c_in,
            c_out,
            k,
            stride: 1,
            pad: 0,
        };
        let mut vanilla = new_layer(LayerSpec::vanilla("c", kind.clone(), false), 24);
        let w = vanilla.state.param("weight").unwrap().clone();
        let (u, v) = truncated_split(&unroll_conv_weight(&w).unwrap(), c_out).unwrap();
        let mut fact = Layer::new(LayerSpec {
            name: "c_lr".into(),
            kind,
            rank_mode: RankMode::Factorized(c_out),
            has_bias: false,
        })
        .unwrap();
        fact.state.params = vec![
            ("u".into(), roll_conv_weight(&u, c_in, k).unwrap()),
            ("v".into(), v),
        ];
        let x = dense(random_tensor(&[2, c_in, 6, 6], 25));
        let a = vanilla.forward(&x, Mode::Eval).unwrap();
        let b = fact.forward(&x, Mode::Eval).unwrap();
        assert!(rel_close(a.dense().unwrap(), b.dense().unwrap(), 1e-9));
    }
    // lstm with d == h (the shared rank bound is lossless there)
    {
        let d = 5usize;
        let kind = LayerKind::LstmCell { d, h: d };
        let mut vanilla = new_layer(LayerSpec::vanilla("l", kind.clone(), true), 26);
        let mut fact = Layer::new(LayerSpec {
            name: "l_lr".into(),
            kind,
            rank_mode: RankMode::Factorized(d),
            has_bias: true,
        })
        .unwrap();
        let mut params = Vec::new();
        for branch in ['i', 'h'] {
            for gate in ['i', 'f', 'g', 'o'] {
                let w = vanilla.state.param(&format!("w_{branch}{gate}")).unwrap();
                let (u, v) = truncated_split(w, d).unwrap();
                params.push((format!("w_{branch}{gate}_u"), u));
                params.push((format!("w_{branch}{gate}_v"), v));
            }
        }
        for gate in ['i', 'f', 'g', 'o'] {
            params.push((
                format!("b_{gate}"),
                vanilla.state.param(&format!("b_{gate}")).unwrap().clone(),
            ));
        }
        fact.state.params = params;
        let x = dense(random_tensor(&[4, d], 27));
        let a = vanilla.forward(&x, Mode::Eval).unwrap();
        vanilla.reset();
        let b = fact.forward(&x, Mode::Eval).unwrap();
        assert!(rel_close(a.dense().unwrap(), b.dense().unwrap(), 1e-9));
    }
    // single-head attention (bound d covers every projection)
    {
        let d = 4usize;
        let kind = LayerKind::MultiHeadAttention {
            heads: 1,
            head_dim: d,
            causal: false,
        };
        let mut vanilla = new_layer(LayerSpec::vanilla("a", kind.clone(), false), 28);
        let mut fact = Layer::new(LayerSpec {
            name: "a_lr".into(),
            kind,
            rank_mode: RankMode::Factorized(d),
            has_bias: false,
        })
        .unwrap();
        let mut params = Vec::new();
        for proj in ["wq", "wk", "wv"] {
            let (u, v) = truncated_split(vanilla.state.param(proj).unwrap(), d).unwrap();
            params.push((format!("{proj}_u_h0"), u));
            params.push((format!("{proj}_v_h0"), v));
        }
        let (u, v) = truncated_split(vanilla.state.param("wo").unwrap(), d).unwrap();
        params.push(("wo_u".into(), u));
        params.push(("wo_v".into(), v));
        fact.state.params = params;
        let x = dense(random_tensor(&[5, d], 29));
        let a = vanilla.forward(&x, Mode::Eval).unwrap();
        let b = fact.forward(&x, Mode::Eval).unwrap();
        assert!(rel_close(a.dense().unwrap(), b.dense().unwrap(), 1e-9));
    }
    // ffn (bound = model dim, lossless for both matrices)
    {
        let (p, d) = (2usize, 3usize);
        let kind = LayerKind::Ffn { heads: p, head_dim: d };
        let mut vanilla = new_layer(LayerSpec::vanilla("f", kind.clone(), true), 30);
        let mut fact = Layer::new(LayerSpec {
            name: "f_lr".into(),
            kind,
            rank_mode: RankMode::Factorized(p * d),
            has_bias: true,
        })
        .unwrap();
        let mut params = Vec::new();
        let (u1, v1) = truncated_split(vanilla.state.param("w1").unwrap(), p * d).unwrap();
        params.push(("w1_u".into(), u1));
        params.push(("w1_v".into(), v1));
        params.push(("b1".into(), vanilla.state.param("b1").unwrap().clone()));
        let (u2, v2) = truncated_split(vanilla.state.param("w2").unwrap(), p * d).unwrap();
        params.push(("w2_u".into(), u2));
        params.push(("w2_v".into(), v2));
        params.push(("b2".into(), vanilla.state.param("b2").unwrap().clone()));
        fact.state.params = params;
        let x = dense(random_tensor(&[4, p * d], 31));
        let a = vanilla.forward(&x, Mode::Eval).unwrap();
        let b = fact.forward(&x, Mode::Eval).unwrap();
        assert!(rel_close(a.dense().unwrap(), b.dense().unwrap(), 1e-9));
    }
}

#[test]
fn zero_upstream_gradient_gives_zero_param_gradients() {
    let mut layer = new_layer(fc_spec(4, 3, RankMode::Vanilla, true), 32);
    let x = dense(random_tensor(&[2, 4], 33));
    layer.forward(&x, Mode::Train).unwrap();
    let (_, grads) = layer.backward(&Tensor::zeros(&[2, 3])).unwrap();
    for (_, g) in grads {
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn fc_weight_gradient_is_outer_product_for_single_sample() {
    let mut layer = new_layer(fc_spec(4, 3, RankMode::Vanilla, false), 34);
    let x = random_tensor(&[1, 4], 35);
    layer.forward(&dense(x.clone()), Mode::Train).unwrap();
    let g = random_tensor(&[1, 3], 36);
    let (_, grads) = layer.backward(&g).unwrap();
    let want = matmul(&x.transposed(), &g).unwrap();
    assert_eq!(grads[0].1, want);
}

#[test]
fn batchnorm_train_mode_rejects_batch_of_one() {
    let mut layer = new_layer(
        LayerSpec::vanilla("bn", LayerKind::BatchNorm { features: 3 }, false),
        37,
    );
    let x = dense(random_tensor(&[1, 3, 2, 2], 38));
    assert!(matches!(
        layer.forward(&x, Mode::Train),
        Err(crate::Error::Argument(_))
    ));
    assert!(layer.forward(&x, Mode::Eval).is_ok());
}

#[test]
fn batchnorm_eval_uses_running_statistics() {
    let mut layer = new_layer(
        LayerSpec::vanilla("bn", LayerKind::BatchNorm { features: 2 }, false),
        39,
    );
    *layer.state.param_mut("running_mean").unwrap() =
        Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
    *layer.state.param_mut("running_var").unwrap() =
        Tensor::new(vec![2], vec![4.0, 0.25]).unwrap();
    let x = Tensor::new(vec![1, 2], vec![3.0, 0.0]).unwrap();
    let out = layer.forward(&dense(x), Mode::Eval).unwrap();
    let out = out.dense().unwrap();
    assert!((out.at2(0, 0) - (3.0 - 1.0) / (4.0f64 + 1e-5).sqrt()).abs() <= 1e-9);
    assert!((out.at2(0, 1) - 1.0 / (0.25f64 + 1e-5).sqrt()).abs() <= 1e-9);
}

#[test]
fn dropout_eval_is_identity_and_train_mask_is_seeded() {
    let mut layer = new_layer(
        LayerSpec::vanilla("drop", LayerKind::Dropout { p: 0.5 }, false),
        40,
    );
    layer.state.dropout_seed = 77;
    let x = random_tensor(&[4, 5], 41);
    let eval = layer.forward(&dense(x.clone()), Mode::Eval).unwrap();
    assert_eq!(eval.dense().unwrap(), &x);
    let a = layer.forward(&dense(x.clone()), Mode::Train).unwrap();
    layer.state.dropout_calls = 0; // rewind the stream
    let b = layer.forward(&dense(x.clone()), Mode::Train).unwrap();
    assert_eq!(a.dense().unwrap(), b.dense().unwrap());
    // entries are x / (1 - p) or zero
    for (o, i) in a.dense().unwrap().data().iter().zip(x.data()) {
        assert!(*o == 0.0 || (*o - i * 2.0).abs() <= 1e-12);
    }
}

#[test]
fn gradcheck_every_layer_kind() {
    let rows = check_all(101, DEFAULT_EPS, DEFAULT_TOL).unwrap();
    assert!(!rows.is_empty());
    for r in &rows {
        assert!(r.pass, "{}.{} rel err {}", r.layer, r.param, r.max_rel_err);
    }
}

#[test]
fn gradcheck_covers_strided_factorized_conv() {
    let mut layer = new_layer(
        LayerSpec {
            name: "conv".into(),
            kind: LayerKind::Conv2d {
                c_in: 2,
                c_out: 4,
                k: 3,
                stride: 2,
                pad: 1,
            },
            rank_mode: RankMode::Factorized(3),
            has_bias: true,
        },
        42,
    );
    let x = dense(random_tensor(&[2, 2, 5, 5], 43));
    for row in check_layer(&mut layer, &x, DEFAULT_EPS, DEFAULT_TOL).unwrap() {
        assert!(row.pass, "{} rel err {}", row.param, row.max_rel_err);
    }
}

#[test]
fn param_count_closed_forms() {
    // conv 512 -> 512, k=3: vanilla 2,359,296; rank 128 -> 655,360
    let conv = LayerKind::Conv2d {
        c_in: 512,
        c_out: 512,
        k: 3,
        stride: 1,
        pad: 1,
    };
    assert_eq!(param_count(&LayerSpec::vanilla("c", conv.clone(), false)), 2_359_296);
    let mut lr = LayerSpec::vanilla("c", conv, false);
    lr.rank_mode = RankMode::Factorized(128);
    assert_eq!(param_count(&lr), 655_360);

    // LSTM d = h = 1500, weights only: 18,000,000
    let lstm = LayerSpec::vanilla("l", LayerKind::LstmCell { d: 1500, h: 1500 }, false);
    assert_eq!(param_count(&lstm), 18_000_000);

    // FC 512 x 512 at rank 128: 131,072
    let mut fc128 = LayerSpec::vanilla("f", LayerKind::Fc { m: 512, n: 512, tied: false }, false);
    fc128.rank_mode = RankMode::Factorized(128);
    assert_eq!(param_count(&fc128), 131_072);
}

#[test]
fn param_count_matches_enumeration_of_materialized_tensors() {
    for (spec, _) in gradcheck::standard_cases(7) {
        let layer = new_layer(spec, 44);
        let enumerated: u64 = layer
            .state
            .params
            .iter()
            .filter(|(n, _)| is_trainable(n))
            .map(|(_, t)| t.len() as u64)
            .sum();
        assert_eq!(enumerated, layer.param_count(), "{}", layer.spec.name);
    }
}

#[test]
fn mac_count_examples() {
    let mut fc128 = LayerSpec::vanilla("f", LayerKind::Fc { m: 512, n: 512, tied: false }, false);
    fc128.rank_mode = RankMode::Factorized(128);
    assert_eq!(mac_count(&fc128, &[512]).unwrap(), 131_072);

    let lstm = LayerSpec::vanilla("l", LayerKind::LstmCell { d: 1500, h: 1500 }, true);
    assert_eq!(mac_count(&lstm, &[1, 1500]).unwrap(), 18_000_000);
    let mut lstm_lr = lstm;
    lstm_lr.rank_mode = RankMode::Factorized(375);
    assert_eq!(mac_count(&lstm_lr, &[1, 1500]).unwrap(), 9_000_000);

    let conv = LayerSpec::vanilla(
        "c",
        LayerKind::Conv2d {
            c_in: 64,
            c_out: 64,
            k: 3,
            stride: 1,
            pad: 1,
        },
        false,
    );
    assert_eq!(mac_count(&conv, &[64, 32, 32]).unwrap(), 64 * 64 * 9 * 1024);
}

#[test]
fn factorized_beats_vanilla_at_quarter_ratio_for_paper_shapes() {
    use crate::factorize::{rank_for, RankRatio};
    let quarter = RankRatio::new(1, 4).unwrap();
    let shapes: Vec<LayerKind> = vec![
        LayerKind::Conv2d { c_in: 64, c_out: 64, k: 3, stride: 1, pad: 1 },
        LayerKind::Conv2d { c_in: 512, c_out: 512, k: 3, stride: 1, pad: 1 },
        LayerKind::Conv2d { c_in: 1024, c_out: 512, k: 1, stride: 1, pad: 0 },
        LayerKind::Conv2d { c_in: 1024, c_out: 2048, k: 1, stride: 2, pad: 0 },
        LayerKind::Fc { m: 512, n: 512, tied: false },
        LayerKind::LstmCell { d: 1500, h: 1500 },
        LayerKind::MultiHeadAttention { heads: 8, head_dim: 64, causal: false },
        LayerKind::Ffn { heads: 8, head_dim: 64 },
    ];
    for kind in shapes {
        let vanilla = LayerSpec::vanilla("x", kind.clone(), false);
        let r = rank_for(&vanilla, quarter).unwrap();
        let mut low = vanilla.clone();
        low.rank_mode = RankMode::Factorized(r);
        assert!(
            param_count(&low) < param_count(&vanilla),
            "{:?}: {} !< {}",
            kind,
            param_count(&low),
            param_count(&vanilla)
        );
    }
}

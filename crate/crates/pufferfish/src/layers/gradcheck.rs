//! Central finite-difference verification of every analytic backward pass.
//!
//! Drives the `gradcheck` CLI subcommand and the test suites. The scalar
//! probe loss is `sum(output .* R)` for a fixed pseudo-random `R`, so the
//! analytic gradient of a parameter is exactly what `backward(R)` returns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{init, Activation, Layer, LayerKind, LayerSpec, Mode, PoolOp, RankMode};
use crate::error::Result;
use crate::numerics::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckRow {
    pub layer: String,
    pub param: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn probe(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn loss(layer: &mut Layer, input: &Activation, r: &Tensor) -> Result<f64> {
    layer.reset();
    let out = layer.forward(input, Mode::Train)?;
    let out = out.dense()?;
    Ok(out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
}

/// Checks every trainable parameter of `layer` against central differences.
pub fn check_layer(
    layer: &mut Layer,
    input: &Activation,
    eps: f64,
    tol: f64,
) -> Result<Vec<GradCheckRow>> {
    layer.reset();
    let out = layer.forward(input, Mode::Train)?;
    let r = probe(out.dense()?.shape(), 0x5eed);
    let (_, analytic) = layer.backward(&r)?;

    let mut rows = Vec::new();
    let param_names: Vec<String> = layer
        .state
        .params
        .iter()
        .filter(|(n, _)| super::is_trainable(n))
        .map(|(n, _)| n.clone())
        .collect();
    for name in param_names {
        let a_grad = analytic
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(layer.state.param(&name).unwrap().shape()));
        let n_elems = layer.state.param(&name)?.len();
        let mut max_rel = 0.0f64;
        for i in 0..n_elems {
            let orig = layer.state.param(&name)?.data()[i];
            layer.state.param_mut(&name)?.data_mut()[i] = orig + eps;
            let lp = loss(layer, input, &r)?;
            layer.state.param_mut(&name)?.data_mut()[i] = orig - eps;
            let lm = loss(layer, input, &r)?;
            layer.state.param_mut(&name)?.data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic_v = a_grad.data()[i];
            let rel = (analytic_v - numeric).abs() / analytic_v.abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
        rows.push(GradCheckRow {
            layer: layer.spec.name.clone(),
            param: name,
            max_rel_err: max_rel,
            pass: max_rel <= tol,
        });
    }
    layer.reset();
    Ok(rows)
}

/// Small instances of every layer kind, vanilla and factorized.
pub fn standard_cases(seed: u64) -> Vec<(LayerSpec, Activation)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dense = |shape: &[usize]| {
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
        Activation::Dense(t)
    };
    let mut cases: Vec<(LayerSpec, Activation)> = Vec::new();

    for (name, rank) in [("fc", RankMode::Vanilla), ("fc_lr", RankMode::Factorized(2))] {
        let mut s = LayerSpec::vanilla(name, LayerKind::Fc { m: 5, n: 4, tied: false }, true);
        s.rank_mode = rank;
        cases.push((s, dense(&[3, 5])));
    }
    for (name, rank) in [
        ("conv", RankMode::Vanilla),
        ("conv_lr", RankMode::Factorized(2)),
    ] {
        let mut s = LayerSpec::vanilla(
            name,
            LayerKind::Conv2d {
                c_in: 2,
                c_out: 3,
                k: 3,
                stride: 2,
                pad: 1,
            },
            true,
        );
        s.rank_mode = rank;
        cases.push((s, dense(&[2, 2, 5, 5])));
    }
    for (name, rank) in [
        ("lstm", RankMode::Vanilla),
        ("lstm_lr", RankMode::Factorized(2)),
    ] {
        let mut s = LayerSpec::vanilla(name, LayerKind::LstmCell { d: 4, h: 3 }, true);
        s.rank_mode = rank;
        cases.push((s, dense(&[3, 4])));
    }
    for (name, rank, causal) in [
        ("attn", RankMode::Vanilla, false),
        ("attn_causal", RankMode::Vanilla, true),
        ("attn_lr", RankMode::Factorized(2), false),
    ] {
        let mut s = LayerSpec::vanilla(
            name,
            LayerKind::MultiHeadAttention {
                heads: 2,
                head_dim: 3,
                causal,
            },
            false,
        );
        s.rank_mode = rank;
        cases.push((s, dense(&[4, 6])));
    }
    for (name, rank) in [("ffn", RankMode::Vanilla), ("ffn_lr", RankMode::Factorized(2))] {
        let mut s = LayerSpec::vanilla(name, LayerKind::Ffn { heads: 2, head_dim: 3 }, true);
        s.rank_mode = rank;
        cases.push((s, dense(&[4, 6])));
    }
    cases.push((
        LayerSpec::vanilla("bn2d", LayerKind::BatchNorm { features: 3 }, false),
        dense(&[4, 3, 2, 2]),
    ));
    cases.push((
        LayerSpec::vanilla("bn1d", LayerKind::BatchNorm { features: 5 }, false),
        dense(&[6, 5]),
    ));
    cases.push((
        LayerSpec::vanilla("ln", LayerKind::LayerNorm { features: 6 }, false),
        dense(&[3, 6]),
    ));
    cases.push((
        LayerSpec::vanilla("embed", LayerKind::Embedding { vocab: 7, dim: 4 }, false),
        Activation::Tokens(vec![1, 5, 0, 5]),
    ));
    // parameter-free kinds, exercised for their input gradients elsewhere
    cases.push((
        LayerSpec::vanilla("relu", LayerKind::Relu, false),
        dense(&[3, 4]),
    ));
    cases.push((
        LayerSpec::vanilla(
            "maxpool",
            LayerKind::Pool {
                op: PoolOp::Max,
                k: 2,
                stride: 2,
                pad: 0,
            },
            false,
        ),
        dense(&[2, 2, 4, 4]),
    ));
    cases
}

/// Runs the finite-difference check over every standard case.
pub fn check_all(seed: u64, eps: f64, tol: f64) -> Result<Vec<GradCheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let mut rows = Vec::new();
    for (spec, input) in standard_cases(seed) {
        let mut layer = Layer::new(spec)?;
        init::init_layer(&mut layer, &mut rng);
        rows.extend(check_layer(&mut layer, &input, eps, tol)?);
    }
    Ok(rows)
}

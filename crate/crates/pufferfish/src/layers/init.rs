//! Deterministic parameter initialization.
//!
//! Conv/FC weights are He-uniform, LSTM weights and biases are
//! uniform(-1/sqrt(h), 1/sqrt(h)), attention and FFN projections are
//! Xavier-uniform, embeddings uniform(-0.1, 0.1), and all other biases
//! start at zero. Draws happen in parameter declaration order from a
//! caller-supplied ChaCha stream, so a given (architecture, seed) pair
//! always yields bitwise-identical weights.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Layer, LayerKind, RankMode};
use crate::numerics::Tensor;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    uniform(rng, shape, (6.0 / fan_in as f64).sqrt())
}

fn xavier_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
}

const LSTM_GATES: [char; 4] = ['i', 'f', 'g', 'o'];

/// Materializes all parameter tensors of `layer`, replacing any existing ones.
pub fn init_layer(layer: &mut Layer, rng: &mut ChaCha8Rng) {
    let mut params: Vec<(String, Tensor)> = Vec::new();
    let has_bias = layer.spec.has_bias;
    match layer.spec.kind.clone() {
        LayerKind::Fc { m, n, tied } => {
            match layer.spec.rank_mode {
                RankMode::Vanilla => {
                    if !tied {
                        params.push(("weight".into(), he_uniform(rng, &[m, n], m)));
                    }
                }
                RankMode::Factorized(r) => {
                    params.push(("u".into(), he_uniform(rng, &[m, r], m)));
                    params.push(("v".into(), he_uniform(rng, &[r, n], r)));
                }
            }
            if has_bias {
                params.push(("bias".into(), Tensor::zeros(&[n])));
            }
        }
        LayerKind::Conv2d { c_in, c_out, k, .. } => {
            let fan_in = c_in * k * k;
            match layer.spec.rank_mode {
                RankMode::Vanilla => {
                    params.push(("weight".into(), he_uniform(rng, &[c_in, c_out, k, k], fan_in)));
                }
                RankMode::Factorized(r) => {
                    params.push(("u".into(), he_uniform(rng, &[c_in, r, k, k], fan_in)));
                    params.push(("v".into(), he_uniform(rng, &[r, c_out], r)));
                }
            }
            if has_bias {
                params.push(("bias".into(), Tensor::zeros(&[c_out])));
            }
        }
        LayerKind::LstmCell { d, h } => {
            let bound = 1.0 / (h as f64).sqrt();
            for (branch, in_dim) in [("i", d), ("h", h)] {
                for gate in LSTM_GATES {
                    match layer.spec.rank_mode {
                        RankMode::Vanilla => {
                            params.push((
                                format!("w_{branch}{gate}"),
                                uniform(rng, &[in_dim, h], bound),
                            ));
                        }
                        RankMode::Factorized(r) => {
                            params.push((
                                format!("w_{branch}{gate}_u"),
                                uniform(rng, &[in_dim, r], bound),
                            ));
                            params.push((format!("w_{branch}{gate}_v"), uniform(rng, &[r, h], bound)));
                        }
                    }
                }
            }
            if has_bias {
                for gate in LSTM_GATES {
                    params.push((format!("b_{gate}"), uniform(rng, &[h], bound)));
                }
            }
        }
        LayerKind::MultiHeadAttention { heads, head_dim, .. } => {
            let model = heads * head_dim;
            match layer.spec.rank_mode {
                RankMode::Vanilla => {
                    for proj in ["wq", "wk", "wv", "wo"] {
                        params.push((proj.into(), xavier_uniform(rng, &[model, model], model, model)));
                    }
                }
                RankMode::Factorized(r) => {
                    for proj in ["wq", "wk", "wv"] {
                        for head in 0..heads {
                            params.push((
                                format!("{proj}_u_h{head}"),
                                xavier_uniform(rng, &[model, r], model, r),
                            ));
                            params.push((
                                format!("{proj}_v_h{head}"),
                                xavier_uniform(rng, &[r, head_dim], r, head_dim),
                            ));
                        }
                    }
                    params.push(("wo_u".into(), xavier_uniform(rng, &[model, r], model, r)));
                    params.push(("wo_v".into(), xavier_uniform(rng, &[r, model], r, model)));
                }
            }
        }
        LayerKind::Ffn { heads, head_dim } => {
            let model = heads * head_dim;
            let hidden = 4 * model;
            match layer.spec.rank_mode {
                RankMode::Vanilla => {
                    params.push(("w1".into(), xavier_uniform(rng, &[model, hidden], model, hidden)));
                    if has_bias {
                        params.push(("b1".into(), Tensor::zeros(&[hidden])));
                    }
                    params.push(("w2".into(), xavier_uniform(rng, &[hidden, model], hidden, model)));
                    if has_bias {
                        params.push(("b2".into(), Tensor::zeros(&[model])));
                    }
                }
                RankMode::Factorized(r) => {
                    params.push(("w1_u".into(), xavier_uniform(rng, &[model, r], model, r)));
                    params.push(("w1_v".into(), xavier_uniform(rng, &[r, hidden], r, hidden)));
                    if has_bias {
                        params.push(("b1".into(), Tensor::zeros(&[hidden])));
                    }
                    params.push(("w2_u".into(), xavier_uniform(rng, &[hidden, r], hidden, r)));
                    params.push(("w2_v".into(), xavier_uniform(rng, &[r, model], r, model)));
                    if has_bias {
                        params.push(("b2".into(), Tensor::zeros(&[model])));
                    }
                }
            }
        }
        LayerKind::BatchNorm { features } => {
            params.push(("weight".into(), Tensor::from_fn(&[features], |_| 1.0)));
            params.push(("bias".into(), Tensor::zeros(&[features])));
            params.push(("running_mean".into(), Tensor::zeros(&[features])));
            params.push(("running_var".into(), Tensor::from_fn(&[features], |_| 1.0)));
        }
        LayerKind::LayerNorm { features } => {
            params.push(("weight".into(), Tensor::from_fn(&[features], |_| 1.0)));
            params.push(("bias".into(), Tensor::zeros(&[features])));
        }
        LayerKind::Embedding { vocab, dim } => {
            params.push(("weight".into(), uniform(rng, &[vocab, dim], 0.1)));
        }
        LayerKind::Relu | LayerKind::Flatten | LayerKind::Pool { .. } | LayerKind::Dropout { .. } => {}
    }
    layer.state.params = params;
}

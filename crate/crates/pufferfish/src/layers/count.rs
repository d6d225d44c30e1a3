//! Exact parameter and forward-pass MAC accounting.
//!
//! Counting convention, applied uniformly to every architecture report:
//!
//! * conv / FC / LSTM / attention / FFN count their weight-multiply MACs
//!   (`c_in c_out k^2 Ho Wo`, `m n`, `4(dh + h^2)` per token, ...); bias
//!   additions are not counted;
//! * the factorized forms count both stages, e.g.
//!   `r c_in k^2 Ho Wo + r c_out Ho Wo` for a factorized convolution and
//!   `r (m + n)` for a factorized FC;
//! * attention additionally counts the score and value products `2 p N^2 d`;
//!   softmax is free;
//! * BatchNorm and LayerNorm cost 2 ops per element (normalize + affine),
//!   ReLU costs 1 per element, pooling costs 1 per input element;
//! * embedding lookups, dropout, and residual additions are free.
//!
//! Parameter counts cover trainable scalars only: BN running statistics and
//! tied (shared) weights are excluded, biases and BN/LN vectors included.

use super::{LayerKind, LayerSpec};
use crate::error::{Error, Result};
use crate::numerics::conv_out_dim;

/// Trainable scalar count of one layer.
pub fn param_count(spec: &LayerSpec) -> u64 {
    let r = spec.rank_mode.rank();
    let weights = match spec.kind {
        LayerKind::Fc { m, n, tied } => {
            let w = match r {
                None => (m * n) as u64,
                Some(r) => (r * (m + n)) as u64,
            };
            if tied {
                0
            } else {
                w
            }
        }
        LayerKind::Conv2d { c_in, c_out, k, .. } => match r {
            None => (c_in * c_out * k * k) as u64,
            Some(r) => (c_in * r * k * k + r * c_out) as u64,
        },
        LayerKind::LstmCell { d, h } => match r {
            None => (4 * (d * h + h * h)) as u64,
            Some(r) => (4 * d * r + 12 * h * r) as u64,
        },
        LayerKind::MultiHeadAttention { heads, head_dim, .. } => {
            let (p, d) = (heads, head_dim);
            match r {
                None => (4 * p * p * d * d) as u64,
                Some(r) => ((3 * p + 5) * p * r * d) as u64,
            }
        }
        LayerKind::Ffn { heads, head_dim } => {
            let (p, d) = (heads, head_dim);
            match r {
                None => (8 * p * p * d * d) as u64,
                Some(r) => (10 * p * d * r) as u64,
            }
        }
        LayerKind::BatchNorm { features } | LayerKind::LayerNorm { features } => {
            (2 * features) as u64
        }
        LayerKind::Embedding { vocab, dim } => (vocab * dim) as u64,
        LayerKind::Relu | LayerKind::Flatten | LayerKind::Pool { .. } | LayerKind::Dropout { .. } => 0,
    };
    let biases = if spec.has_bias {
        match spec.kind {
            LayerKind::Fc { n, .. } => n as u64,
            LayerKind::Conv2d { c_out, .. } => c_out as u64,
            LayerKind::LstmCell { h, .. } => (4 * h) as u64,
            LayerKind::Ffn { heads, head_dim } => (5 * heads * head_dim) as u64,
            _ => 0,
        }
    } else {
        0
    };
    weights + biases
}

/// Forward-pass multiply-accumulate count for one input sample.
///
/// `input_shape` is the per-sample shape the layer sees: `[m]` or `[rows, m]`
/// for FC, `[c_in, H, W]` for conv/pool/2-D BN, `[T, d]` for LSTM (T tokens),
/// `[N, model]` for attention/FFN/LayerNorm.
pub fn mac_count(spec: &LayerSpec, input_shape: &[usize]) -> Result<u64> {
    let numel: usize = input_shape.iter().product();
    let r = spec.rank_mode.rank();
    Ok(match spec.kind {
        LayerKind::Fc { m, n, .. } => {
            let rows = match input_shape.len() {
                1 => 1,
                2 => input_shape[0],
                _ => {
                    return Err(Error::Dimension(format!(
                        "fc mac_count: bad input shape {:?}",
                        input_shape
                    )))
                }
            };
            let per_row = match r {
                None => (m * n) as u64,
                Some(r) => (r * (m + n)) as u64,
            };
            rows as u64 * per_row
        }
        LayerKind::Conv2d {
            c_in,
            c_out,
            k,
            stride,
            pad,
        } => {
            if input_shape.len() != 3 || input_shape[0] != c_in {
                return Err(Error::Dimension(format!(
                    "conv mac_count: bad input shape {:?}",
                    input_shape
                )));
            }
            let ho = conv_out_dim(input_shape[1], k, stride, pad)?;
            let wo = conv_out_dim(input_shape[2], k, stride, pad)?;
            let positions = (ho * wo) as u64;
            match r {
                None => (c_in * c_out * k * k) as u64 * positions,
                Some(r) => ((r * c_in * k * k) as u64 + (r * c_out) as u64) * positions,
            }
        }
        LayerKind::LstmCell { d, h } => {
            let tokens = match input_shape.len() {
                1 => 1,
                2 => input_shape[0],
                _ => {
                    return Err(Error::Dimension(format!(
                        "lstm mac_count: bad input shape {:?}",
                        input_shape
                    )))
                }
            };
            let per_token = match r {
                None => (4 * (d * h + h * h)) as u64,
                Some(r) => (4 * d * r + 12 * h * r) as u64,
            };
            tokens as u64 * per_token
        }
        LayerKind::MultiHeadAttention { heads, head_dim, .. } => {
            let (p, d) = (heads as u64, head_dim as u64);
            let n = input_shape[0] as u64;
            let model = p * d;
            let scores = 2 * p * n * n * d;
            match r {
                None => 4 * n * model * model + scores,
                Some(r) => {
                    let r = r as u64;
                    3 * p * n * r * (model + d) + 2 * n * model * r + scores
                }
            }
        }
        LayerKind::Ffn { heads, head_dim } => {
            let (p, d) = (heads as u64, head_dim as u64);
            let n = input_shape[0] as u64;
            let model = p * d;
            match r {
                None => 8 * n * model * model,
                Some(r) => 10 * n * model * r as u64,
            }
        }
        LayerKind::BatchNorm { .. } | LayerKind::LayerNorm { .. } => 2 * numel as u64,
        LayerKind::Relu | LayerKind::Pool { .. } => numel as u64,
        LayerKind::Embedding { .. } | LayerKind::Dropout { .. } | LayerKind::Flatten => 0,
    })
}

/// Shape of a layer's per-sample output given its per-sample input, used by
/// the model walkers for validation and MAC accounting.
pub fn output_shape(spec: &LayerSpec, input_shape: &[usize]) -> Result<Vec<usize>> {
    Ok(match spec.kind {
        LayerKind::Fc { m, n, .. } => match input_shape {
            [mm] if *mm == m => vec![n],
            [rows, mm] if *mm == m => vec![*rows, n],
            _ => {
                return Err(Error::Dimension(format!(
                    "fc `{}`: input {:?} does not match m={}",
                    spec.name, input_shape, m
                )))
            }
        },
        LayerKind::Conv2d {
            c_in,
            c_out,
            k,
            stride,
            pad,
        } => {
            if input_shape.len() != 3 || input_shape[0] != c_in {
                return Err(Error::Dimension(format!(
                    "conv `{}`: input {:?} does not match c_in={}",
                    spec.name, input_shape, c_in
                )));
            }
            vec![
                c_out,
                conv_out_dim(input_shape[1], k, stride, pad)?,
                conv_out_dim(input_shape[2], k, stride, pad)?,
            ]
        }
        LayerKind::LstmCell { d, h } => match input_shape {
            [t, dd] if *dd == d => vec![*t, h],
            _ => {
                return Err(Error::Dimension(format!(
                    "lstm `{}`: input {:?} does not match d={}",
                    spec.name, input_shape, d
                )))
            }
        },
        LayerKind::MultiHeadAttention { heads, head_dim, .. } => {
            let model = heads * head_dim;
            match input_shape {
                [n, mm] if *mm == model => vec![*n, model],
                _ => {
                    return Err(Error::Dimension(format!(
                        "attention `{}`: input {:?} does not match model={}",
                        spec.name, input_shape, model
                    )))
                }
            }
        }
        LayerKind::Ffn { heads, head_dim } => {
            let model = heads * head_dim;
            match input_shape {
                [n, mm] if *mm == model => vec![*n, model],
                _ => {
                    return Err(Error::Dimension(format!(
                        "ffn `{}`: input {:?} does not match model={}",
                        spec.name, input_shape, model
                    )))
                }
            }
        }
        LayerKind::BatchNorm { features } => {
            let ok = matches!(input_shape, [c] if *c == features)
                || matches!(input_shape, [c, _, _] if *c == features);
            if !ok {
                return Err(Error::Dimension(format!(
                    "batch_norm `{}`: input {:?} does not match features={}",
                    spec.name, input_shape, features
                )));
            }
            input_shape.to_vec()
        }
        LayerKind::LayerNorm { features } => {
            let ok = matches!(input_shape, [_, f] if *f == features)
                || matches!(input_shape, [f] if *f == features);
            if !ok {
                return Err(Error::Dimension(format!(
                    "layer_norm `{}`: input {:?} does not match features={}",
                    spec.name, input_shape, features
                )));
            }
            input_shape.to_vec()
        }
        LayerKind::Embedding { dim, .. } => match input_shape {
            [n] => vec![*n, dim],
            _ => {
                return Err(Error::Dimension(format!(
                    "embedding `{}`: input {:?} should be [tokens]",
                    spec.name, input_shape
                )))
            }
        },
        LayerKind::Relu | LayerKind::Dropout { .. } => input_shape.to_vec(),
        LayerKind::Flatten => {
            if input_shape.len() != 3 {
                return Err(Error::Dimension(format!(
                    "flatten `{}`: input {:?} should be [C, H, W]",
                    spec.name, input_shape
                )));
            }
            vec![input_shape.iter().product()]
        }
        LayerKind::Pool { op, k, stride, pad } => {
            if input_shape.len() != 3 {
                return Err(Error::Dimension(format!(
                    "pool `{}`: input {:?} should be [C, H, W]",
                    spec.name, input_shape
                )));
            }
            match op {
                super::PoolOp::GlobalAvg => vec![input_shape[0]],
                _ => vec![
                    input_shape[0],
                    conv_out_dim(input_shape[1], k, stride, pad)?,
                    conv_out_dim(input_shape[2], k, stride, pad)?,
                ],
            }
        }
    })
}

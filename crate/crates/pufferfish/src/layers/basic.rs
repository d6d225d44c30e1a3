use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Cache, Layer, LayerKind, Mode, ParamGrads, PoolOp};
use crate::error::{Error, Result};
use crate::numerics::{conv_out_dim, Tensor};

pub(crate) fn forward_relu(layer: &mut Layer, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let out = x.map(|v| v.max(0.0));
    if mode == Mode::Train {
        layer.state.cache = Some(Cache::Relu(
            x.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
        ));
    } else {
        layer.state.cache = None;
    }
    Ok(out)
}

pub(crate) fn backward_relu(layer: &mut Layer, g: &Tensor) -> Result<(Option<Tensor>, ParamGrads)> {
    let Some(Cache::Relu(mask)) = layer.state.cache.take() else {
        return Err(Error::State(format!("relu `{}`: no cache", layer.spec.name)));
    };
    let mut dx = g.clone();
    for (d, m) in dx.data_mut().iter_mut().zip(&mask) {
        *d *= m;
    }
    Ok((Some(dx), Vec::new()))
}

#[derive(Clone, Debug)]
pub(crate) struct MaxPoolCache {
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

pub(crate) fn forward_pool(layer: &mut Layer, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let LayerKind::Pool { op, k, stride, pad } = layer.spec.kind else {
        unreachable!()
    };
    if x.ndim() != 4 {
        return Err(Error::Dimension(format!(
            "pool `{}` expects (batch, C, H, W), got {:?}",
            layer.spec.name,
            x.shape()
        )));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    match op {
        PoolOp::GlobalAvg => {
            let mut out = Tensor::zeros(&[b, c]);
            let hw = h * w;
            for s in 0..b {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    out.data_mut()[s * c + ch] =
                        x.data()[base..base + hw].iter().sum::<f64>() / hw as f64;
                }
            }
            if mode == Mode::Train {
                layer.state.cache = Some(Cache::AvgPool(x.shape().to_vec()));
            }
            Ok(out)
        }
        PoolOp::Max | PoolOp::Avg => {
            let h_out = conv_out_dim(h, k, stride, pad)?;
            let w_out = conv_out_dim(w, k, stride, pad)?;
            let mut out = Tensor::zeros(&[b, c, h_out, w_out]);
            let mut argmax = vec![0usize; b * c * h_out * w_out];
            for s in 0..b {
                for ch in 0..c {
                    let plane = (s * c + ch) * h * w;
                    for oy in 0..h_out {
                        for ox in 0..w_out {
                            let oidx = ((s * c + ch) * h_out + oy) * w_out + ox;
                            match op {
                                PoolOp::Max => {
                                    let mut best = f64::NEG_INFINITY;
                                    let mut best_idx = 0usize;
                                    for ky in 0..k {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let idx = plane + iy as usize * w + ix as usize;
                                            if x.data()[idx] > best {
                                                best = x.data()[idx];
                                                best_idx = idx;
                                            }
                                        }
                                    }
                                    out.data_mut()[oidx] = best;
                                    argmax[oidx] = best_idx;
                                }
                                PoolOp::Avg => {
                                    let mut sum = 0.0;
                                    for ky in 0..k {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            sum += x.data()[plane + iy as usize * w + ix as usize];
                                        }
                                    }
                                    out.data_mut()[oidx] = sum / (k * k) as f64;
                                }
                                PoolOp::GlobalAvg => unreachable!(),
                            }
                        }
                    }
                }
            }
            if mode == Mode::Train {
                layer.state.cache = Some(match op {
                    PoolOp::Max => Cache::MaxPool(MaxPoolCache {
                        argmax,
                        in_shape: x.shape().to_vec(),
                    }),
                    _ => Cache::AvgPool(x.shape().to_vec()),
                });
            }
            Ok(out)
        }
    }
}

pub(crate) fn backward_pool(layer: &mut Layer, g: &Tensor) -> Result<(Option<Tensor>, ParamGrads)> {
    let LayerKind::Pool { op, k, stride, pad } = layer.spec.kind else {
        unreachable!()
    };
    match layer.state.cache.take() {
        Some(Cache::MaxPool(cache)) => {
            let mut dx = Tensor::zeros(&cache.in_shape);
            for (oidx, &iidx) in cache.argmax.iter().enumerate() {
                dx.data_mut()[iidx] += g.data()[oidx];
            }
            Ok((Some(dx), Vec::new()))
        }
        Some(Cache::AvgPool(in_shape)) => {
            let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
            let mut dx = Tensor::zeros(&in_shape);
            match op {
                PoolOp::GlobalAvg => {
                    let hw = (h * w) as f64;
                    for s in 0..b {
                        for ch in 0..c {
                            let gv = g.data()[s * c + ch] / hw;
                            let base = (s * c + ch) * h * w;
                            for i in 0..h * w {
                                dx.data_mut()[base + i] += gv;
                            }
                        }
                    }
                }
                PoolOp::Avg => {
                    let h_out = conv_out_dim(h, k, stride, pad)?;
                    let w_out = conv_out_dim(w, k, stride, pad)?;
                    let kk = (k * k) as f64;
                    for s in 0..b {
                        for ch in 0..c {
                            let plane = (s * c + ch) * h * w;
                            for oy in 0..h_out {
                                for ox in 0..w_out {
                                    let gv =
                                        g.data()[((s * c + ch) * h_out + oy) * w_out + ox] / kk;
                                    for ky in 0..k {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            dx.data_mut()
                                                [plane + iy as usize * w + ix as usize] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                PoolOp::Max => unreachable!(),
            }
            Ok((Some(dx), Vec::new()))
        }
        _ => Err(Error::State(format!("pool `{}`: no cache", layer.spec.name))),
    }
}

pub(crate) fn forward_dropout(layer: &mut Layer, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let LayerKind::Dropout { p } = layer.spec.kind else {
        unreachable!()
    };
    if mode == Mode::Eval || p == 0.0 {
        layer.state.cache = None;
        return Ok(x.clone());
    }
    // Inverted dropout with a per-layer counted stream: call n of this layer
    // always sees the same mask for a given seed.
    let mut rng =
        ChaCha8Rng::seed_from_u64(layer.state.dropout_seed ^ layer.state.dropout_calls.wrapping_mul(0x9e3779b97f4a7c15));
    layer.state.dropout_calls += 1;
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mut out = x.clone();
    for (o, m) in out.data_mut().iter_mut().zip(&mask) {
        *o *= m;
    }
    layer.state.cache = Some(Cache::Dropout(mask));
    Ok(out)
}

pub(crate) fn backward_dropout(layer: &mut Layer, g: &Tensor) -> Result<(Option<Tensor>, ParamGrads)> {
    let Some(Cache::Dropout(mask)) = layer.state.cache.take() else {
        return Err(Error::State(format!(
            "dropout `{}`: no cache",
            layer.spec.name
        )));
    };
    let mut dx = g.clone();
    for (d, m) in dx.data_mut().iter_mut().zip(&mask) {
        *d *= m;
    }
    Ok((Some(dx), Vec::new()))
}

pub(crate) fn forward_embedding(layer: &mut Layer, ids: &[usize], mode: Mode) -> Result<Tensor> {
    let LayerKind::Embedding { vocab, dim } = layer.spec.kind else {
        unreachable!()
    };
    let table = layer.state.param("weight")?;
    let mut out = Tensor::zeros(&[ids.len(), dim]);
    for (row, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(Error::Argument(format!(
                "embedding `{}`: token id {} >= vocab {}",
                layer.spec.name, id, vocab
            )));
        }
        out.data_mut()[row * dim..(row + 1) * dim]
            .copy_from_slice(&table.data()[id * dim..(id + 1) * dim]);
    }
    layer.state.cache = match mode {
        Mode::Train => Some(Cache::Embedding(ids.to_vec())),
        Mode::Eval => None,
    };
    Ok(out)
}

pub(crate) fn backward_embedding(
    layer: &mut Layer,
    g: &Tensor,
) -> Result<(Option<Tensor>, ParamGrads)> {
    let Some(Cache::Embedding(ids)) = layer.state.cache.take() else {
        return Err(Error::State(format!(
            "embedding `{}`: no cache",
            layer.spec.name
        )));
    };
    let LayerKind::Embedding { vocab, dim } = layer.spec.kind else {
        unreachable!()
    };
    let mut dw = Tensor::zeros(&[vocab, dim]);
    for (row, &id) in ids.iter().enumerate() {
        for j in 0..dim {
            dw.data_mut()[id * dim + j] += g.data()[row * dim + j];
        }
    }
    Ok((None, vec![("weight".into(), dw)]))
}

pub(crate) fn forward_flatten(layer: &mut Layer, x: &Tensor, mode: Mode) -> Result<Tensor> {
    if x.ndim() != 4 {
        return Err(Error::Dimension(format!(
            "flatten `{}` expects (batch, C, H, W), got {:?}",
            layer.spec.name,
            x.shape()
        )));
    }
    let b = x.shape()[0];
    let rest = x.len() / b;
    if mode == Mode::Train {
        layer.state.cache = Some(Cache::Flatten(x.shape().to_vec()));
    }
    Ok(Tensor::new(vec![b, rest], x.data().to_vec())?)
}

pub(crate) fn backward_flatten(layer: &mut Layer, g: &Tensor) -> Result<(Option<Tensor>, ParamGrads)> {
    let Some(Cache::Flatten(in_shape)) = layer.state.cache.take() else {
        return Err(Error::State(format!(
            "flatten `{}`: no cache",
            layer.spec.name
        )));
    };
    Ok((
        Some(Tensor::new(in_shape, g.data().to_vec())?),
        Vec::new(),
    ))
}

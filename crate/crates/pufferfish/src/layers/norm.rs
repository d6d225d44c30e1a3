use super::{Cache, Layer, LayerKind, Mode, ParamGrads};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;
pub(crate) const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub(crate) struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    count: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct LnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

/// Iterates the flat indices belonging to channel `c` of a (B, C) or
/// (B, C, H, W) tensor in ascending order, keeping reductions deterministic.
fn channel_indices(shape: &[usize], c: usize) -> impl Iterator<Item = usize> + '_ {
    let (b, ch, spatial) = match shape.len() {
        2 => (shape[0], shape[1], 1),
        4 => (shape[0], shape[1], shape[2] * shape[3]),
        _ => unreachable!(),
    };
    (0..b).flat_map(move |s| {
        let base = (s * ch + c) * spatial;
        base..base + spatial
    })
}

pub(crate) fn forward_bn(layer: &mut Layer, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let LayerKind::BatchNorm { features } = layer.spec.kind else {
        unreachable!()
    };
    let ok_shape = match x.ndim() {
        2 => x.shape()[1] == features,
        4 => x.shape()[1] == features,
        _ => false,
    };
    if !ok_shape {
        return Err(Error::Dimension(format!(
            "batch_norm `{}` expects {} channels, got {:?}",
            layer.spec.name,
            features,
            x.shape()
        )));
    }
    let batch = x.shape()[0];
    let count = x.len() / features;
    let gamma = layer.state.param("weight")?.clone();
    let beta = layer.state.param("bias")?.clone();
    let mut out = Tensor::zeros(x.shape());

    match mode {
        Mode::Train => {
            if batch < 2 {
                return Err(Error::Argument(format!(
                    "batch_norm `{}`: train mode needs batch size >= 2, got {}",
                    layer.spec.name, batch
                )));
            }
            let mut xhat = Tensor::zeros(x.shape());
            let mut inv_std = vec![0.0; features];
            let mut batch_mean = vec![0.0; features];
            let mut batch_var = vec![0.0; features];
            for c in 0..features {
                let mut sum = 0.0;
                for i in channel_indices(x.shape(), c) {
                    sum += x.data()[i];
                }
                let mean = sum / count as f64;
                let mut var_sum = 0.0;
                for i in channel_indices(x.shape(), c) {
                    let d = x.data()[i] - mean;
                    var_sum += d * d;
                }
                let var = var_sum / count as f64;
                let istd = 1.0 / (var + BN_EPS).sqrt();
                for i in channel_indices(x.shape(), c) {
                    let xh = (x.data()[i] - mean) * istd;
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = gamma.data()[c] * xh + beta.data()[c];
                }
                inv_std[c] = istd;
                batch_mean[c] = mean;
                // running update uses the unbiased variance
                batch_var[c] = var_sum / (count as f64 - 1.0);
            }
            {
                let rm = layer.state.param_mut("running_mean")?;
                for c in 0..features {
                    rm.data_mut()[c] = (1.0 - BN_MOMENTUM) * rm.data()[c] + BN_MOMENTUM * batch_mean[c];
                }
            }
            {
                let rv = layer.state.param_mut("running_var")?;
                for c in 0..features {
                    rv.data_mut()[c] = (1.0 - BN_MOMENTUM) * rv.data()[c] + BN_MOMENTUM * batch_var[c];
                }
            }
            layer.state.cache = Some(Cache::BatchNorm(BnCache { xhat, inv_std, count }));
        }
        Mode::Eval => {
            let rm = layer.state.param("running_mean")?.clone();
            let rv = layer.state.param("running_var")?.clone();
            for c in 0..features {
                let istd = 1.0 / (rv.data()[c] + BN_EPS).sqrt();
                for i in channel_indices(x.shape(), c) {
                    out.data_mut()[i] =
                        gamma.data()[c] * (x.data()[i] - rm.data()[c]) * istd + beta.data()[c];
                }
            }
            layer.state.cache = None;
        }
    }
    Ok(out)
}

pub(crate) fn backward_bn(layer: &mut Layer, g: &Tensor) -> Result<(Option<Tensor>, ParamGrads)> {
    let Some(Cache::BatchNorm(cache)) = layer.state.cache.take() else {
        return Err(Error::State(format!(
            "batch_norm `{}`: no cache",
            layer.spec.name
        )));
    };
    let LayerKind::BatchNorm { features } = layer.spec.kind else {
        unreachable!()
    };
    let gamma = layer.state.param("weight")?.clone();
    let n = cache.count as f64;
    let mut dgamma = Tensor::zeros(&[features]);
    let mut dbeta = Tensor::zeros(&[features]);
    let mut dx = Tensor::zeros(g.shape());
    for c in 0..features {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for i in channel_indices(g.shape(), c) {
            sum_g += g.data()[i];
            sum_gx += g.data()[i] * cache.xhat.data()[i];
        }
        dgamma.data_mut()[c] = sum_gx;
        dbeta.data_mut()[c] = sum_g;
        let scale = gamma.data()[c] * cache.inv_std[c] / n;
        for i in channel_indices(g.shape(), c) {
            dx.data_mut()[i] =
                scale * (n * g.data()[i] - sum_g - cache.xhat.data()[i] * sum_gx);
        }
    }
    Ok((
        Some(dx),
        vec![("weight".into(), dgamma), ("bias".into(), dbeta)],
    ))
}

pub(crate) fn forward_ln(layer: &mut Layer, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let LayerKind::LayerNorm { features } = layer.spec.kind else {
        unreachable!()
    };
    if x.ndim() != 2 || x.cols() != features {
        return Err(Error::Dimension(format!(
            "layer_norm `{}` expects (rows, {}), got {:?}",
            layer.spec.name,
            features,
            x.shape()
        )));
    }
    let gamma = layer.state.param("weight")?.clone();
    let beta = layer.state.param("bias")?.clone();
    let rows = x.rows();
    let f = features as f64;
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = vec![0.0; rows];
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / f;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = istd;
        for j in 0..features {
            let xh = (row[j] - mean) * istd;
            xhat.set2(i, j, xh);
            out.set2(i, j, gamma.data()[j] * xh + beta.data()[j]);
        }
    }
    layer.state.cache = match mode {
        Mode::Train => Some(Cache::LayerNorm(LnCache { xhat, inv_std })),
        Mode::Eval => None,
    };
    Ok(out)
}

pub(crate) fn backward_ln(layer: &mut Layer, g: &Tensor) -> Result<(Option<Tensor>, ParamGrads)> {
    let Some(Cache::LayerNorm(cache)) = layer.state.cache.take() else {
        return Err(Error::State(format!(
            "layer_norm `{}`: no cache",
            layer.spec.name
        )));
    };
    let LayerKind::LayerNorm { features } = layer.spec.kind else {
        unreachable!()
    };
    let gamma = layer.state.param("weight")?.clone();
    let f = features as f64;
    let rows = g.rows();
    let mut dgamma = Tensor::zeros(&[features]);
    let mut dbeta = Tensor::zeros(&[features]);
    let mut dx = Tensor::zeros(g.shape());
    for i in 0..rows {
        let mut sum_gg = 0.0;
        let mut sum_ggx = 0.0;
        for j in 0..features {
            let gg = g.at2(i, j) * gamma.data()[j];
            sum_gg += gg;
            sum_ggx += gg * cache.xhat.at2(i, j);
            dgamma.data_mut()[j] += g.at2(i, j) * cache.xhat.at2(i, j);
            dbeta.data_mut()[j] += g.at2(i, j);
        }
        let istd = cache.inv_std[i];
        for j in 0..features {
            let gg = g.at2(i, j) * gamma.data()[j];
            dx.set2(
                i,
                j,
                (istd / f) * (f * gg - sum_gg - cache.xhat.at2(i, j) * sum_ggx),
            );
        }
    }
    Ok((
        Some(dx),
        vec![("weight".into(), dgamma), ("bias".into(), dbeta)],
    ))
}

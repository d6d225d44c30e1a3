use super::{Cache, Layer, LayerKind, Mode, ParamGrads, RankMode};
use crate::error::{Error, Result};
use crate::numerics::{
    col2im, conv_out_dim, im2col, matmul, roll_conv_weight, unroll_conv_weight, Tensor,
};

#[derive(Clone, Debug)]
pub(crate) struct ConvCache {
    /// One im2col matrix per batch sample.
    cols: Vec<Tensor>,
    /// Thin conv output `(r, positions)` per sample, factorized form only.
    thin: Vec<Tensor>,
    in_hw: (usize, usize),
}

fn dims(layer: &Layer) -> (usize, usize, usize, usize, usize) {
    let LayerKind::Conv2d {
        c_in,
        c_out,
        k,
        stride,
        pad,
    } = layer.spec.kind
    else {
        unreachable!()
    };
    (c_in, c_out, k, stride, pad)
}

pub(crate) fn forward(layer: &mut Layer, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let (c_in, c_out, k, stride, pad) = dims(layer);
    if x.ndim() != 4 || x.shape()[1] != c_in {
        return Err(Error::Dimension(format!(
            "conv `{}` expects (batch, {c_in}, H, W), got {:?}",
            layer.spec.name,
            x.shape()
        )));
    }
    let (b, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let h_out = conv_out_dim(h, k, stride, pad)?;
    let w_out = conv_out_dim(w, k, stride, pad)?;
    let positions = h_out * w_out;

    // (c_out, c_in k^2) and, when factorized, (c_out, r) / (r, c_in k^2).
    let (wt, vt, ut) = match layer.spec.rank_mode {
        RankMode::Vanilla => {
            let wu = unroll_conv_weight(layer.state.param("weight")?)?;
            (Some(wu.transposed()), None, None)
        }
        RankMode::Factorized(_) => {
            let uu = unroll_conv_weight(layer.state.param("u")?)?;
            let v = layer.state.param("v")?;
            (None, Some(v.transposed()), Some(uu.transposed()))
        }
    };

    let mut out = Tensor::zeros(&[b, c_out, h_out, w_out]);
    let mut cols_cache = Vec::new();
    let mut thin_cache = Vec::new();
    for s in 0..b {
        let sample = Tensor::new(
            vec![c_in, h, w],
            x.data()[s * c_in * h * w..(s + 1) * c_in * h * w].to_vec(),
        )?;
        let cols = im2col(&sample, k, stride, pad)?;
        let y = match layer.spec.rank_mode {
            RankMode::Vanilla => matmul(wt.as_ref().unwrap(), &cols)?,
            RankMode::Factorized(_) => {
                let thin = matmul(ut.as_ref().unwrap(), &cols)?;
                let y = matmul(vt.as_ref().unwrap(), &thin)?;
                if mode == Mode::Train {
                    thin_cache.push(thin);
                }
                y
            }
        };
        out.data_mut()[s * c_out * positions..(s + 1) * c_out * positions]
            .copy_from_slice(y.data());
        if mode == Mode::Train {
            cols_cache.push(cols);
        }
    }
    if layer.spec.has_bias {
        let bias = layer.state.param("bias")?;
        for s in 0..b {
            for co in 0..c_out {
                let base = (s * c_out + co) * positions;
                let bv = bias.data()[co];
                for p in 0..positions {
                    out.data_mut()[base + p] += bv;
                }
            }
        }
    }
    layer.state.cache = match mode {
        Mode::Train => Some(Cache::Conv(ConvCache {
            cols: cols_cache,
            thin: thin_cache,
            in_hw: (h, w),
        })),
        Mode::Eval => None,
    };
    Ok(out)
}

pub(crate) fn backward(layer: &mut Layer, g: &Tensor) -> Result<(Option<Tensor>, ParamGrads)> {
    let Some(Cache::Conv(cache)) = layer.state.cache.take() else {
        return Err(Error::State(format!("conv `{}`: no cache", layer.spec.name)));
    };
    let (c_in, c_out, k, stride, pad) = dims(layer);
    let (h, w) = cache.in_hw;
    let b = cache.cols.len();
    let positions = g.shape()[2] * g.shape()[3];
    if g.shape()[0] != b || g.shape()[1] != c_out {
        return Err(Error::Dimension(format!(
            "conv `{}` backward: grad shape {:?} does not match batch {} x {}",
            layer.spec.name,
            g.shape(),
            b,
            c_out
        )));
    }

    let mut grad_x = Tensor::zeros(&[b, c_in, h, w]);
    let mut grads: ParamGrads = Vec::new();
    match layer.spec.rank_mode {
        RankMode::Vanilla => {
            let wu = unroll_conv_weight(layer.state.param("weight")?)?;
            let mut dw_unrolled = Tensor::zeros(&[c_in * k * k, c_out]);
            for s in 0..b {
                let gs = Tensor::new(
                    vec![c_out, positions],
                    g.data()[s * c_out * positions..(s + 1) * c_out * positions].to_vec(),
                )?;
                dw_unrolled.add_assign(&matmul(&cache.cols[s], &gs.transposed())?);
                let dcols = matmul(&wu, &gs)?;
                let dx = col2im(&dcols, c_in, h, w, k, stride, pad)?;
                grad_x.data_mut()[s * c_in * h * w..(s + 1) * c_in * h * w]
                    .copy_from_slice(dx.data());
            }
            grads.push(("weight".into(), roll_conv_weight(&dw_unrolled, c_in, k)?));
        }
        RankMode::Factorized(r) => {
            let uu = unroll_conv_weight(layer.state.param("u")?)?;
            let v = layer.state.param("v")?.clone();
            let mut du_unrolled = Tensor::zeros(&[c_in * k * k, r]);
            let mut dv = Tensor::zeros(&[r, c_out]);
            for s in 0..b {
                let gs = Tensor::new(
                    vec![c_out, positions],
                    g.data()[s * c_out * positions..(s + 1) * c_out * positions].to_vec(),
                )?;
                dv.add_assign(&matmul(&cache.thin[s], &gs.transposed())?);
                let dthin = matmul(&v, &gs)?;
                du_unrolled.add_assign(&matmul(&cache.cols[s], &dthin.transposed())?);
                let dcols = matmul(&uu, &dthin)?;
                let dx = col2im(&dcols, c_in, h, w, k, stride, pad)?;
                grad_x.data_mut()[s * c_in * h * w..(s + 1) * c_in * h * w]
                    .copy_from_slice(dx.data());
            }
            grads.push(("u".into(), roll_conv_weight(&du_unrolled, c_in, k)?));
            grads.push(("v".into(), dv));
        }
    }
    if layer.spec.has_bias {
        let mut db = Tensor::zeros(&[c_out]);
        for s in 0..b {
            for co in 0..c_out {
                let base = (s * c_out + co) * positions;
                db.data_mut()[co] += g.data()[base..base + positions].iter().sum::<f64>();
            }
        }
        grads.push(("bias".into(), db));
    }
    Ok((Some(grad_x), grads))
}

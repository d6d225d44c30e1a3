use super::{Cache, Layer, LayerKind, Mode, ParamGrads, RankMode};
use crate::error::{Error, Result};
use crate::numerics::{matmul, Tensor};

#[derive(Clone, Debug)]
pub(crate) struct FcCache {
    x: Tensor,
    /// `x * u` for the factorized form.
    xu: Option<Tensor>,
}

impl FcCache {
    pub(crate) fn tied(x: Tensor) -> Self {
        FcCache { x, xu: None }
    }

    pub(crate) fn into_input(self) -> Tensor {
        self.x
    }
}

pub(crate) fn add_row_bias(y: &mut Tensor, bias: &Tensor) {
    let n = y.cols();
    debug_assert_eq!(bias.len(), n);
    for row in 0..y.rows() {
        for j in 0..n {
            let v = y.at2(row, j) + bias.data()[j];
            y.set2(row, j, v);
        }
    }
}

pub(crate) fn column_sums(g: &Tensor) -> Tensor {
    let n = g.cols();
    let mut out = Tensor::zeros(&[n]);
    for i in 0..g.rows() {
        for j in 0..n {
            out.data_mut()[j] += g.at2(i, j);
        }
    }
    out
}

pub(crate) fn forward(layer: &mut Layer, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let LayerKind::Fc { m, tied, .. } = layer.spec.kind else {
        unreachable!()
    };
    if tied {
        return Err(Error::State(format!(
            "layer `{}`: tied weights are resolved by the model executor",
            layer.spec.name
        )));
    }
    if x.ndim() != 2 || x.cols() != m {
        return Err(Error::Dimension(format!(
            "fc `{}` expects (batch, {m}), got {:?}",
            layer.spec.name,
            x.shape()
        )));
    }
    let (mut y, xu) = match layer.spec.rank_mode {
        RankMode::Vanilla => (matmul(x, layer.state.param("weight")?)?, None),
        RankMode::Factorized(_) => {
            let xu = matmul(x, layer.state.param("u")?)?;
            (matmul(&xu, layer.state.param("v")?)?, Some(xu))
        }
    };
    if layer.spec.has_bias {
        add_row_bias(&mut y, layer.state.param("bias")?);
    }
    layer.state.cache = match mode {
        Mode::Train => Some(Cache::Fc(FcCache { x: x.clone(), xu })),
        Mode::Eval => None,
    };
    Ok(y)
}

pub(crate) fn backward(layer: &mut Layer, g: &Tensor) -> Result<(Option<Tensor>, ParamGrads)> {
    let Some(Cache::Fc(cache)) = layer.state.cache.take() else {
        return Err(Error::State(format!("fc `{}`: no cache", layer.spec.name)));
    };
    let mut grads: ParamGrads = Vec::new();
    let grad_x = match layer.spec.rank_mode {
        RankMode::Vanilla => {
            let w = layer.state.param("weight")?;
            grads.push(("weight".into(), matmul(&cache.x.transposed(), g)?));
            matmul(g, &w.transposed())?
        }
        RankMode::Factorized(_) => {
            let u = layer.state.param("u")?.clone();
            let v = layer.state.param("v")?.clone();
            let xu = cache.xu.as_ref().expect("factorized cache");
            let gv = matmul(g, &v.transposed())?;
            grads.push(("u".into(), matmul(&cache.x.transposed(), &gv)?));
            grads.push(("v".into(), matmul(&xu.transposed(), g)?));
            matmul(&gv, &u.transposed())?
        }
    };
    if layer.spec.has_bias {
        grads.push(("bias".into(), column_sums(g)));
    }
    Ok((Some(grad_x), grads))
}

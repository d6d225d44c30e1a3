//! Scaled dot-product multi-head attention and the position-wise FFN.
//!
//! Vanilla projections are stored fused as (model, model) matrices; the
//! factorized form keeps one (u, v) pair per head for q/k/v and a single
//! pair for the output projection, so head h's query is `(x u_q_h) v_q_h`
//! without ever materializing a full-width product.

use super::{Cache, Layer, LayerKind, Mode, ParamGrads, RankMode};
use crate::error::{Error, Result};
use crate::layers::fc::{add_row_bias, column_sums};
use crate::numerics::{matmul, Tensor};

#[derive(Clone, Debug)]
pub(crate) struct AttnCache {
    x: Tensor,
    memory: Tensor,
    q: Vec<Tensor>,
    k: Vec<Tensor>,
    v: Vec<Tensor>,
    attn: Vec<Tensor>,
    concat: Tensor,
    /// `x u` per (proj, head) keyed "wq"/"wk"/"wv", plus `concat u_o`.
    xu: Vec<(String, Tensor)>,
    cu: Option<Tensor>,
}

impl AttnCache {
    /// Post-softmax attention weights per head (test hook).
    pub(crate) fn attn_weights(&self) -> &[Tensor] {
        &self.attn
    }
}

#[derive(Clone, Debug)]
pub(crate) struct FfnCache {
    x: Tensor,
    mask: Vec<f64>,
    hidden: Tensor,
    xu1: Option<Tensor>,
    hu2: Option<Tensor>,
}

fn take_cols(t: &Tensor, start: usize, len: usize) -> Tensor {
    Tensor::from_fn_2d(t.rows(), len, |i, j| t.at2(i, start + j))
}

fn put_cols(dst: &mut Tensor, src: &Tensor, start: usize) {
    for i in 0..src.rows() {
        for j in 0..src.cols() {
            let v = dst.at2(i, start + j) + src.at2(i, j);
            dst.set2(i, start + j, v);
        }
    }
}

fn softmax_rows(scores: &mut Tensor) {
    let cols = scores.cols();
    for i in 0..scores.rows() {
        let row = &mut scores.data_mut()[i * cols..(i + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Per-head projections of `input` through `wq`/`wk`/`wv`, appending any
/// low-rank intermediates to `xu`.
fn project_heads(
    layer: &Layer,
    input: &Tensor,
    proj: &str,
    xu: &mut Vec<(String, Tensor)>,
) -> Result<Vec<Tensor>> {
    let LayerKind::MultiHeadAttention { heads, head_dim, .. } = layer.spec.kind else {
        unreachable!()
    };
    match layer.spec.rank_mode {
        RankMode::Vanilla => {
            let full = matmul(input, layer.state.param(proj)?)?;
            Ok((0..heads)
                .map(|h| take_cols(&full, h * head_dim, head_dim))
                .collect())
        }
        RankMode::Factorized(_) => {
            let mut out = Vec::with_capacity(heads);
            for h in 0..heads {
                let u = layer.state.param(&format!("{proj}_u_h{h}"))?;
                let v = layer.state.param(&format!("{proj}_v_h{h}"))?;
                let iu = matmul(input, u)?;
                out.push(matmul(&iu, v)?);
                xu.push((format!("{proj}_h{h}"), iu));
            }
            Ok(out)
        }
    }
}

fn attention_core(
    layer: &mut Layer,
    x: &Tensor,
    memory: &Tensor,
    mode: Mode,
) -> Result<Tensor> {
    let LayerKind::MultiHeadAttention {
        heads,
        head_dim,
        causal,
    } = layer.spec.kind
    else {
        unreachable!()
    };
    let model = heads * head_dim;
    if x.ndim() != 2 || x.cols() != model || memory.cols() != model {
        return Err(Error::Dimension(format!(
            "attention `{}` expects (N, {model}), got {:?} / {:?}",
            layer.spec.name,
            x.shape(),
            memory.shape()
        )));
    }
    let n_q = x.rows();
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut xu = Vec::new();
    let q = project_heads(layer, x, "wq", &mut xu)?;
    let k = project_heads(layer, memory, "wk", &mut xu)?;
    let v = project_heads(layer, memory, "wv", &mut xu)?;

    let mut concat = Tensor::zeros(&[n_q, model]);
    let mut attn_cache = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut scores = matmul(&q[h], &k[h].transposed())?.scaled(scale);
        if causal {
            for i in 0..scores.rows() {
                for j in (i + 1)..scores.cols() {
                    scores.set2(i, j, f64::NEG_INFINITY);
                }
            }
        }
        softmax_rows(&mut scores);
        let out_h = matmul(&scores, &v[h])?;
        put_cols(&mut concat, &out_h, h * head_dim);
        attn_cache.push(scores);
    }

    let (y, cu) = match layer.spec.rank_mode {
        RankMode::Vanilla => (matmul(&concat, layer.state.param("wo")?)?, None),
        RankMode::Factorized(_) => {
            let cu = matmul(&concat, layer.state.param("wo_u")?)?;
            (matmul(&cu, layer.state.param("wo_v")?)?, Some(cu))
        }
    };
    layer.state.cache = match mode {
        Mode::Train => Some(Cache::Attention(AttnCache {
            x: x.clone(),
            memory: memory.clone(),
            q,
            k,
            v,
            attn: attn_cache,
            concat,
            xu,
            cu,
        })),
        Mode::Eval => None,
    };
    Ok(y)
}

pub(crate) fn forward_self(layer: &mut Layer, x: &Tensor, mode: Mode) -> Result<Tensor> {
    attention_core(layer, x, x, mode)
}

fn backward_projection(
    layer: &Layer,
    proj: &str,
    head: usize,
    input: &Tensor,
    d_out: &Tensor,
    xu: &[(String, Tensor)],
    grads: &mut ParamGrads,
) -> Result<Tensor> {
    match layer.spec.rank_mode {
        RankMode::Vanilla => unreachable!("fused path handled separately"),
        RankMode::Factorized(_) => {
            let uname = format!("{proj}_u_h{head}");
            let vname = format!("{proj}_v_h{head}");
            let u = layer.state.param(&uname)?;
            let v = layer.state.param(&vname)?;
            let key = format!("{proj}_h{head}");
            let iu = &xu.iter().find(|(n, _)| *n == key).expect("xu cached").1;
            let dv = matmul(&iu.transposed(), d_out)?;
            let t = matmul(d_out, &v.transposed())?;
            let du = matmul(&input.transposed(), &t)?;
            let d_input = matmul(&t, &u.transposed())?;
            grads.push((uname, du));
            grads.push((vname, dv));
            Ok(d_input)
        }
    }
}

pub(crate) fn backward_self(layer: &mut Layer, gy: &Tensor) -> Result<(Option<Tensor>, ParamGrads)> {
    let Some(Cache::Attention(cache)) = layer.state.cache.take() else {
        return Err(Error::State(format!(
            "attention `{}`: no cache",
            layer.spec.name
        )));
    };
    let LayerKind::MultiHeadAttention { heads, head_dim, .. } = layer.spec.kind else {
        unreachable!()
    };
    let model = heads * head_dim;
    let n = cache.x.rows();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut grads: ParamGrads = Vec::new();

    // output projection
    let dconcat = match layer.spec.rank_mode {
        RankMode::Vanilla => {
            let wo = layer.state.param("wo")?;
            grads.push(("wo".into(), matmul(&cache.concat.transposed(), gy)?));
            matmul(gy, &wo.transposed())?
        }
        RankMode::Factorized(_) => {
            let u = layer.state.param("wo_u")?.clone();
            let v = layer.state.param("wo_v")?.clone();
            let cu = cache.cu.as_ref().expect("cu cached");
            let gu = matmul(gy, &v.transposed())?;
            grads.push(("wo_u".into(), matmul(&cache.concat.transposed(), &gu)?));
            grads.push(("wo_v".into(), matmul(&cu.transposed(), gy)?));
            matmul(&gu, &u.transposed())?
        }
    };

    // per-head attention chain
    let mut dq_full = Tensor::zeros(&[n, model]);
    let mut dk_full = Tensor::zeros(&[n, model]);
    let mut dv_full = Tensor::zeros(&[n, model]);
    let mut dx = Tensor::zeros(&[n, model]);
    for h in 0..heads {
        let d_out_h = take_cols(&dconcat, h * head_dim, head_dim);
        let attn = &cache.attn[h];
        let mut d_attn = matmul(&d_out_h, &cache.v[h].transposed())?;
        let dv_h = matmul(&attn.transposed(), &d_out_h)?;
        // softmax backward row by row; masked entries have attn == 0
        let cols = d_attn.cols();
        for i in 0..d_attn.rows() {
            let dot: f64 = (0..cols).map(|j| d_attn.at2(i, j) * attn.at2(i, j)).sum();
            for j in 0..cols {
                let v = attn.at2(i, j) * (d_attn.at2(i, j) - dot) * scale;
                d_attn.set2(i, j, v);
            }
        }
        let dq_h = matmul(&d_attn, &cache.k[h])?;
        let dk_h = matmul(&d_attn.transposed(), &cache.q[h])?;
        match layer.spec.rank_mode {
            RankMode::Vanilla => {
                put_cols(&mut dq_full, &dq_h, h * head_dim);
                put_cols(&mut dk_full, &dk_h, h * head_dim);
                put_cols(&mut dv_full, &dv_h, h * head_dim);
            }
            RankMode::Factorized(_) => {
                dx.add_assign(&backward_projection(
                    layer, "wq", h, &cache.x, &dq_h, &cache.xu, &mut grads,
                )?);
                dx.add_assign(&backward_projection(
                    layer, "wk", h, &cache.memory, &dk_h, &cache.xu, &mut grads,
                )?);
                dx.add_assign(&backward_projection(
                    layer, "wv", h, &cache.memory, &dv_h, &cache.xu, &mut grads,
                )?);
            }
        }
    }
    if layer.spec.rank_mode == RankMode::Vanilla {
        for (proj, dfull) in [("wq", &dq_full), ("wk", &dk_full), ("wv", &dv_full)] {
            let w = layer.state.param(proj)?;
            dx.add_assign(&matmul(dfull, &w.transposed())?);
            grads.push((proj.into(), matmul(&cache.x.transposed(), dfull)?));
        }
        // order the fused grads as declared: wq, wk, wv, wo
        grads.rotate_left(1);
    }
    Ok((Some(dx), grads))
}

pub(crate) fn forward_ffn(layer: &mut Layer, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let LayerKind::Ffn { heads, head_dim } = layer.spec.kind else {
        unreachable!()
    };
    let model = heads * head_dim;
    if x.ndim() != 2 || x.cols() != model {
        return Err(Error::Dimension(format!(
            "ffn `{}` expects (N, {model}), got {:?}",
            layer.spec.name,
            x.shape()
        )));
    }
    let (mut h1, xu1) = match layer.spec.rank_mode {
        RankMode::Vanilla => (matmul(x, layer.state.param("w1")?)?, None),
        RankMode::Factorized(_) => {
            let xu = matmul(x, layer.state.param("w1_u")?)?;
            (matmul(&xu, layer.state.param("w1_v")?)?, Some(xu))
        }
    };
    if layer.spec.has_bias {
        add_row_bias(&mut h1, layer.state.param("b1")?);
    }
    let mask: Vec<f64> = h1.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    let hidden = h1.map(|v| v.max(0.0));
    let (mut y, hu2) = match layer.spec.rank_mode {
        RankMode::Vanilla => (matmul(&hidden, layer.state.param("w2")?)?, None),
        RankMode::Factorized(_) => {
            let hu = matmul(&hidden, layer.state.param("w2_u")?)?;
            (matmul(&hu, layer.state.param("w2_v")?)?, Some(hu))
        }
    };
    if layer.spec.has_bias {
        add_row_bias(&mut y, layer.state.param("b2")?);
    }
    layer.state.cache = match mode {
        Mode::Train => Some(Cache::Ffn(FfnCache {
            x: x.clone(),
            mask,
            hidden,
            xu1,
            hu2,
        })),
        Mode::Eval => None,
    };
    Ok(y)
}

pub(crate) fn backward_ffn(layer: &mut Layer, gy: &Tensor) -> Result<(Option<Tensor>, ParamGrads)> {
    let Some(Cache::Ffn(cache)) = layer.state.cache.take() else {
        return Err(Error::State(format!("ffn `{}`: no cache", layer.spec.name)));
    };
    let mut grads: ParamGrads = Vec::new();
    let dhidden = match layer.spec.rank_mode {
        RankMode::Vanilla => {
            let w2 = layer.state.param("w2")?;
            grads.push(("w2".into(), matmul(&cache.hidden.transposed(), gy)?));
            matmul(gy, &w2.transposed())?
        }
        RankMode::Factorized(_) => {
            let u2 = layer.state.param("w2_u")?.clone();
            let v2 = layer.state.param("w2_v")?.clone();
            let hu2 = cache.hu2.as_ref().expect("hu2 cached");
            let t2 = matmul(gy, &v2.transposed())?;
            grads.push(("w2_u".into(), matmul(&cache.hidden.transposed(), &t2)?));
            grads.push(("w2_v".into(), matmul(&hu2.transposed(), gy)?));
            matmul(&t2, &u2.transposed())?
        }
    };
    if layer.spec.has_bias {
        grads.push(("b2".into(), column_sums(gy)));
    }
    let mut dh1 = dhidden;
    for (d, m) in dh1.data_mut().iter_mut().zip(&cache.mask) {
        *d *= m;
    }
    let dx = match layer.spec.rank_mode {
        RankMode::Vanilla => {
            let w1 = layer.state.param("w1")?;
            grads.push(("w1".into(), matmul(&cache.x.transposed(), &dh1)?));
            matmul(&dh1, &w1.transposed())?
        }
        RankMode::Factorized(_) => {
            let u1 = layer.state.param("w1_u")?.clone();
            let v1 = layer.state.param("w1_v")?.clone();
            let xu1 = cache.xu1.as_ref().expect("xu1 cached");
            let t1 = matmul(&dh1, &v1.transposed())?;
            grads.push(("w1_u".into(), matmul(&cache.x.transposed(), &t1)?));
            grads.push(("w1_v".into(), matmul(&xu1.transposed(), &dh1)?));
            matmul(&t1, &u1.transposed())?
        }
    };
    if layer.spec.has_bias {
        grads.push(("b1".into(), column_sums(&dh1)));
    }
    Ok((Some(dx), grads))
}

//! Sequence-model builders: the 2-layer LSTM language model, the 6+6
//! encoder-decoder transformer, and their toy counterparts.
//!
//! The big transformer keeps its attention projections as fused
//! (model x model) FC layers, mirroring how such stacks are implemented in
//! practice; an attention-aware executor wires them together for forward
//! smoke tests. The toy transformer instead uses the dedicated attention /
//! FFN layer kinds so their train paths get exercised end to end.

use super::cnn::{fc, ChainBuilder};
use super::{
    ArchMode, CountRow, EncDec, InputKind, ModelGraph, ModelMeta, Node, TfAttn, TfDecBlock,
    TfEncBlock, Topology,
};
use crate::error::{Error, Result};
use crate::layers::{count, Activation, Layer, LayerKind, LayerSpec, Mode};
use crate::numerics::{matmul, Tensor};

pub(crate) fn embedding(name: &str, vocab: usize, dim: usize) -> Layer {
    Layer::new(LayerSpec::vanilla(name, LayerKind::Embedding { vocab, dim }, false))
        .expect("embedding spec")
}

fn lstm(name: &str, d: usize, h: usize) -> Layer {
    Layer::new(LayerSpec::vanilla(name, LayerKind::LstmCell { d, h }, true)).expect("lstm spec")
}

fn dropout(name: &str, p: f64) -> Layer {
    Layer::new(LayerSpec::vanilla(name, LayerKind::Dropout { p }, false)).expect("dropout spec")
}

fn layer_norm(name: &str, features: usize) -> Layer {
    Layer::new(LayerSpec::vanilla(name, LayerKind::LayerNorm { features }, false))
        .expect("layer_norm spec")
}

fn tied_fc(name: &str, m: usize, n: usize, bias: bool) -> Layer {
    Layer::new(LayerSpec::vanilla(name, LayerKind::Fc { m, n, tied: true }, bias))
        .expect("tied fc spec")
}

pub(crate) fn lstm_wikitext2() -> Result<ModelGraph> {
    let vocab = 33_278;
    let dim = 1_500;
    let mut b = ChainBuilder::new();
    let embed = b.chain(embedding("encoder", vocab, dim));
    b.chain(dropout("drop0", 0.65));
    b.chain(lstm("lstm0", dim, dim));
    b.chain(dropout("drop1", 0.65));
    b.chain(lstm("lstm1", dim, dim));
    b.chain(dropout("drop2", 0.65));
    let dec = b.add(tied_fc("decoder", dim, vocab, true));
    b.nodes.push(Node::TiedDecode {
        fc: dec,
        embedding: embed,
    });
    Ok(b.finish("lstm_wikitext2", InputKind::TokenSeq { vocab }, vocab))
}

pub(crate) fn toy_lstm() -> Result<ModelGraph> {
    let vocab = 32;
    let mut b = ChainBuilder::new();
    b.chain(embedding("encoder", vocab, 16));
    b.chain(lstm("lstm0", 16, 24));
    b.chain(fc("decoder", 24, vocab, true));
    Ok(b.finish("toy_lstm", InputKind::TokenSeq { vocab }, vocab))
}

pub(crate) fn toy_transformer() -> Result<ModelGraph> {
    let vocab = 32;
    let (heads, head_dim) = (2usize, 8usize);
    let model = heads * head_dim;
    let mut b = ChainBuilder::new();
    b.chain(embedding("embed", vocab, model));
    let attn = b.add(
        Layer::new(LayerSpec::vanilla(
            "attn",
            LayerKind::MultiHeadAttention {
                heads,
                head_dim,
                causal: true,
            },
            false,
        ))
        .expect("attention spec"),
    );
    b.nodes.push(Node::Res {
        body: vec![Node::L(attn)],
        shortcut: vec![],
        post_relu: None,
    });
    b.chain(layer_norm("ln1", model));
    let ffn = b.add(
        Layer::new(LayerSpec::vanilla("ffn", LayerKind::Ffn { heads, head_dim }, true))
            .expect("ffn spec"),
    );
    b.nodes.push(Node::Res {
        body: vec![Node::L(ffn)],
        shortcut: vec![],
        post_relu: None,
    });
    b.chain(layer_norm("ln2", model));
    b.chain(fc("decoder", model, vocab, true));
    Ok(b.finish("toy_transformer", InputKind::TokenSeq { vocab }, vocab))
}

const TF_VOCAB: usize = 9_521;
const TF_MODEL: usize = 512;
const TF_HIDDEN: usize = 2_048;
const TF_HEADS: usize = 8;
const TF_STACK: usize = 6;

fn attn_fcs(b: &mut ChainBuilder, pre: &str) -> TfAttn {
    TfAttn {
        wq: b.add(fc(&format!("{pre}.wq"), TF_MODEL, TF_MODEL, false)),
        wk: b.add(fc(&format!("{pre}.wk"), TF_MODEL, TF_MODEL, false)),
        wv: b.add(fc(&format!("{pre}.wv"), TF_MODEL, TF_MODEL, false)),
        wo: b.add(fc(&format!("{pre}.wo"), TF_MODEL, TF_MODEL, false)),
    }
}

pub(crate) fn transformer_wmt16() -> Result<ModelGraph> {
    let mut b = ChainBuilder::new();
    let embed = b.add(embedding("embedding", TF_VOCAB, TF_MODEL));
    let mut enc_blocks = Vec::new();
    for i in 1..=TF_STACK {
        let pre = format!("enc{i}");
        enc_blocks.push(TfEncBlock {
            attn: attn_fcs(&mut b, &format!("{pre}.attn")),
            ln1: b.add(layer_norm(&format!("{pre}.ln1"), TF_MODEL)),
            ffn1: b.add(fc(&format!("{pre}.ffn.w1"), TF_MODEL, TF_HIDDEN, true)),
            ffn2: b.add(fc(&format!("{pre}.ffn.w2"), TF_HIDDEN, TF_MODEL, true)),
            ln2: b.add(layer_norm(&format!("{pre}.ln2"), TF_MODEL)),
        });
    }
    let enc_final_ln = b.add(layer_norm("encoder.ln", TF_MODEL));
    let mut dec_blocks = Vec::new();
    for i in 1..=TF_STACK {
        let pre = format!("dec{i}");
        dec_blocks.push(TfDecBlock {
            self_attn: attn_fcs(&mut b, &format!("{pre}.self_attn")),
            ln1: b.add(layer_norm(&format!("{pre}.ln1"), TF_MODEL)),
            cross_attn: attn_fcs(&mut b, &format!("{pre}.cross_attn")),
            ln2: b.add(layer_norm(&format!("{pre}.ln2"), TF_MODEL)),
            ffn1: b.add(fc(&format!("{pre}.ffn.w1"), TF_MODEL, TF_HIDDEN, true)),
            ffn2: b.add(fc(&format!("{pre}.ffn.w2"), TF_HIDDEN, TF_MODEL, true)),
            ln3: b.add(layer_norm(&format!("{pre}.ln3"), TF_MODEL)),
        });
    }
    let dec_final_ln = b.add(layer_norm("decoder.ln", TF_MODEL));
    let decoder_fc = b.add(tied_fc("decoder", TF_MODEL, TF_VOCAB, false));
    Ok(ModelGraph {
        arch_id: "transformer_wmt16".to_string(),
        mode: ArchMode::Vanilla,
        layers: b.layers,
        topology: Topology::EncDec(Box::new(EncDec {
            embedding: embed,
            heads: TF_HEADS,
            enc_blocks,
            enc_final_ln,
            dec_blocks,
            dec_final_ln,
            decoder_fc,
        })),
        meta: ModelMeta {
            input: InputKind::TokenPair { vocab: TF_VOCAB },
            classes: TF_VOCAB,
            init_seed: None,
        },
        plan: None,
    })
}

/// Sinusoidal positional encoding added to the embeddings (no parameters).
fn add_positional_encoding(x: &mut Tensor) {
    let (n, model) = (x.rows(), x.cols());
    for pos in 0..n {
        for i in 0..model {
            let angle = pos as f64 / 10_000f64.powf((2 * (i / 2)) as f64 / model as f64);
            let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            let v = x.at2(pos, i) + pe;
            x.set2(pos, i, v);
        }
    }
}

fn fc_eval(model: &mut ModelGraph, idx: usize, x: &Tensor) -> Result<Tensor> {
    let out = model.layers[idx].forward(&Activation::Dense(x.clone()), Mode::Eval)?;
    Ok(out.dense()?.clone())
}

/// Multi-head attention over fused FC projection layers.
fn fused_attention(
    model: &mut ModelGraph,
    attn: &TfAttn,
    heads: usize,
    q_in: &Tensor,
    kv_in: &Tensor,
    causal: bool,
) -> Result<Tensor> {
    let model_dim = q_in.cols();
    let head_dim = model_dim / heads;
    let q = fc_eval(model, attn.wq, q_in)?;
    let k = fc_eval(model, attn.wk, kv_in)?;
    let v = fc_eval(model, attn.wv, kv_in)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let (nq, nk) = (q.rows(), k.rows());
    let mut concat = Tensor::zeros(&[nq, model_dim]);
    for h in 0..heads {
        let slice = |t: &Tensor, rows: usize| {
            Tensor::from_fn_2d(rows, head_dim, |i, j| t.at2(i, h * head_dim + j))
        };
        let (qh, kh, vh) = (slice(&q, nq), slice(&k, nk), slice(&v, nk));
        let mut scores = matmul(&qh, &kh.transposed())?.scaled(scale);
        if causal {
            for i in 0..nq {
                for j in (i + 1)..nk {
                    scores.set2(i, j, f64::NEG_INFINITY);
                }
            }
        }
        for i in 0..nq {
            let row = &mut scores.data_mut()[i * nk..(i + 1) * nk];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
        }
        let oh = matmul(&scores, &vh)?;
        for i in 0..nq {
            for j in 0..head_dim {
                concat.set2(i, h * head_dim + j, oh.at2(i, j));
            }
        }
    }
    fc_eval(model, attn.wo, &concat)
}

fn add_norm(model: &mut ModelGraph, ln: usize, x: &Tensor, sub: &Tensor) -> Result<Tensor> {
    let summed = x.add(sub)?;
    let out = model.layers[ln].forward(&Activation::Dense(summed), Mode::Eval)?;
    Ok(out.dense()?.clone())
}

fn ffn_fused(model: &mut ModelGraph, w1: usize, w2: usize, x: &Tensor) -> Result<Tensor> {
    let h = fc_eval(model, w1, x)?.map(|v| v.max(0.0));
    fc_eval(model, w2, &h)
}

fn embed_tokens(model: &mut ModelGraph, embed: usize, ids: &[usize]) -> Result<Tensor> {
    let out = model.layers[embed].forward(&Activation::Tokens(ids.to_vec()), Mode::Eval)?;
    let mut x = out.dense()?.clone();
    add_positional_encoding(&mut x);
    Ok(x)
}

/// Forward pass of the encoder-decoder stack (inference only): returns the
/// target-side logits `(len(tgt), vocab)` via the tied output projection.
pub(crate) fn encdec_forward(model: &mut ModelGraph, src: &[usize], tgt: &[usize]) -> Result<Tensor> {
    let wiring = match &model.topology {
        Topology::EncDec(e) => e.as_ref().clone(),
        _ => return Err(Error::State("not an encoder-decoder model".into())),
    };
    let heads = wiring.heads;
    let mut x = embed_tokens(model, wiring.embedding, src)?;
    for blk in &wiring.enc_blocks {
        let a = fused_attention(model, &blk.attn, heads, &x, &x, false)?;
        x = add_norm(model, blk.ln1, &x, &a)?;
        let f = ffn_fused(model, blk.ffn1, blk.ffn2, &x)?;
        x = add_norm(model, blk.ln2, &x, &f)?;
    }
    let memory = fc_like_ln(model, wiring.enc_final_ln, &x)?;

    let mut y = embed_tokens(model, wiring.embedding, tgt)?;
    for blk in &wiring.dec_blocks {
        let a = fused_attention(model, &blk.self_attn, heads, &y, &y, true)?;
        y = add_norm(model, blk.ln1, &y, &a)?;
        let c = fused_attention(model, &blk.cross_attn, heads, &y, &memory, false)?;
        y = add_norm(model, blk.ln2, &y, &c)?;
        let f = ffn_fused(model, blk.ffn1, blk.ffn2, &y)?;
        y = add_norm(model, blk.ln3, &y, &f)?;
    }
    let y = fc_like_ln(model, wiring.dec_final_ln, &y)?;

    let table = model.layers[wiring.embedding].state.param("weight")?.clone();
    matmul(&y, &table.transposed())
}

fn fc_like_ln(model: &mut ModelGraph, ln: usize, x: &Tensor) -> Result<Tensor> {
    let out = model.layers[ln].forward(&Activation::Dense(x.clone()), Mode::Eval)?;
    Ok(out.dense()?.clone())
}

fn push_row(
    model: &ModelGraph,
    rows: &mut Vec<CountRow>,
    idx: usize,
    shape: &[usize],
) -> Result<()> {
    let spec = &model.layers[idx].spec;
    rows.push(CountRow {
        name: spec.name.clone(),
        kind: spec.kind.kind_name().to_string(),
        rank: spec.rank_mode.rank(),
        params: count::param_count(spec),
        macs: count::mac_count(spec, shape)?,
    });
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn attn_rows(
    model: &ModelGraph,
    rows: &mut Vec<CountRow>,
    attn: &TfAttn,
    nq: usize,
    nk: usize,
    heads: usize,
    head_dim: usize,
    tag: String,
) -> Result<()> {
    push_row(model, rows, attn.wq, &[nq, TF_MODEL])?;
    push_row(model, rows, attn.wk, &[nk, TF_MODEL])?;
    push_row(model, rows, attn.wv, &[nk, TF_MODEL])?;
    push_row(model, rows, attn.wo, &[nq, TF_MODEL])?;
    rows.push(CountRow {
        name: tag,
        kind: "attention_scores".to_string(),
        rank: None,
        params: 0,
        macs: (2 * heads * nq * nk * head_dim) as u64,
    });
    Ok(())
}

/// Count rows for the encoder-decoder stack with source and target length
/// `seq_len`. Attention score/value products appear as separate zero-param
/// rows so per-layer payload accounting stays tensor-exact.
pub(crate) fn encdec_count(
    model: &ModelGraph,
    seq_len: usize,
    rows: &mut Vec<CountRow>,
) -> Result<()> {
    let wiring = match &model.topology {
        Topology::EncDec(e) => e.as_ref(),
        _ => return Err(Error::State("not an encoder-decoder model".into())),
    };
    let n = seq_len;
    let heads = wiring.heads;
    let head_dim = TF_MODEL / heads;
    push_row(model, rows, wiring.embedding, &[n])?;
    let seq_shape = [n, TF_MODEL];
    let hid_in = [n, TF_MODEL];
    let hid_out = [n, TF_HIDDEN];
    for (i, blk) in wiring.enc_blocks.iter().enumerate() {
        attn_rows(model, rows, &blk.attn, n, n, heads, head_dim, format!("enc{}.attn.scores", i + 1))?;
        push_row(model, rows, blk.ln1, &seq_shape)?;
        push_row(model, rows, blk.ffn1, &hid_in)?;
        push_row(model, rows, blk.ffn2, &hid_out)?;
        push_row(model, rows, blk.ln2, &seq_shape)?;
    }
    push_row(model, rows, wiring.enc_final_ln, &seq_shape)?;
    for (i, blk) in wiring.dec_blocks.iter().enumerate() {
        attn_rows(model, rows, &blk.self_attn, n, n, heads, head_dim, format!("dec{}.self_attn.scores", i + 1))?;
        push_row(model, rows, blk.ln1, &seq_shape)?;
        attn_rows(model, rows, &blk.cross_attn, n, n, heads, head_dim, format!("dec{}.cross_attn.scores", i + 1))?;
        push_row(model, rows, blk.ln2, &seq_shape)?;
        push_row(model, rows, blk.ffn1, &hid_in)?;
        push_row(model, rows, blk.ffn2, &hid_out)?;
        push_row(model, rows, blk.ln3, &seq_shape)?;
    }
    push_row(model, rows, wiring.dec_final_ln, &seq_shape)?;
    {
        let spec = &model.layers[wiring.decoder_fc].spec;
        rows.push(CountRow {
            name: spec.name.clone(),
            kind: "fc".to_string(),
            rank: None,
            params: count::param_count(spec),
            macs: (n * TF_MODEL * TF_VOCAB) as u64,
        });
    }
    Ok(())
}

//! LSTM cell with one merged bias per gate.
//!
//! Input is a `(T, d)` sequence processed one step at a time (batch 1); the
//! `(h, c)` carry survives across forward calls until [`Layer::reset`], so a
//! trainer can feed consecutive truncated-BPTT windows. `backward` runs the
//! full reverse pass over the cached window and stops at its first step.

use super::{sigmoid, Cache, Layer, LayerKind, Mode, ParamGrads, RankMode};
use crate::error::{Error, Result};
use crate::numerics::{matmul, Tensor};

const GATES: [char; 4] = ['i', 'f', 'g', 'o'];

#[derive(Clone, Debug)]
pub(crate) struct StepCache {
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    gates: [Vec<f64>; 4],
    tanh_c: Vec<f64>,
    /// Low-rank intermediates `x u` / `h_prev u`, one per gate and branch.
    xu: Vec<Tensor>,
}

fn branch_output(
    layer: &Layer,
    input: &Tensor,
    branch: char,
    gate: char,
    xu_out: &mut Vec<Tensor>,
) -> Result<Tensor> {
    match layer.spec.rank_mode {
        RankMode::Vanilla => matmul(input, layer.state.param(&format!("w_{branch}{gate}"))?),
        RankMode::Factorized(_) => {
            let xu = matmul(input, layer.state.param(&format!("w_{branch}{gate}_u"))?)?;
            let out = matmul(&xu, layer.state.param(&format!("w_{branch}{gate}_v"))?)?;
            xu_out.push(xu);
            Ok(out)
        }
    }
}

pub(crate) fn forward(layer: &mut Layer, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let LayerKind::LstmCell { d, h } = layer.spec.kind else {
        unreachable!()
    };
    if x.ndim() != 2 || x.cols() != d {
        return Err(Error::Dimension(format!(
            "lstm `{}` expects (T, {d}), got {:?}",
            layer.spec.name,
            x.shape()
        )));
    }
    let steps = x.rows();
    let (mut h_prev, mut c_prev) = layer
        .state
        .lstm_carry
        .take()
        .unwrap_or_else(|| (Tensor::zeros(&[1, h]), Tensor::zeros(&[1, h])));

    let mut out = Tensor::zeros(&[steps, h]);
    let mut caches = Vec::with_capacity(steps);
    for t in 0..steps {
        let xt = Tensor::new(vec![1, d], x.row(t).to_vec())?;
        let mut xu = Vec::new();
        let mut gates: [Vec<f64>; 4] = Default::default();
        for (gi, gate) in GATES.iter().enumerate() {
            let mut pre = branch_output(layer, &xt, 'i', *gate, &mut xu)?
                .add(&branch_output(layer, &h_prev, 'h', *gate, &mut xu)?)?;
            if layer.spec.has_bias {
                let b = layer.state.param(&format!("b_{gate}"))?;
                for (p, bv) in pre.data_mut().iter_mut().zip(b.data()) {
                    *p += bv;
                }
            }
            gates[gi] = match gate {
                'g' => pre.data().iter().map(|&v| v.tanh()).collect(),
                _ => pre.data().iter().map(|&v| sigmoid(v)).collect(),
            };
        }
        let [ref ig, ref fg, ref gg, ref og] = gates;
        let mut c_t = Tensor::zeros(&[1, h]);
        for j in 0..h {
            c_t.data_mut()[j] = fg[j] * c_prev.data()[j] + ig[j] * gg[j];
        }
        let tanh_c: Vec<f64> = c_t.data().iter().map(|&v| v.tanh()).collect();
        let mut h_t = Tensor::zeros(&[1, h]);
        for j in 0..h {
            h_t.data_mut()[j] = og[j] * tanh_c[j];
        }
        out.data_mut()[t * h..(t + 1) * h].copy_from_slice(h_t.data());
        if mode == Mode::Train {
            caches.push(StepCache {
                x: xt,
                h_prev: h_prev.clone(),
                c_prev: c_prev.clone(),
                gates,
                tanh_c,
                xu,
            });
        }
        h_prev = h_t;
        c_prev = c_t;
    }
    layer.state.lstm_carry = Some((h_prev, c_prev));
    layer.state.cache = match mode {
        Mode::Train => Some(Cache::Lstm(caches)),
        Mode::Eval => None,
    };
    Ok(out)
}

struct GradAcc(Vec<(String, Tensor)>);

impl GradAcc {
    fn add(&mut self, name: String, delta: Tensor) {
        if let Some((_, t)) = self.0.iter_mut().find(|(n, _)| *n == name) {
            t.add_assign(&delta);
        } else {
            self.0.push((name, delta));
        }
    }
}

pub(crate) fn backward(layer: &mut Layer, g: &Tensor) -> Result<(Option<Tensor>, ParamGrads)> {
    let Some(Cache::Lstm(caches)) = layer.state.cache.take() else {
        return Err(Error::State(format!("lstm `{}`: no cache", layer.spec.name)));
    };
    let LayerKind::LstmCell { d, h } = layer.spec.kind else {
        unreachable!()
    };
    if g.shape() != [caches.len(), h] {
        return Err(Error::Dimension(format!(
            "lstm `{}` backward: grad {:?}, expected [{}, {}]",
            layer.spec.name,
            g.shape(),
            caches.len(),
            h
        )));
    }
    let mut grads = GradAcc(Vec::new());
    let mut dx_all = Tensor::zeros(&[caches.len(), d]);
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];

    for (t, step) in caches.iter().enumerate().rev() {
        let [ref ig, ref fg, ref gg, ref og] = step.gates;
        let mut dh = vec![0.0; h];
        for j in 0..h {
            dh[j] = g.at2(t, j) + dh_next[j];
        }
        let mut dc = vec![0.0; h];
        for j in 0..h {
            dc[j] = dc_next[j] + dh[j] * og[j] * (1.0 - step.tanh_c[j] * step.tanh_c[j]);
        }
        // d(pre-activation) per gate, in the i/f/g/o order
        let mut dpre = [
            Tensor::zeros(&[1, h]),
            Tensor::zeros(&[1, h]),
            Tensor::zeros(&[1, h]),
            Tensor::zeros(&[1, h]),
        ];
        for j in 0..h {
            dpre[0].data_mut()[j] = dc[j] * gg[j] * ig[j] * (1.0 - ig[j]);
            dpre[1].data_mut()[j] = dc[j] * step.c_prev.data()[j] * fg[j] * (1.0 - fg[j]);
            dpre[2].data_mut()[j] = dc[j] * ig[j] * (1.0 - gg[j] * gg[j]);
            dpre[3].data_mut()[j] = dh[j] * step.tanh_c[j] * og[j] * (1.0 - og[j]);
        }
        let mut dx = Tensor::zeros(&[1, d]);
        let mut dh_prev = Tensor::zeros(&[1, h]);
        for (gi, gate) in GATES.iter().enumerate() {
            for (branch, input, sink) in [('i', &step.x, &mut dx), ('h', &step.h_prev, &mut dh_prev)]
            {
                match layer.spec.rank_mode {
                    RankMode::Vanilla => {
                        let wname = format!("w_{branch}{gate}");
                        let w = layer.state.param(&wname)?;
                        sink.add_assign(&matmul(&dpre[gi], &w.transposed())?);
                        grads.add(wname, matmul(&input.transposed(), &dpre[gi])?);
                    }
                    RankMode::Factorized(_) => {
                        // xu vec order: per gate, input branch then hidden branch
                        let xu = &step.xu[gi * 2 + if branch == 'i' { 0 } else { 1 }];
                        let uname = format!("w_{branch}{gate}_u");
                        let vname = format!("w_{branch}{gate}_v");
                        let u = layer.state.param(&uname)?.clone();
                        let v = layer.state.param(&vname)?.clone();
                        let dv_in = matmul(&dpre[gi], &v.transposed())?;
                        grads.add(vname, matmul(&xu.transposed(), &dpre[gi])?);
                        grads.add(uname, matmul(&input.transposed(), &dv_in)?);
                        sink.add_assign(&matmul(&dv_in, &u.transposed())?);
                    }
                }
            }
            if layer.spec.has_bias {
                grads.add(
                    format!("b_{gate}"),
                    Tensor::new(vec![h], dpre[gi].data().to_vec())?,
                );
            }
        }
        dx_all.data_mut()[t * d..(t + 1) * d].copy_from_slice(dx.data());
        dh_next = dh_prev.data().to_vec();
        for j in 0..h {
            dc_next[j] = dc[j] * fg[j];
        }
    }
    Ok((Some(dx_all), grads.0))
}

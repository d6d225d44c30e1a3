//! Rank selection, hybrid planning, and the warm-start weight transfer.
//!
//! A [`FactorizationPlan`] records the first low-rank layer index K, the
//! global rank ratio, and named exceptions; the per-layer decisions are
//! re-derived from those three ingredients plus the structural rules:
//! the first convolution and the very last FC layer stay full-rank, bias
//! and normalization vectors are never factorized, and layer indexing for
//! K counts only the parameterized kinds (conv, FC, LSTM, attention, FFN).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerKind, LayerSpec, RankMode};
use crate::numerics::{matmul, roll_conv_weight, truncated_split, unroll_conv_weight, Tensor};
use crate::zoo::{ArchMode, ModelGraph};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Exact rational rank ratio, e.g. `1/4`; kept rational so rank arithmetic
/// and the CLI never see float drift.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankRatio {
    pub num: u64,
    pub den: u64,
}

impl RankRatio {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(Error::Argument(format!(
                "rank ratio {num}/{den} outside (0, 1]"
            )));
        }
        Ok(RankRatio { num, den })
    }

    pub fn floor_of(&self, bound: usize) -> usize {
        ((bound as u64 * self.num) / self.den) as usize
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl std::str::FromStr for RankRatio {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parse_int = |p: &str| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| Error::Argument(format!("bad rank ratio `{s}`")))
        };
        match s.split_once('/') {
            Some((n, d)) => RankRatio::new(parse_int(n)?, parse_int(d)?),
            None => RankRatio::new(parse_int(s)?, 1),
        }
    }
}

impl std::fmt::Display for RankRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl Serialize for RankRatio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for RankRatio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanAction {
    FullRank,
    Rank(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanException {
    pub layer: String,
    pub action: PlanAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizationPlan {
    pub arch_id: String,
    pub k: usize,
    pub ratio: RankRatio,
    #[serde(default)]
    pub exceptions: Vec<PlanException>,
}

/// `r = max(1, floor(ratio * natural rank bound))`.
pub fn rank_for(spec: &LayerSpec, ratio: RankRatio) -> Result<usize> {
    let bound = spec.natural_rank_bound().ok_or_else(|| {
        Error::Argument(format!(
            "layer `{}` of kind {} has no factorization rank",
            spec.name,
            spec.kind.kind_name()
        ))
    })?;
    Ok(ratio.floor_of(bound).max(1))
}

fn eligible(spec: &LayerSpec) -> bool {
    matches!(
        spec.kind,
        LayerKind::Fc { tied: false, .. }
            | LayerKind::Conv2d { .. }
            | LayerKind::LstmCell { .. }
            | LayerKind::MultiHeadAttention { .. }
            | LayerKind::Ffn { .. }
    )
}

/// Indices (into `model.layers`) of the parameterized layers K counts over.
pub fn eligible_layers(model: &ModelGraph) -> Vec<usize> {
    model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| eligible(&l.spec))
        .map(|(i, _)| i)
        .collect()
}

/// 1-based K-position of a named layer among the eligible layers.
pub fn eligible_position(model: &ModelGraph, name: &str) -> Option<usize> {
    eligible_layers(model)
        .iter()
        .position(|&i| model.layers[i].spec.name == name)
        .map(|p| p + 1)
}

fn last_fc_index(model: &ModelGraph) -> Option<usize> {
    model
        .layers
        .iter()
        .rposition(|l| matches!(l.spec.kind, LayerKind::Fc { .. }))
}

fn first_conv_index(model: &ModelGraph) -> Option<usize> {
    model
        .layers
        .iter()
        .position(|l| matches!(l.spec.kind, LayerKind::Conv2d { .. }))
}

/// Builds and validates a plan against a concrete model.
pub fn make_plan(
    model: &ModelGraph,
    k: usize,
    ratio: RankRatio,
    exceptions: Vec<PlanException>,
) -> Result<FactorizationPlan> {
    let plan = FactorizationPlan {
        arch_id: model.arch_id.clone(),
        k,
        ratio,
        exceptions,
    };
    resolve_plan(model, &plan)?;
    Ok(plan)
}

/// Per-layer decisions for every eligible layer, in layer order.
pub fn resolve_plan(model: &ModelGraph, plan: &FactorizationPlan) -> Result<Vec<(String, RankMode)>> {
    if plan.arch_id != model.arch_id {
        return Err(Error::Argument(format!(
            "plan targets `{}`, model is `{}`",
            plan.arch_id, model.arch_id
        )));
    }
    let eligible_idx = eligible_layers(model);
    let count = eligible_idx.len();
    if plan.k == 0 || plan.k > count + 1 {
        return Err(Error::Argument(format!(
            "invalid K={} for {} parameterized layers",
            plan.k, count
        )));
    }
    let last_fc = last_fc_index(model);
    let first_conv = first_conv_index(model);
    for exc in &plan.exceptions {
        let idx = model
            .layer_index(&exc.layer)
            .ok_or_else(|| Error::Argument(format!("exception targets unknown layer `{}`", exc.layer)))?;
        if !eligible(&model.layers[idx].spec) {
            return Err(Error::Argument(format!(
                "exception targets non-factorizable layer `{}`",
                exc.layer
            )));
        }
        if matches!(exc.action, PlanAction::Rank(_)) && Some(idx) == last_fc {
            return Err(Error::Argument(format!(
                "exception must not factorize the final FC layer `{}`",
                exc.layer
            )));
        }
    }
    let mut decisions = Vec::with_capacity(count);
    for (pos0, &idx) in eligible_idx.iter().enumerate() {
        let spec = &model.layers[idx].spec;
        let pos = pos0 + 1;
        let exception = plan.exceptions.iter().find(|e| e.layer == spec.name);
        let mode = match exception {
            Some(PlanException {
                action: PlanAction::FullRank,
                ..
            }) => RankMode::Vanilla,
            Some(PlanException {
                action: PlanAction::Rank(r),
                ..
            }) => {
                let bound = spec.natural_rank_bound().unwrap();
                if *r == 0 || *r > bound {
                    return Err(Error::Argument(format!(
                        "exception rank {} outside 1..={} for `{}`",
                        r, bound, spec.name
                    )));
                }
                RankMode::Factorized(*r)
            }
            None => {
                if pos < plan.k || Some(idx) == last_fc || Some(idx) == first_conv {
                    RankMode::Vanilla
                } else {
                    RankMode::Factorized(rank_for(spec, plan.ratio)?)
                }
            }
        };
        decisions.push((spec.name.clone(), mode));
    }
    Ok(decisions)
}

/// The published hybrid configuration for each architecture.
pub fn default_plan(model: &ModelGraph) -> Result<FactorizationPlan> {
    let ratio = RankRatio::new(1, 4)?;
    let (k, exceptions) = match model.arch_id.as_str() {
        "vgg19_cifar10" => (10, Vec::new()),
        "resnet18_cifar10" => {
            // second block of the first stage onward; downsamples untouched
            let k = eligible_position(model, "layer1.1.conv1")
                .ok_or_else(|| Error::State("resnet18 layout changed".into()))?;
            let exceptions = model
                .layers
                .iter()
                .filter(|l| l.spec.name.ends_with(".downsample.conv"))
                .map(|l| PlanException {
                    layer: l.spec.name.clone(),
                    action: PlanAction::FullRank,
                })
                .collect();
            (k, exceptions)
        }
        "resnet50_imagenet" | "wrn50_2_imagenet" => {
            // last stage entirely low-rank, its downsample included
            let k = eligible_position(model, "layer4.0.conv1")
                .ok_or_else(|| Error::State("resnet layout changed".into()))?;
            (k, Vec::new())
        }
        "transformer_wmt16" => {
            // first encoder and first decoder layers stay full-rank
            let k = eligible_position(model, "enc2.attn.wq")
                .ok_or_else(|| Error::State("transformer layout changed".into()))?;
            let exceptions = model
                .layers
                .iter()
                .filter(|l| l.spec.name.starts_with("dec1.") && eligible(&l.spec))
                .map(|l| PlanException {
                    layer: l.spec.name.clone(),
                    action: PlanAction::FullRank,
                })
                .collect();
            (k, exceptions)
        }
        _ => (1, Vec::new()),
    };
    make_plan(model, k, ratio, exceptions)
}

/// Rewrites layer specs to the plan's rank modes, dropping any materialized
/// parameters (shapes change).
pub fn apply_plan_structure(model: &mut ModelGraph, plan: &FactorizationPlan) -> Result<()> {
    let decisions = resolve_plan(model, plan)?;
    for (name, mode) in decisions {
        let idx = model.layer_index(&name).expect("resolved layer exists");
        let layer = &mut model.layers[idx];
        layer.spec.rank_mode = mode;
        layer.spec.validate()?;
        layer.state.params.clear();
        layer.reset();
    }
    model.meta.init_seed = None;
    Ok(())
}

/// Splits one trained layer's weights according to `hybrid_spec`, returning
/// the new parameter list (initialization order preserved).
fn factorize_layer_params(
    trained: &[(String, Tensor)],
    hybrid_spec: &LayerSpec,
) -> Result<Vec<(String, Tensor)>> {
    let get = |name: &str| -> Result<&Tensor> {
        trained
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::State(format!("missing trained tensor `{name}`")))
    };
    let RankMode::Factorized(r) = hybrid_spec.rank_mode else {
        // full-rank layers transfer verbatim (weights, biases, BN statistics)
        return Ok(trained.to_vec());
    };
    let mut out: Vec<(String, Tensor)> = Vec::new();
    match hybrid_spec.kind {
        LayerKind::Fc { .. } => {
            let (u, v) = truncated_split(get("weight")?, r)?;
            out.push(("u".into(), u));
            out.push(("v".into(), v));
            if hybrid_spec.has_bias {
                out.push(("bias".into(), get("bias")?.clone()));
            }
        }
        LayerKind::Conv2d { c_in, k, .. } => {
            let unrolled = unroll_conv_weight(get("weight")?)?;
            let (u, v) = truncated_split(&unrolled, r)?;
            out.push(("u".into(), roll_conv_weight(&u, c_in, k)?));
            out.push(("v".into(), v));
            if hybrid_spec.has_bias {
                out.push(("bias".into(), get("bias")?.clone()));
            }
        }
        LayerKind::LstmCell { .. } => {
            for branch in ['i', 'h'] {
                for gate in ['i', 'f', 'g', 'o'] {
                    let w = get(&format!("w_{branch}{gate}"))?;
                    let (u, v) = truncated_split(w, r)?;
                    out.push((format!("w_{branch}{gate}_u"), u));
                    out.push((format!("w_{branch}{gate}_v"), v));
                }
            }
            if hybrid_spec.has_bias {
                for gate in ['i', 'f', 'g', 'o'] {
                    let name = format!("b_{gate}");
                    out.push((name.clone(), get(&name)?.clone()));
                }
            }
        }
        LayerKind::MultiHeadAttention { heads, head_dim, .. } => {
            for proj in ["wq", "wk", "wv"] {
                let w = get(proj)?;
                for h in 0..heads {
                    let slice =
                        Tensor::from_fn_2d(w.rows(), head_dim, |i, j| w.at2(i, h * head_dim + j));
                    let (u, v) = truncated_split(&slice, r)?;
                    out.push((format!("{proj}_u_h{h}"), u));
                    out.push((format!("{proj}_v_h{h}"), v));
                }
            }
            let (u, v) = truncated_split(get("wo")?, r)?;
            out.push(("wo_u".into(), u));
            out.push(("wo_v".into(), v));
        }
        LayerKind::Ffn { .. } => {
            let (u1, v1) = truncated_split(get("w1")?, r)?;
            out.push(("w1_u".into(), u1));
            out.push(("w1_v".into(), v1));
            if hybrid_spec.has_bias {
                out.push(("b1".into(), get("b1")?.clone()));
            }
            let (u2, v2) = truncated_split(get("w2")?, r)?;
            out.push(("w2_u".into(), u2));
            out.push(("w2_v".into(), v2));
            if hybrid_spec.has_bias {
                out.push(("b2".into(), get("b2")?.clone()));
            }
        }
        _ => {
            return Err(Error::State(format!(
                "layer `{}` cannot be factorized",
                hybrid_spec.name
            )))
        }
    }
    Ok(out)
}

/// Converts a trained vanilla model into its hybrid counterpart: full-rank
/// layers copy verbatim, factorized layers get balanced truncated-SVD
/// factors. Per-layer SVDs run in parallel (independent inputs); the output
/// graph is assembled in layer order.
pub fn factorize_model(trained: &ModelGraph, plan: &FactorizationPlan) -> Result<ModelGraph> {
    if trained.mode != ArchMode::Vanilla {
        return Err(Error::Argument(
            "factorize_model expects a vanilla model".into(),
        ));
    }
    if !trained.is_initialized() {
        return Err(Error::State("model parameters are not initialized".into()));
    }
    let mut hybrid = crate::zoo::build_model(&trained.arch_id, ArchMode::Hybrid, Some(plan))?;

    let jobs: Vec<(usize, &LayerSpec)> = hybrid
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| (i, &l.spec))
        .collect();
    let map_one = |&(i, spec): &(usize, &LayerSpec)| -> Result<(usize, Vec<(String, Tensor)>)> {
        Ok((i, factorize_layer_params(&trained.layers[i].state.params, spec)?))
    };
    #[cfg(feature = "parallel")]
    let states: Vec<(usize, Vec<(String, Tensor)>)> =
        jobs.par_iter().map(map_one).collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let states: Vec<(usize, Vec<(String, Tensor)>)> =
        jobs.iter().map(map_one).collect::<Result<_>>()?;

    for (i, params) in states {
        hybrid.layers[i].state.params = params;
        hybrid.layers[i].state.dropout_seed = trained.layers[i].state.dropout_seed;
    }
    hybrid.meta.init_seed = trained.meta.init_seed;
    Ok(hybrid)
}

/// Frobenius reconstruction error of each factorized layer against the
/// trained weights it was split from.
pub fn reconstruction_errors(
    trained: &ModelGraph,
    hybrid: &ModelGraph,
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (t, h) in trained.layers.iter().zip(&hybrid.layers) {
        let RankMode::Factorized(_) = h.spec.rank_mode else {
            continue;
        };
        match h.spec.kind {
            LayerKind::Fc { .. } => {
                let w = t.state.param("weight")?;
                let rec = matmul(h.state.param("u")?, h.state.param("v")?)?;
                out.push((h.spec.name.clone(), rec.sub(w)?.frob_norm()));
            }
            LayerKind::Conv2d { .. } => {
                let w = unroll_conv_weight(t.state.param("weight")?)?;
                let u = unroll_conv_weight(h.state.param("u")?)?;
                let rec = matmul(&u, h.state.param("v")?)?;
                out.push((h.spec.name.clone(), rec.sub(&w)?.frob_norm()));
            }
            _ => {}
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_parses_and_prints() {
        let r: RankRatio = "1/4".parse().unwrap();
        assert_eq!(r, RankRatio::new(1, 4).unwrap());
        assert_eq!(r.to_string(), "1/4");
        assert_eq!(r.floor_of(512), 128);
        assert_eq!(r.floor_of(2), 0);
        let one: RankRatio = "1".parse().unwrap();
        assert_eq!(one.floor_of(512), 512);
        assert!("0/4".parse::<RankRatio>().is_err());
        assert!("5/4".parse::<RankRatio>().is_err());
    }
}

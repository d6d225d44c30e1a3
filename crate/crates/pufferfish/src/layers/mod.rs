//! Vanilla and factorized layer forward/backward passes plus per-layer
//! parameter and MAC accounting.
//!
//! Every parameterized kind exists in two rank modes: `Vanilla` holds the
//! full weight, `Factorized(r)` holds a `(u, v)` pair per weight matrix and
//! never materializes their product. Bias, BatchNorm, and LayerNorm vectors
//! are never factorized.

mod attention;
mod basic;
mod conv;
pub mod count;
mod fc;
pub mod gradcheck;
pub mod init;
mod lstm;
mod norm;

pub use gradcheck::{check_all as gradcheck_all, GradCheckRow};

pub use count::{mac_count, param_count};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What flows between layers: dense activations, or raw token ids ahead of
/// an embedding lookup.
#[derive(Clone, Debug)]
pub enum Activation {
    Dense(Tensor),
    Tokens(Vec<usize>),
}

impl Activation {
    pub fn dense(&self) -> Result<&Tensor> {
        match self {
            Activation::Dense(t) => Ok(t),
            Activation::Tokens(_) => Err(Error::Argument(
                "expected a dense activation, got token ids".into(),
            )),
        }
    }

    pub fn tokens(&self) -> Result<&[usize]> {
        match self {
            Activation::Tokens(t) => Ok(t),
            Activation::Dense(_) => Err(Error::Argument(
                "expected token ids, got a dense activation".into(),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankMode {
    Vanilla,
    Factorized(usize),
}

impl RankMode {
    pub fn rank(&self) -> Option<usize> {
        match self {
            RankMode::Vanilla => None,
            RankMode::Factorized(r) => Some(*r),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolOp {
    Max,
    Avg,
    GlobalAvg,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// Fully connected `y = x W + b`, weight shape `(m, n)`. A tied layer
    /// borrows its weight (transposed) from an embedding table and owns only
    /// its bias; the model executor resolves the sharing.
    Fc { m: usize, n: usize, tied: bool },
    /// 2-D convolution, weight shape `(c_in, c_out, k, k)`; the factorized
    /// form is a thin `r`-filter convolution followed by a 1x1 projection.
    Conv2d {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    /// LSTM cell with embedding dim `d`, hidden dim `h`, one merged bias per
    /// gate. Input is a `(T, d)` sequence processed step by step.
    LstmCell { d: usize, h: usize },
    /// Multi-head attention with `heads` heads of `head_dim` dims each
    /// (model width = heads * head_dim). Factorization is per head for the
    /// q/k/v projections and whole-matrix for the output projection.
    MultiHeadAttention {
        heads: usize,
        head_dim: usize,
        causal: bool,
    },
    /// Position-wise feed-forward `max(0, x W1 + b1) W2 + b2` with
    /// hidden = 4 * heads * head_dim.
    Ffn { heads: usize, head_dim: usize },
    BatchNorm { features: usize },
    LayerNorm { features: usize },
    Embedding { vocab: usize, dim: usize },
    Relu,
    /// Reshape (B, C, H, W) to (B, C*H*W) ahead of a classifier.
    Flatten,
    Pool {
        op: PoolOp,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Dropout { p: f64 },
}

impl LayerKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerKind::Fc { .. } => "fc",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::LstmCell { .. } => "lstm_cell",
            LayerKind::MultiHeadAttention { .. } => "multi_head_attention",
            LayerKind::Ffn { .. } => "ffn",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::LayerNorm { .. } => "layer_norm",
            LayerKind::Embedding { .. } => "embedding",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
            LayerKind::Pool { .. } => "pool",
            LayerKind::Dropout { .. } => "dropout",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub rank_mode: RankMode,
    pub has_bias: bool,
}

impl LayerSpec {
    pub fn vanilla(name: impl Into<String>, kind: LayerKind, has_bias: bool) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            rank_mode: RankMode::Vanilla,
            has_bias,
        }
    }

    /// Largest admissible factorization rank, if this kind can be factorized
    /// at all. For the LSTM the input-hidden and hidden-hidden branches share
    /// one rank, so the bound is the smaller of the two.
    pub fn natural_rank_bound(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Fc { m, n, tied } => {
                if tied {
                    None
                } else {
                    Some(m.min(n))
                }
            }
            LayerKind::Conv2d { c_in, c_out, k, .. } => Some((c_in * k * k).min(c_out)),
            LayerKind::LstmCell { d, h } => Some(d.min(h)),
            LayerKind::MultiHeadAttention { head_dim, .. } => Some(head_dim),
            LayerKind::Ffn { heads, head_dim } => Some(heads * head_dim),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let RankMode::Factorized(r) = self.rank_mode {
            let bound = self.natural_rank_bound().ok_or_else(|| {
                Error::Argument(format!(
                    "layer `{}` of kind {} cannot be factorized",
                    self.name,
                    self.kind.kind_name()
                ))
            })?;
            if r == 0 || r > bound {
                return Err(Error::Argument(format!(
                    "layer `{}`: rank {} outside 1..={}",
                    self.name, r, bound
                )));
            }
        }
        if self.has_bias && matches!(self.kind, LayerKind::MultiHeadAttention { .. }) {
            return Err(Error::Argument(format!(
                "layer `{}`: attention projections carry no bias",
                self.name
            )));
        }
        if let LayerKind::Dropout { p } = self.kind {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Argument(format!(
                    "layer `{}`: dropout probability {} outside [0, 1)",
                    self.name, p
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer caches captured by a train-mode forward pass.
#[derive(Clone, Debug)]
pub(crate) enum Cache {
    Fc(fc::FcCache),
    Conv(conv::ConvCache),
    Lstm(Vec<lstm::StepCache>),
    Attention(attention::AttnCache),
    Ffn(attention::FfnCache),
    BatchNorm(norm::BnCache),
    LayerNorm(norm::LnCache),
    Embedding(Vec<usize>),
    Relu(Vec<f64>),
    Flatten(Vec<usize>),
    MaxPool(basic::MaxPoolCache),
    AvgPool(Vec<usize>),
    Dropout(Vec<f64>),
}

/// Cache the input of an executor-resolved tied decode on its FC layer.
pub(crate) fn tied_cache(x: Tensor) -> Cache {
    Cache::Fc(fc::FcCache::tied(x))
}

pub(crate) fn take_tied_cache(layer: &mut Layer) -> Result<Tensor> {
    match layer.state.cache.take() {
        Some(Cache::Fc(c)) => Ok(c.into_input()),
        _ => Err(Error::State(format!(
            "tied decode `{}`: no cache",
            layer.spec.name
        ))),
    }
}

/// Parameters plus forward caches for one layer. A single `LayerState` must
/// not be shared across threads mid-step: the cache is mutable.
#[derive(Clone, Debug, Default)]
pub struct LayerState {
    pub params: Vec<(String, Tensor)>,
    pub(crate) cache: Option<Cache>,
    /// LSTM forward carry `(h, c)` across truncated-BPTT windows.
    pub(crate) lstm_carry: Option<(Tensor, Tensor)>,
    /// Dropout stream position; each train-mode forward consumes one draw.
    pub(crate) dropout_calls: u64,
    pub(crate) dropout_seed: u64,
}

impl LayerState {
    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.iter().any(|(n, _)| n == name)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Running statistics are checkpointed but never trained or weight-decayed.
pub fn is_trainable(param_name: &str) -> bool {
    param_name != "running_mean" && param_name != "running_var"
}

/// One layer: spec plus parameters.
#[derive(Clone, Debug)]
pub struct Layer {
    pub spec: LayerSpec,
    pub state: LayerState,
}

/// Named parameter gradients produced by one backward call.
pub type ParamGrads = Vec<(String, Tensor)>;

impl Layer {
    pub fn new(spec: LayerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Layer {
            spec,
            state: LayerState::default(),
        })
    }

    pub fn forward(&mut self, input: &Activation, mode: Mode) -> Result<Activation> {
        let out = match &self.spec.kind {
            LayerKind::Fc { .. } => fc::forward(self, input.dense()?, mode)?,
            LayerKind::Conv2d { .. } => conv::forward(self, input.dense()?, mode)?,
            LayerKind::LstmCell { .. } => lstm::forward(self, input.dense()?, mode)?,
            LayerKind::MultiHeadAttention { .. } => {
                let x = input.dense()?;
                attention::forward_self(self, x, mode)?
            }
            LayerKind::Ffn { .. } => attention::forward_ffn(self, input.dense()?, mode)?,
            LayerKind::BatchNorm { .. } => norm::forward_bn(self, input.dense()?, mode)?,
            LayerKind::LayerNorm { .. } => norm::forward_ln(self, input.dense()?, mode)?,
            LayerKind::Embedding { .. } => basic::forward_embedding(self, input.tokens()?, mode)?,
            LayerKind::Relu => basic::forward_relu(self, input.dense()?, mode)?,
            LayerKind::Flatten => basic::forward_flatten(self, input.dense()?, mode)?,
            LayerKind::Pool { .. } => basic::forward_pool(self, input.dense()?, mode)?,
            LayerKind::Dropout { .. } => basic::forward_dropout(self, input.dense()?, mode)?,
        };
        debug_assert!(out.all_finite(), "non-finite output in `{}`", self.spec.name);
        Ok(Activation::Dense(out))
    }

    /// Exact analytic gradients of the forward map. Requires a preceding
    /// train-mode forward; returns the input gradient (`None` for token
    /// inputs) and the named parameter gradients.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<(Option<Tensor>, ParamGrads)> {
        if self.state.cache.is_none() {
            return Err(Error::State(format!(
                "backward before train-mode forward in `{}`",
                self.spec.name
            )));
        }
        match &self.spec.kind {
            LayerKind::Fc { .. } => fc::backward(self, grad_out),
            LayerKind::Conv2d { .. } => conv::backward(self, grad_out),
            LayerKind::LstmCell { .. } => lstm::backward(self, grad_out),
            LayerKind::MultiHeadAttention { .. } => attention::backward_self(self, grad_out),
            LayerKind::Ffn { .. } => attention::backward_ffn(self, grad_out),
            LayerKind::BatchNorm { .. } => norm::backward_bn(self, grad_out),
            LayerKind::LayerNorm { .. } => norm::backward_ln(self, grad_out),
            LayerKind::Embedding { .. } => basic::backward_embedding(self, grad_out),
            LayerKind::Relu => basic::backward_relu(self, grad_out),
            LayerKind::Flatten => basic::backward_flatten(self, grad_out),
            LayerKind::Pool { .. } => basic::backward_pool(self, grad_out),
            LayerKind::Dropout { .. } => basic::backward_dropout(self, grad_out),
        }
    }

    /// Drop caches and recurrent carries (start of a fresh sequence/batch).
    pub fn reset(&mut self) {
        self.state.clear_cache();
        self.state.lstm_carry = None;
    }

    /// Trainable scalar count for this layer (closed form, spec-derived).
    pub fn param_count(&self) -> u64 {
        count::param_count(&self.spec)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests;

//! Model zoo: the exact benchmark architectures (vanilla and hybrid) plus
//! toy networks small enough to train on one core.
//!
//! A [`ModelGraph`] is an ordered list of layers plus a topology that wires
//! them together (plain chains, residual blocks, tied decoders, or the
//! encoder-decoder stack). Building a graph is cheap: parameters stay
//! unmaterialized until [`ModelGraph::init_params`], so counting reports on
//! the ImageNet-scale models never allocate weight memory.

mod cnn;
mod seq;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::factorize::FactorizationPlan;
use crate::layers::{
    count, init, Activation, Layer, LayerKind, Mode, ParamGrads, PoolOp, RankMode,
};
use crate::numerics::{matmul, Tensor};

pub const ARCH_IDS: [&str; 10] = [
    "vgg19_cifar10",
    "resnet18_cifar10",
    "resnet50_imagenet",
    "wrn50_2_imagenet",
    "lstm_wikitext2",
    "transformer_wmt16",
    "toy_mlp",
    "toy_cnn",
    "toy_lstm",
    "toy_transformer",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchMode {
    Vanilla,
    Hybrid,
}

impl std::str::FromStr for ArchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(ArchMode::Vanilla),
            "hybrid" => Ok(ArchMode::Hybrid),
            other => Err(Error::Argument(format!("unknown mode `{other}`"))),
        }
    }
}

/// What the model consumes per sample.
#[derive(Clone, Debug, PartialEq)]
pub enum InputKind {
    Image { c: usize, h: usize, w: usize },
    Vector { dim: usize },
    TokenSeq { vocab: usize },
    TokenPair { vocab: usize },
}

#[derive(Clone, Debug)]
pub struct ModelMeta {
    pub input: InputKind,
    pub classes: usize,
    pub init_seed: Option<u64>,
}

/// Execution plan node over layer indices.
#[derive(Clone, Debug)]
pub enum Node {
    L(usize),
    Res {
        body: Vec<Node>,
        shortcut: Vec<Node>,
        post_relu: Option<usize>,
    },
    /// Project with the transposed embedding table plus this FC's own bias.
    TiedDecode { fc: usize, embedding: usize },
}

/// Transformer encoder/decoder wiring over fused FC projection layers.
#[derive(Clone, Debug)]
pub struct TfAttn {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Clone, Debug)]
pub struct TfEncBlock {
    pub attn: TfAttn,
    pub ln1: usize,
    pub ffn1: usize,
    pub ffn2: usize,
    pub ln2: usize,
}

#[derive(Clone, Debug)]
pub struct TfDecBlock {
    pub self_attn: TfAttn,
    pub ln1: usize,
    pub cross_attn: TfAttn,
    pub ln2: usize,
    pub ffn1: usize,
    pub ffn2: usize,
    pub ln3: usize,
}

#[derive(Clone, Debug)]
pub struct EncDec {
    pub embedding: usize,
    pub heads: usize,
    pub enc_blocks: Vec<TfEncBlock>,
    pub enc_final_ln: usize,
    pub dec_blocks: Vec<TfDecBlock>,
    pub dec_final_ln: usize,
    pub decoder_fc: usize,
}

#[derive(Clone, Debug)]
pub enum Topology {
    Chain(Vec<Node>),
    EncDec(Box<EncDec>),
}

#[derive(Clone, Debug)]
pub enum ModelInput {
    /// Dense batch: (B, dim) vectors or (B, C, H, W) images.
    Batch(Tensor),
    /// One token sequence for the chain language models.
    Tokens(Vec<usize>),
    /// Source/target sequences for the encoder-decoder stack.
    TokenPair { src: Vec<usize>, tgt: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub arch_id: String,
    pub mode: ArchMode,
    pub layers: Vec<Layer>,
    pub topology: Topology,
    pub meta: ModelMeta,
    /// The plan a hybrid graph was built from; `None` for vanilla graphs.
    pub plan: Option<FactorizationPlan>,
}

/// Gradients accumulated by a backward pass, aligned with
/// `layers[i].state.params` slots.
pub struct GradStore {
    pub slots: Vec<Vec<Option<Tensor>>>,
}

impl GradStore {
    fn new(model: &ModelGraph) -> Self {
        GradStore {
            slots: model
                .layers
                .iter()
                .map(|l| vec![None; l.state.params.len()])
                .collect(),
        }
    }

    pub fn accumulate(&mut self, model: &ModelGraph, layer: usize, grads: ParamGrads) {
        for (name, g) in grads {
            let idx = model.layers[layer]
                .state
                .params
                .iter()
                .position(|(n, _)| *n == name)
                .unwrap_or_else(|| panic!("layer {layer} has no param `{name}`"));
            match &mut self.slots[layer][idx] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
    }

    /// Global L2 norm over all accumulated gradients.
    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for layer in &self.slots {
            for g in layer.iter().flatten() {
                sq += g.data().iter().map(|x| x * x).sum::<f64>();
            }
        }
        sq.sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for layer in &mut self.slots {
            for g in layer.iter_mut().flatten() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CountRow {
    pub name: String,
    pub kind: String,
    pub rank: Option<usize>,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CountReport {
    pub arch_id: String,
    pub mode: ArchMode,
    pub rows: Vec<CountRow>,
    pub total_params: u64,
    pub total_macs: u64,
}

/// Builds an architecture by id. Hybrid mode uses the supplied plan, or the
/// architecture's default plan when `None`. Parameters are unmaterialized.
pub fn build_model(
    arch_id: &str,
    mode: ArchMode,
    plan: Option<&FactorizationPlan>,
) -> Result<ModelGraph> {
    let mut model = match arch_id {
        "vgg19_cifar10" => cnn::vgg19_cifar10(),
        "resnet18_cifar10" => cnn::resnet18_cifar10(),
        "resnet50_imagenet" => cnn::resnet_imagenet(1),
        "wrn50_2_imagenet" => cnn::resnet_imagenet(2),
        "toy_mlp" => cnn::toy_mlp(),
        "toy_cnn" => cnn::toy_cnn(),
        "lstm_wikitext2" => seq::lstm_wikitext2(),
        "toy_lstm" => seq::toy_lstm(),
        "transformer_wmt16" => seq::transformer_wmt16(),
        "toy_transformer" => seq::toy_transformer(),
        other => return Err(Error::UnknownArch(other.to_string())),
    }?;
    model.arch_id = arch_id.to_string();
    validate_shapes(&model)?;
    if mode == ArchMode::Hybrid {
        let owned;
        let plan = match plan {
            Some(p) => p,
            None => {
                owned = crate::factorize::default_plan(&model)?;
                &owned
            }
        };
        crate::factorize::apply_plan_structure(&mut model, plan)?;
        model.mode = ArchMode::Hybrid;
        model.plan = Some(plan.clone());
    }
    Ok(model)
}

/// The default hybrid plan for an architecture id.
pub fn default_plan_for(arch_id: &str) -> Result<FactorizationPlan> {
    let model = build_model(arch_id, ArchMode::Vanilla, None)?;
    crate::factorize::default_plan(&model)
}

impl ModelGraph {
    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.spec.name == name)
    }

    pub fn is_initialized(&self) -> bool {
        self.layers
            .iter()
            .all(|l| !l.state.params.is_empty() || l.param_count() == 0)
    }

    /// Materializes every parameter tensor from a ChaCha stream seeded by
    /// `seed`; rebuilding with the same (arch, mode, seed) is bitwise
    /// reproducible.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            init::init_layer(layer, &mut rng);
            layer.state.dropout_seed = seed ^ ((i as u64 + 1) * 0x517c_c1b7_2722_0a95);
        }
        self.meta.init_seed = Some(seed);
    }

    pub fn param_count(&self) -> u64 {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Trainable parameter tensors in deterministic order, with their
    /// per-layer indices.
    pub fn trainable_params(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            for (pi, (name, _)) in layer.state.params.iter().enumerate() {
                if crate::layers::is_trainable(name) {
                    out.push((li, pi));
                }
            }
        }
        out
    }

    pub fn reset_sequence_state(&mut self) {
        for layer in &mut self.layers {
            layer.reset();
        }
    }

    pub fn forward(&mut self, input: &ModelInput, mode: Mode) -> Result<Tensor> {
        if !self.is_initialized() {
            return Err(Error::State(format!(
                "model `{}` has uninitialized parameters; call init_params",
                self.arch_id
            )));
        }
        match (&self.topology, input) {
            (Topology::Chain(_), ModelInput::Batch(x)) => {
                let nodes = match &self.topology {
                    Topology::Chain(n) => n.clone(),
                    _ => unreachable!(),
                };
                let out = forward_nodes(self, &nodes, Activation::Dense(x.clone()), mode)?;
                Ok(out.dense()?.clone())
            }
            (Topology::Chain(_), ModelInput::Tokens(ids)) => {
                let nodes = match &self.topology {
                    Topology::Chain(n) => n.clone(),
                    _ => unreachable!(),
                };
                let out = forward_nodes(self, &nodes, Activation::Tokens(ids.clone()), mode)?;
                Ok(out.dense()?.clone())
            }
            (Topology::EncDec(_), ModelInput::TokenPair { src, tgt }) => {
                seq::encdec_forward(self, src, tgt)
            }
            _ => Err(Error::Argument(format!(
                "input kind does not match architecture `{}`",
                self.arch_id
            ))),
        }
    }

    /// Backward through the chain topology; `grad` matches the forward
    /// output. Returns accumulated parameter gradients.
    pub fn backward(&mut self, grad: &Tensor) -> Result<GradStore> {
        let nodes = match &self.topology {
            Topology::Chain(n) => n.clone(),
            Topology::EncDec(_) => {
                return Err(Error::State(
                    "the encoder-decoder stack supports forward passes only".into(),
                ))
            }
        };
        let mut store = GradStore::new(self);
        backward_nodes(self, &nodes, grad.clone(), &mut store)?;
        Ok(store)
    }

    /// Per-layer and total parameter/MAC accounting for one input sample.
    /// `seq_len` sets the token count for sequence models (ignored for
    /// image/vector models).
    pub fn count_report(&self, seq_len: usize) -> Result<CountReport> {
        let mut rows = Vec::new();
        match &self.topology {
            Topology::Chain(nodes) => {
                let shape = match self.meta.input {
                    InputKind::Image { c, h, w } => vec![c, h, w],
                    InputKind::Vector { dim } => vec![dim],
                    InputKind::TokenSeq { .. } => vec![seq_len],
                    InputKind::TokenPair { .. } => unreachable!(),
                };
                walk_nodes(self, nodes, shape, &mut rows)?;
            }
            Topology::EncDec(_) => {
                seq::encdec_count(self, seq_len, &mut rows)?;
            }
        }
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_macs = rows.iter().map(|r| r.macs).sum();
        Ok(CountReport {
            arch_id: self.arch_id.clone(),
            mode: self.mode,
            rows,
            total_params,
            total_macs,
        })
    }
}

/// Walks a node list propagating per-sample shapes, accumulating count rows.
/// Returns the output shape.
fn walk_nodes(
    model: &ModelGraph,
    nodes: &[Node],
    mut shape: Vec<usize>,
    rows: &mut Vec<CountRow>,
) -> Result<Vec<usize>> {
    for node in nodes {
        match node {
            Node::L(i) => {
                let spec = &model.layers[*i].spec;
                rows.push(CountRow {
                    name: spec.name.clone(),
                    kind: spec.kind.kind_name().to_string(),
                    rank: spec.rank_mode.rank(),
                    params: count::param_count(spec),
                    macs: count::mac_count(spec, &shape)?,
                });
                shape = count::output_shape(spec, &shape)?;
            }
            Node::Res {
                body,
                shortcut,
                post_relu,
            } => {
                let body_out = walk_nodes(model, body, shape.clone(), rows)?;
                let short_out = walk_nodes(model, shortcut, shape.clone(), rows)?;
                if body_out != short_out {
                    return Err(Error::Dimension(format!(
                        "residual branches disagree: {:?} vs {:?}",
                        body_out, short_out
                    )));
                }
                shape = body_out;
                if let Some(pr) = post_relu {
                    let spec = &model.layers[*pr].spec;
                    rows.push(CountRow {
                        name: spec.name.clone(),
                        kind: spec.kind.kind_name().to_string(),
                        rank: None,
                        params: 0,
                        macs: count::mac_count(spec, &shape)?,
                    });
                }
            }
            Node::TiedDecode { fc, embedding } => {
                let fc_spec = &model.layers[*fc].spec;
                let LayerKind::Fc { m, n, .. } = fc_spec.kind else {
                    return Err(Error::State("tied decode over a non-FC layer".into()));
                };
                let rows_in = if shape.len() == 2 { shape[0] } else { 1 };
                rows.push(CountRow {
                    name: fc_spec.name.clone(),
                    kind: "fc".to_string(),
                    rank: None,
                    // tied weight lives in the embedding layer; bias only
                    params: count::param_count(fc_spec),
                    macs: (rows_in * m * n) as u64,
                });
                let _ = embedding;
                shape = vec![rows_in, n];
            }
        }
    }
    Ok(shape)
}

/// Validates that adjacent layer shapes compose, without materializing any
/// parameters.
fn validate_shapes(model: &ModelGraph) -> Result<()> {
    // reuse the count walker: it propagates shapes and fails on mismatch
    model.count_report(4).map(|_| ())
}

fn forward_nodes(
    model: &mut ModelGraph,
    nodes: &[Node],
    mut act: Activation,
    mode: Mode,
) -> Result<Activation> {
    for node in nodes {
        act = match node {
            Node::L(i) => model.layers[*i].forward(&act, mode)?,
            Node::Res {
                body,
                shortcut,
                post_relu,
            } => {
                let x0 = act;
                let a = forward_nodes(model, body, x0.clone(), mode)?;
                let b = if shortcut.is_empty() {
                    x0
                } else {
                    forward_nodes(model, shortcut, x0, mode)?
                };
                let sum = a.dense()?.add(b.dense()?)?;
                let mut out = Activation::Dense(sum);
                if let Some(pr) = post_relu {
                    out = model.layers[*pr].forward(&out, mode)?;
                }
                out
            }
            Node::TiedDecode { fc, embedding } => {
                let x = act.dense()?.clone();
                let table = model.layers[*embedding].state.param("weight")?.clone();
                let mut y = matmul(&x, &table.transposed())?;
                if model.layers[*fc].spec.has_bias {
                    let bias = model.layers[*fc].state.param("bias")?.clone();
                    for i in 0..y.rows() {
                        for j in 0..y.cols() {
                            let v = y.at2(i, j) + bias.data()[j];
                            y.set2(i, j, v);
                        }
                    }
                }
                if mode == Mode::Train {
                    model.layers[*fc].state.cache = Some(crate::layers::tied_cache(x));
                }
                Activation::Dense(y)
            }
        };
    }
    Ok(act)
}

fn backward_nodes(
    model: &mut ModelGraph,
    nodes: &[Node],
    mut grad: Tensor,
    store: &mut GradStore,
) -> Result<Tensor> {
    for node in nodes.iter().rev() {
        grad = match node {
            Node::L(i) => {
                let (gin, grads) = model.layers[*i].backward(&grad)?;
                store.accumulate(model, *i, grads);
                match gin {
                    Some(g) => g,
                    // token input: gradient stops here
                    None => return Ok(Tensor::zeros(&[0])),
                }
            }
            Node::Res {
                body,
                shortcut,
                post_relu,
            } => {
                let dsum = match post_relu {
                    Some(pr) => {
                        let (gin, grads) = model.layers[*pr].backward(&grad)?;
                        store.accumulate(model, *pr, grads);
                        gin.expect("relu has dense input")
                    }
                    None => grad,
                };
                let gb = backward_nodes(model, body, dsum.clone(), store)?;
                let gs = if shortcut.is_empty() {
                    dsum
                } else {
                    backward_nodes(model, shortcut, dsum, store)?
                };
                gb.add(&gs)?
            }
            Node::TiedDecode { fc, embedding } => {
                let x = crate::layers::take_tied_cache(&mut model.layers[*fc])?;
                let table = model.layers[*embedding].state.param("weight")?.clone();
                let d_table = matmul(&grad.transposed(), &x)?;
                store.accumulate(model, *embedding, vec![("weight".into(), d_table)]);
                if model.layers[*fc].spec.has_bias {
                    let mut db = Tensor::zeros(&[grad.cols()]);
                    for i in 0..grad.rows() {
                        for j in 0..grad.cols() {
                            db.data_mut()[j] += grad.at2(i, j);
                        }
                    }
                    store.accumulate(model, *fc, vec![("bias".into(), db)]);
                }
                matmul(&grad, &table)?
            }
        };
        if grad.is_empty() {
            break;
        }
    }
    Ok(grad)
}


/// Pool spec helper shared by the builders.
pub(crate) fn pool_spec(name: &str, op: PoolOp, k: usize, stride: usize, pad: usize) -> Layer {
    Layer::new(crate::layers::LayerSpec::vanilla(
        name,
        LayerKind::Pool { op, k, stride, pad },
        false,
    ))
    .expect("pool spec")
}

pub(crate) fn relu_spec(name: &str) -> Layer {
    Layer::new(crate::layers::LayerSpec::vanilla(name, LayerKind::Relu, false)).expect("relu spec")
}

#[allow(unused)]
fn rank_of(model: &ModelGraph, name: &str) -> Option<RankMode> {
    model
        .layer_index(name)
        .map(|i| model.layers[i].spec.rank_mode)
}

#[cfg(test)]
mod tests;

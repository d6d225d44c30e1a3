//! Convolutional and MLP architecture builders.
//!
//! The CIFAR ResNet-18 stem is a bare 3x3 convolution (no BatchNorm): that
//! variant is what reproduces the published 11,173,834 total exactly. Every
//! other convolution is bias-free and followed by a BatchNorm.

use super::{pool_spec, relu_spec, ArchMode, InputKind, ModelGraph, ModelMeta, Node, Topology};
use crate::error::Result;
use crate::layers::{Layer, LayerKind, LayerSpec, PoolOp};

pub(crate) struct ChainBuilder {
    pub layers: Vec<Layer>,
    pub nodes: Vec<Node>,
}

impl ChainBuilder {
    pub fn new() -> Self {
        ChainBuilder {
            layers: Vec::new(),
            nodes: Vec::new(),
        }
    }

    /// Registers a layer without wiring it into the chain.
    pub fn add(&mut self, layer: Layer) -> usize {
        self.layers.push(layer);
        self.layers.len() - 1
    }

    /// Registers a layer and appends it to the chain.
    pub fn chain(&mut self, layer: Layer) -> usize {
        let idx = self.add(layer);
        self.nodes.push(Node::L(idx));
        idx
    }

    pub fn finish(self, arch_id: &str, input: InputKind, classes: usize) -> ModelGraph {
        ModelGraph {
            arch_id: arch_id.to_string(),
            mode: ArchMode::Vanilla,
            layers: self.layers,
            topology: Topology::Chain(self.nodes),
            meta: ModelMeta {
                input,
                classes,
                init_seed: None,
            },
            plan: None,
        }
    }
}

pub(crate) fn conv(name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Layer {
    Layer::new(LayerSpec::vanilla(
        name,
        LayerKind::Conv2d {
            c_in,
            c_out,
            k,
            stride,
            pad,
        },
        false,
    ))
    .expect("conv spec")
}

pub(crate) fn bn(name: &str, features: usize) -> Layer {
    Layer::new(LayerSpec::vanilla(name, LayerKind::BatchNorm { features }, false)).expect("bn spec")
}

pub(crate) fn fc(name: &str, m: usize, n: usize, bias: bool) -> Layer {
    Layer::new(LayerSpec::vanilla(name, LayerKind::Fc { m, n, tied: false }, bias)).expect("fc spec")
}

fn flatten(name: &str) -> Layer {
    Layer::new(LayerSpec::vanilla(name, LayerKind::Flatten, false)).expect("flatten spec")
}

pub(crate) fn vgg19_cifar10() -> Result<ModelGraph> {
    let mut b = ChainBuilder::new();
    let groups: [(usize, usize); 5] = [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)];
    let mut c_in = 3;
    let mut idx = 0usize;
    for (g, (convs, width)) in groups.iter().enumerate() {
        for _ in 0..*convs {
            idx += 1;
            b.chain(conv(&format!("layer{idx}.conv{idx}"), c_in, *width, 3, 1, 1));
            b.chain(bn(&format!("layer{idx}.bn{idx}"), *width));
            b.chain(relu_spec(&format!("layer{idx}.relu{idx}")));
            c_in = *width;
        }
        b.chain(pool_spec(&format!("pool{}", g + 1), PoolOp::Max, 2, 2, 0));
    }
    b.chain(flatten("flatten"));
    b.chain(fc("layer17.fc17", 512, 512, true));
    b.chain(relu_spec("layer17.relu17"));
    b.chain(fc("layer18.fc18", 512, 512, true));
    b.chain(relu_spec("layer18.relu18"));
    b.chain(fc("layer19.fc19", 512, 10, true));
    Ok(b.finish(
        "vgg19_cifar10",
        InputKind::Image { c: 3, h: 32, w: 32 },
        10,
    ))
}

/// One 3x3/3x3 residual block; `stride` applies to the first conv.
fn basic_block(b: &mut ChainBuilder, pre: &str, c_in: usize, planes: usize, stride: usize) {
    let mut body = Vec::new();
    body.push(Node::L(b.add(conv(&format!("{pre}.conv1"), c_in, planes, 3, stride, 1))));
    body.push(Node::L(b.add(bn(&format!("{pre}.bn1"), planes))));
    body.push(Node::L(b.add(relu_spec(&format!("{pre}.relu1")))));
    body.push(Node::L(b.add(conv(&format!("{pre}.conv2"), planes, planes, 3, 1, 1))));
    body.push(Node::L(b.add(bn(&format!("{pre}.bn2"), planes))));
    let mut shortcut = Vec::new();
    if stride != 1 || c_in != planes {
        shortcut.push(Node::L(b.add(conv(
            &format!("{pre}.downsample.conv"),
            c_in,
            planes,
            1,
            stride,
            0,
        ))));
        shortcut.push(Node::L(b.add(bn(&format!("{pre}.downsample.bn"), planes))));
    }
    let post = b.add(relu_spec(&format!("{pre}.relu2")));
    b.nodes.push(Node::Res {
        body,
        shortcut,
        post_relu: Some(post),
    });
}

pub(crate) fn resnet18_cifar10() -> Result<ModelGraph> {
    let mut b = ChainBuilder::new();
    b.chain(conv("conv1", 3, 64, 3, 1, 1));
    b.chain(relu_spec("stem.relu"));
    let mut c_in = 64;
    for (s, (planes, stride)) in [(64, 1), (128, 2), (256, 2), (512, 2)].iter().enumerate() {
        for blk in 0..2 {
            let st = if blk == 0 { *stride } else { 1 };
            basic_block(&mut b, &format!("layer{}.{blk}", s + 1), c_in, *planes, st);
            c_in = *planes;
        }
    }
    b.chain(pool_spec("avgpool", PoolOp::GlobalAvg, 0, 1, 0));
    b.chain(fc("fc", 512, 10, true));
    Ok(b.finish(
        "resnet18_cifar10",
        InputKind::Image { c: 3, h: 32, w: 32 },
        10,
    ))
}

/// 1x1 / 3x3 / 1x1 bottleneck; `stride` applies to the 3x3.
fn bottleneck(b: &mut ChainBuilder, pre: &str, c_in: usize, width: usize, out: usize, stride: usize) {
    let mut body = Vec::new();
    body.push(Node::L(b.add(conv(&format!("{pre}.conv1"), c_in, width, 1, 1, 0))));
    body.push(Node::L(b.add(bn(&format!("{pre}.bn1"), width))));
    body.push(Node::L(b.add(relu_spec(&format!("{pre}.relu1")))));
    body.push(Node::L(b.add(conv(&format!("{pre}.conv2"), width, width, 3, stride, 1))));
    body.push(Node::L(b.add(bn(&format!("{pre}.bn2"), width))));
    body.push(Node::L(b.add(relu_spec(&format!("{pre}.relu2")))));
    body.push(Node::L(b.add(conv(&format!("{pre}.conv3"), width, out, 1, 1, 0))));
    body.push(Node::L(b.add(bn(&format!("{pre}.bn3"), out))));
    let mut shortcut = Vec::new();
    if stride != 1 || c_in != out {
        shortcut.push(Node::L(b.add(conv(
            &format!("{pre}.downsample.conv"),
            c_in,
            out,
            1,
            stride,
            0,
        ))));
        shortcut.push(Node::L(b.add(bn(&format!("{pre}.downsample.bn"), out))));
    }
    let post = b.add(relu_spec(&format!("{pre}.relu3")));
    b.nodes.push(Node::Res {
        body,
        shortcut,
        post_relu: Some(post),
    });
}

/// ResNet-50 for `width_mult = 1`, WideResNet-50-2 for `width_mult = 2`.
pub(crate) fn resnet_imagenet(width_mult: usize) -> Result<ModelGraph> {
    let mut b = ChainBuilder::new();
    b.chain(conv("conv1", 3, 64, 7, 2, 3));
    b.chain(bn("bn1", 64));
    b.chain(relu_spec("stem.relu"));
    b.chain(pool_spec("maxpool", PoolOp::Max, 3, 2, 1));
    let blocks = [3usize, 4, 6, 3];
    let mut c_in = 64;
    for (s, base) in [64usize, 128, 256, 512].iter().enumerate() {
        let width = base * width_mult;
        let out = base * 4;
        let stride = if s == 0 { 1 } else { 2 };
        for blk in 0..blocks[s] {
            let st = if blk == 0 { stride } else { 1 };
            bottleneck(&mut b, &format!("layer{}.{blk}", s + 1), c_in, width, out, st);
            c_in = out;
        }
    }
    b.chain(pool_spec("avgpool", PoolOp::GlobalAvg, 0, 1, 0));
    b.chain(fc("fc", 2048, 1000, true));
    let arch = if width_mult == 1 {
        "resnet50_imagenet"
    } else {
        "wrn50_2_imagenet"
    };
    Ok(b.finish(arch, InputKind::Image { c: 3, h: 224, w: 224 }, 1000))
}

pub(crate) fn toy_mlp() -> Result<ModelGraph> {
    let mut b = ChainBuilder::new();
    b.chain(fc("fc1", 32, 64, true));
    b.chain(relu_spec("relu1"));
    b.chain(fc("fc2", 64, 64, true));
    b.chain(relu_spec("relu2"));
    b.chain(fc("fc3", 64, 4, true));
    Ok(b.finish("toy_mlp", InputKind::Vector { dim: 32 }, 4))
}

pub(crate) fn toy_cnn() -> Result<ModelGraph> {
    let mut b = ChainBuilder::new();
    b.chain(conv("conv1", 1, 8, 3, 1, 1));
    b.chain(bn("bn1", 8));
    b.chain(relu_spec("relu1"));
    b.chain(pool_spec("pool1", PoolOp::Max, 2, 2, 0));
    b.chain(conv("conv2", 8, 16, 3, 1, 1));
    b.chain(bn("bn2", 16));
    b.chain(relu_spec("relu2"));
    b.chain(pool_spec("pool2", PoolOp::Max, 2, 2, 0));
    b.chain(flatten("flatten"));
    b.chain(fc("fc1", 64, 32, true));
    b.chain(relu_spec("relu3"));
    b.chain(fc("fc2", 32, 4, true));
    Ok(b.finish("toy_cnn", InputKind::Image { c: 1, h: 8, w: 8 }, 4))
}

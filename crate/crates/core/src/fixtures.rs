//! Reconstructed backbones for parameter counting and rewrite checks.
//!
//! Each builder comes in a full-width variant sized like the published
//! networks and a reduced-width variant small enough to execute. Every
//! convolution carries a bias and uses same padding unless noted; there is
//! no batch normalization.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::{ModelGraph, Node, Op};
use crate::ConvSpec;

/// Appends nodes with generated ids.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new() -> GraphBuilder {
        GraphBuilder::default()
    }

    fn push(&mut self, id: String, op: Op, inputs: &[&str]) -> String {
        self.nodes.push(Node::new(id.clone(), op, inputs));
        id
    }

    pub fn input(&mut self, channels: usize) -> String {
        self.push("input".into(), Op::Input { channels }, &[])
    }

    pub fn conv(&mut self, id: &str, x: &str, spec: ConvSpec) -> String {
        self.push(id.into(), Op::Conv3d(spec), &[x])
    }

    /// Same-padded, biased convolution with a cubic kernel.
    pub fn conv_same(&mut self, id: &str, x: &str, d: usize, cin: usize, cout: usize) -> String {
        self.conv(id, x, ConvSpec::same([d; 3], cin, cout).with_bias(true))
    }

    pub fn relu(&mut self, x: &str) -> String {
        self.push(format!("{x}_relu"), Op::Relu, &[x])
    }

    pub fn maxpool(&mut self, id: &str, x: &str, k: usize) -> String {
        self.push(id.into(), Op::MaxPool { window: [k; 3], stride: [k; 3] }, &[x])
    }

    pub fn upsample(&mut self, id: &str, x: &str, k: usize) -> String {
        self.push(id.into(), Op::Upsample { factor: [k; 3] }, &[x])
    }

    pub fn concat(&mut self, id: &str, xs: &[&str]) -> String {
        self.push(id.into(), Op::Concat, xs)
    }

    pub fn add(&mut self, id: &str, xs: &[&str]) -> String {
        self.push(id.into(), Op::Add, xs)
    }

    pub fn finish(mut self, x: &str) -> ModelGraph {
        self.push("output".into(), Op::Output, &[x]);
        ModelGraph::new(self.nodes).expect("fixture graphs are well formed")
    }
}

/// Stage widths, blocks per stage, input channels and classes of a 3D ResNet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResNetShape {
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
    pub in_channels: usize,
    pub classes: usize,
}

/// 3D ResNet-34 with basic blocks.
///
/// Assumptions: a 3x7x7 stem with stride (1, 2, 2) and no pooling after it;
/// stages 2 to 4 downsample by stride 2 in their first convolution and use
/// a 1x1x1 strided projection shortcut; the head is a 1x1x1 convolution to
/// the class scores in place of global pooling and a linear layer.
pub fn resnet(shape: ResNetShape) -> ModelGraph {
    let mut b = GraphBuilder::new();
    let x = b.input(shape.in_channels);
    let w0 = shape.widths[0];
    let stem = b.conv(
        "stem",
        &x,
        ConvSpec::new([3, 7, 7], shape.in_channels, w0).with_stride([1, 2, 2]).with_padding([1, 3, 3]).with_bias(true),
    );
    let mut cur = b.relu(&stem);
    let mut cin = w0;
    for (s, (&w, &n)) in shape.widths.iter().zip(&shape.blocks).enumerate() {
        for k in 0..n {
            let p = format!("s{}b{}", s + 1, k + 1);
            let stride = if s > 0 && k == 0 { 2 } else { 1 };
            let c1 = b.conv(
                &format!("{p}_conv1"),
                &cur,
                ConvSpec::same([3; 3], cin, w).with_stride([stride; 3]).with_bias(true),
            );
            let r1 = b.relu(&c1);
            let c2 = b.conv_same(&format!("{p}_conv2"), &r1, 3, w, w);
            let short = if stride != 1 || cin != w {
                b.conv(
                    &format!("{p}_proj"),
                    &cur,
                    ConvSpec::new([1; 3], cin, w).with_stride([stride; 3]).with_bias(true),
                )
            } else {
                cur.clone()
            };
            let sum = b.add(&format!("{p}_add"), &[&c2, &short]);
            cur = b.relu(&sum);
            cin = w;
        }
    }
    let head = b.conv("head", &cur, ConvSpec::new([1; 3], cin, shape.classes).with_bias(true));
    b.finish(&head)
}

pub fn resnet34_full() -> ModelGraph {
    resnet(ResNetShape { widths: [64, 128, 256, 512], blocks: [3, 4, 6, 3], in_channels: 3, classes: 101 })
}

pub fn resnet34_reduced() -> ModelGraph {
    resnet(ResNetShape { widths: [4, 8, 8, 16], blocks: [3, 4, 6, 3], in_channels: 3, classes: 5 })
}

/// Width parameters of the segmentation DenseNet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseNetShape {
    pub stem: usize,
    pub growth: usize,
    pub blocks: usize,
    pub layers: usize,
    pub in_channels: usize,
    pub classes: usize,
}

/// Densely connected segmentation network.
///
/// Assumptions: a 3x3x3 stem; each dense layer is a 3x3x3 convolution to
/// `growth` channels followed by ReLU, fed with the concatenation of the
/// block input and all earlier layers of the block; each block ends in a
/// 1x1x1 transition without compression whose output is upsampled back to
/// full resolution as a side output and max-pooled by 2 for the next block;
/// a 1x1x1 classifier reads the concatenated side outputs.
pub fn densenet(shape: DenseNetShape) -> ModelGraph {
    let mut b = GraphBuilder::new();
    let x = b.input(shape.in_channels);
    let stem = b.conv_same("stem", &x, 3, shape.in_channels, shape.stem);
    let mut cur = b.relu(&stem);
    let mut c = shape.stem;
    let mut sides: Vec<String> = Vec::new();
    for k in 0..shape.blocks {
        let mut feats = alloc::vec![cur.clone()];
        for j in 0..shape.layers {
            let p = format!("d{}l{}", k + 1, j + 1);
            let inp = if feats.len() == 1 {
                feats[0].clone()
            } else {
                let refs: Vec<&str> = feats.iter().map(String::as_str).collect();
                b.concat(&format!("{p}_cat"), &refs)
            };
            let conv = b.conv_same(&format!("{p}_conv"), &inp, 3, c + j * shape.growth, shape.growth);
            feats.push(b.relu(&conv));
        }
        c += shape.layers * shape.growth;
        let refs: Vec<&str> = feats.iter().map(String::as_str).collect();
        let cat = b.concat(&format!("d{}_out", k + 1), &refs);
        let t = b.conv_same(&format!("t{}", k + 1), &cat, 1, c, c);
        let t = b.relu(&t);
        sides.push(if k == 0 { t.clone() } else { b.upsample(&format!("t{}_up", k + 1), &t, 1 << k) });
        if k + 1 < shape.blocks {
            cur = b.maxpool(&format!("t{}_pool", k + 1), &t, 2);
        }
    }
    let refs: Vec<&str> = sides.iter().map(String::as_str).collect();
    let all = b.concat("sides", &refs);
    let head = b.conv_same("classifier", &all, 1, sides_channels(&shape), shape.classes);
    b.finish(&head)
}

fn sides_channels(s: &DenseNetShape) -> usize {
    (1..=s.blocks).map(|k| s.stem + k * s.layers * s.growth).sum()
}

pub fn densenet_full() -> ModelGraph {
    densenet(DenseNetShape { stem: 32, growth: 28, blocks: 5, layers: 4, in_channels: 1, classes: 4 })
}

pub fn densenet_reduced() -> ModelGraph {
    densenet(DenseNetShape { stem: 8, growth: 4, blocks: 5, layers: 4, in_channels: 1, classes: 4 })
}

/// Three-level 3D U-Net.
///
/// Assumptions: every level is a VGG pair of 3x3x3 convolutions with ReLU;
/// downsampling is a 2x2x2 max pool; the decoder upsamples by nearest
/// neighbour without learnable parameters and concatenates the skip
/// connection before its VGG pair; a 1x1x1 convolution produces the output
/// channels.
pub fn unet(widths: [usize; 4], in_channels: usize, out_channels: usize) -> ModelGraph {
    let mut b = GraphBuilder::new();
    let x = b.input(in_channels);
    let vgg = |b: &mut GraphBuilder, p: &str, x: &str, cin: usize, w: usize| {
        let c1 = b.conv_same(&format!("{p}_conv1"), x, 3, cin, w);
        let r1 = b.relu(&c1);
        let c2 = b.conv_same(&format!("{p}_conv2"), &r1, 3, w, w);
        b.relu(&c2)
    };
    let mut skips = Vec::new();
    let mut cur = x;
    let mut cin = in_channels;
    for (l, &w) in widths.iter().enumerate() {
        if l > 0 {
            cur = b.maxpool(&format!("down{l}"), &cur, 2);
        }
        cur = vgg(&mut b, &format!("enc{}", l + 1), &cur, cin, w);
        skips.push(cur.clone());
        cin = w;
    }
    for l in (0..widths.len() - 1).rev() {
        let up = b.upsample(&format!("up{}", l + 1), &cur, 2);
        let cat = b.concat(&format!("cat{}", l + 1), &[&up, &skips[l]]);
        cur = vgg(&mut b, &format!("dec{}", l + 1), &cat, cin + widths[l], widths[l]);
        cin = widths[l];
    }
    let head = b.conv_same("head", &cur, 1, cin, out_channels);
    b.finish(&head)
}

pub fn unet_full() -> ModelGraph {
    unet([64, 128, 256, 512], 1, 3)
}

pub fn unet_reduced() -> ModelGraph {
    unet([4, 8, 8, 16], 1, 3)
}

/// Name, full-width and reduced-width builders, and an input shape that the
/// reduced variant accepts.
pub struct Fixture {
    pub name: &'static str,
    pub full: fn() -> ModelGraph,
    pub reduced: fn() -> ModelGraph,
    pub reduced_input: [usize; 5],
}

pub const ALL: [Fixture; 3] = [
    Fixture { name: "resnet34_3d", full: resnet34_full, reduced: resnet34_reduced, reduced_input: [1, 3, 4, 8, 8] },
    Fixture { name: "densenet", full: densenet_full, reduced: densenet_reduced, reduced_input: [1, 1, 16, 16, 16] },
    Fixture { name: "unet", full: unet_full, reduced: unet_reduced, reduced_input: [1, 1, 8, 8, 8] },
];

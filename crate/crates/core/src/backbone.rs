//! Convolutional feature extractors. Each family is split into four blocks
//! (shallow to deep) that progressive unfreezing toggles as units.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Graph, NodeId, ParamStore};

pub const NUM_BLOCKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneFamily {
    AlexnetLike,
    Resnet18Like,
    Densenet121Like,
    Tiny,
}

impl BackboneFamily {
    /// Base channel width matching the reference architecture.
    pub fn reference_width(self) -> usize {
        match self {
            BackboneFamily::AlexnetLike => 64,
            BackboneFamily::Resnet18Like => 64,
            BackboneFamily::Densenet121Like => 32,
            BackboneFamily::Tiny => 16,
        }
    }

    /// Smallest spatial input the family accepts.
    pub fn min_input(self) -> usize {
        match self {
            BackboneFamily::AlexnetLike => 63,
            _ => 1,
        }
    }
}

impl fmt::Display for BackboneFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BackboneFamily::AlexnetLike => "alexnet_like",
            BackboneFamily::Resnet18Like => "resnet18_like",
            BackboneFamily::Densenet121Like => "densenet121_like",
            BackboneFamily::Tiny => "tiny",
        };
        f.write_str(s)
    }
}

impl FromStr for BackboneFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alexnet_like" | "alexnet" => Ok(BackboneFamily::AlexnetLike),
            "resnet18_like" | "resnet18" | "resnet" => Ok(BackboneFamily::Resnet18Like),
            "densenet121_like" | "densenet121" | "densenet" => Ok(BackboneFamily::Densenet121Like),
            "tiny" => Ok(BackboneFamily::Tiny),
            other => Err(Error::Config(format!("unknown backbone family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        block: usize,
        rng: &mut R,
    ) -> Self {
        ConvBn {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, stride, pad, false, Some(block), rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout, Some(block)),
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let y = self.conv.forward(g, x);
        self.bn.forward(g, y)
    }
}

#[derive(Debug, Clone)]
struct TinyNet {
    convs: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
struct AlexNet {
    stages: Vec<Vec<Conv2d>>,
}

#[derive(Debug, Clone)]
struct BasicBlock {
    a: ConvBn,
    b: ConvBn,
    down: Option<ConvBn>,
}

#[derive(Debug, Clone)]
struct ResNet {
    stem: ConvBn,
    stages: Vec<Vec<BasicBlock>>,
}

#[derive(Debug, Clone)]
struct DenseLayer {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
}

#[derive(Debug, Clone)]
struct Transition {
    bn: BatchNorm2d,
    conv: Conv2d,
}

#[derive(Debug, Clone)]
struct DenseNet {
    stem: ConvBn,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    final_bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
enum Arch {
    Tiny(TinyNet),
    Alex(AlexNet),
    Res(ResNet),
    Dense(DenseNet),
}

/// A feature extractor mapping a (B, 3, H, W) batch to a (B, C, h, w) map.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub family: BackboneFamily,
    pub width: usize,
    pub out_channels: usize,
    arch: Arch,
}

const DENSENET_LAYERS: [usize; 4] = [6, 12, 24, 16];

impl Backbone {
    /// Registers the backbone's parameters under `prefix` in `store`.
    /// `width` scales channel counts; pass `family.reference_width()` for
    /// the full-size architecture (growth rate for the DenseNet family).
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        family: BackboneFamily,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("backbone width must be positive".into()));
        }
        let name = |rest: &str| format!("{prefix}.{rest}");
        let (arch, out_channels) = match family {
            BackboneFamily::Tiny => {
                let chans = [3, width, 2 * width, 4 * width, 4 * width];
                let convs = (0..NUM_BLOCKS)
                    .map(|b| {
                        Conv2d::new(store, &name(&format!("block{b}.conv")), chans[b], chans[b + 1], 3, 1, 1, true, Some(b), rng)
                    })
                    .collect();
                (Arch::Tiny(TinyNet { convs }), chans[NUM_BLOCKS])
            }
            BackboneFamily::AlexnetLike => {
                let s = |c: usize| (c * width).div_ceil(64).max(1);
                let c = [3, s(64), s(192), s(384), s(256), s(256)];
                let stages = vec![
                    vec![Conv2d::new(store, &name("block0.conv0"), c[0], c[1], 11, 4, 2, true, Some(0), rng)],
                    vec![Conv2d::new(store, &name("block1.conv0"), c[1], c[2], 5, 1, 2, true, Some(1), rng)],
                    vec![
                        Conv2d::new(store, &name("block2.conv0"), c[2], c[3], 3, 1, 1, true, Some(2), rng),
                        Conv2d::new(store, &name("block2.conv1"), c[3], c[4], 3, 1, 1, true, Some(2), rng),
                    ],
                    vec![Conv2d::new(store, &name("block3.conv0"), c[4], c[5], 3, 1, 1, true, Some(3), rng)],
                ];
                (Arch::Alex(AlexNet { stages }), c[5])
            }
            BackboneFamily::Resnet18Like => {
                let stem = ConvBn::new(store, &name("block0.stem"), 3, width, 7, 2, 3, 0, rng);
                let mut stages = Vec::new();
                let mut cin = width;
                for b in 0..NUM_BLOCKS {
                    let cout = width << b;
                    let stride = if b == 0 { 1 } else { 2 };
                    let mut blocks = Vec::new();
                    for i in 0..2 {
                        let (bin, bs) = if i == 0 { (cin, stride) } else { (cout, 1) };
                        let base = name(&format!("block{b}.unit{i}"));
                        let down = (bs != 1 || bin != cout)
                            .then(|| ConvBn::new(store, &format!("{base}.down"), bin, cout, 1, bs, 0, b, rng));
                        blocks.push(BasicBlock {
                            a: ConvBn::new(store, &format!("{base}.a"), bin, cout, 3, bs, 1, b, rng),
                            b: ConvBn::new(store, &format!("{base}.b"), cout, cout, 3, 1, 1, b, rng),
                            down,
                        });
                    }
                    stages.push(blocks);
                    cin = cout;
                }
                (Arch::Res(ResNet { stem, stages }), cin)
            }
            BackboneFamily::Densenet121Like => {
                let growth = width;
                let mut channels = 2 * growth;
                let stem = ConvBn::new(store, &name("block0.stem"), 3, channels, 7, 2, 3, 0, rng);
                let mut blocks = Vec::new();
                let mut transitions = Vec::new();
                for (b, &layers) in DENSENET_LAYERS.iter().enumerate() {
                    let mut block = Vec::new();
                    for l in 0..layers {
                        let base = name(&format!("block{b}.dense{l}"));
                        block.push(DenseLayer {
                            bn1: BatchNorm2d::new(store, &format!("{base}.bn1"), channels, Some(b)),
                            conv1: Conv2d::new(store, &format!("{base}.conv1"), channels, 4 * growth, 1, 1, 0, false, Some(b), rng),
                            bn2: BatchNorm2d::new(store, &format!("{base}.bn2"), 4 * growth, Some(b)),
                            conv2: Conv2d::new(store, &format!("{base}.conv2"), 4 * growth, growth, 3, 1, 1, false, Some(b), rng),
                        });
                        channels += growth;
                    }
                    blocks.push(block);
                    if b + 1 < NUM_BLOCKS {
                        let base = name(&format!("block{b}.transition"));
                        transitions.push(Transition {
                            bn: BatchNorm2d::new(store, &format!("{base}.bn"), channels, Some(b)),
                            conv: Conv2d::new(store, &format!("{base}.conv"), channels, channels / 2, 1, 1, 0, false, Some(b), rng),
                        });
                        channels /= 2;
                    }
                }
                let final_bn = BatchNorm2d::new(store, &name("block3.final_bn"), channels, Some(NUM_BLOCKS - 1));
                (
                    Arch::Dense(DenseNet {
                        stem,
                        blocks,
                        transitions,
                        final_bn,
                    }),
                    channels,
                )
            }
        };
        Ok(Backbone {
            family,
            width,
            out_channels,
            arch,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        match &self.arch {
            Arch::Tiny(net) => {
                let mut h = x;
                for conv in &net.convs {
                    h = conv.forward(g, h);
                    h = g.relu(h);
                    let (_, _, hh, ww) = g.value(h).dims4();
                    if hh >= 2 && ww >= 2 {
                        h = g.max_pool(h, 2, 2, 0);
                    }
                }
                h
            }
            Arch::Alex(net) => {
                let mut h = x;
                for (b, stage) in net.stages.iter().enumerate() {
                    for conv in stage {
                        h = conv.forward(g, h);
                        h = g.relu(h);
                    }
                    if b != 2 {
                        let (_, _, hh, ww) = g.value(h).dims4();
                        if hh >= 3 && ww >= 3 {
                            h = g.max_pool(h, 3, 2, 0);
                        }
                    }
                }
                h
            }
            Arch::Res(net) => {
                let mut h = net.stem.forward(g, x);
                h = g.relu(h);
                h = g.max_pool(h, 3, 2, 1);
                for stage in &net.stages {
                    for unit in stage {
                        let mut y = unit.a.forward(g, h);
                        y = g.relu(y);
                        y = unit.b.forward(g, y);
                        let skip = match &unit.down {
                            Some(d) => d.forward(g, h),
                            None => h,
                        };
                        y = g.add(y, skip);
                        h = g.relu(y);
                    }
                }
                h
            }
            Arch::Dense(net) => {
                let mut h = net.stem.forward(g, x);
                h = g.relu(h);
                h = g.max_pool(h, 3, 2, 1);
                for (b, block) in net.blocks.iter().enumerate() {
                    let mut features = vec![h];
                    for layer in block {
                        let input = if features.len() == 1 { features[0] } else { g.concat(&features) };
                        let mut y = layer.bn1.forward(g, input);
                        y = g.relu(y);
                        y = layer.conv1.forward(g, y);
                        y = layer.bn2.forward(g, y);
                        y = g.relu(y);
                        y = layer.conv2.forward(g, y);
                        features.push(y);
                    }
                    h = g.concat(&features);
                    if let Some(t) = net.transitions.get(b) {
                        h = t.bn.forward(g, h);
                        h = g.relu(h);
                        h = t.conv.forward(g, h);
                        let (_, _, hh, ww) = g.value(h).dims4();
                        if hh >= 2 && ww >= 2 {
                            h = g.avg_pool(h, 2);
                        }
                    }
                }
                h = net.final_bn.forward(g, h);
                g.relu(h)
            }
        }
    }
}

//! Five-level feature encoders: a plain double-conv CNN and ResNet variants.

use crate::error::Result;
use crate::graph::{ConvGeom, Graph, Var};
use crate::models::Backbone;
use crate::nn::{BatchNorm2d, Conv2d, ConvBnRelu};
use crate::params::Init;

/// Stage widths of the plain encoder, full resolution first.
pub const PLAIN_WIDTHS: [usize; 5] = [16, 32, 64, 128, 256];

#[derive(Clone, Copy, Debug)]
enum BlockKind {
    Basic,
    Bottleneck,
}

struct ResNetLayout {
    stem: usize,
    planes: [usize; 4],
    blocks: [usize; 4],
    kind: BlockKind,
}

impl ResNetLayout {
    fn of(backbone: Backbone) -> Option<Self> {
        let std_planes = [64, 128, 256, 512];
        Some(match backbone {
            Backbone::PlainCnn => return None,
            Backbone::Resnet18 => Self {
                stem: 64,
                planes: std_planes,
                blocks: [2, 2, 2, 2],
                kind: BlockKind::Basic,
            },
            Backbone::Resnet34 => Self {
                stem: 64,
                planes: std_planes,
                blocks: [3, 4, 6, 3],
                kind: BlockKind::Basic,
            },
            Backbone::Resnet50 => Self {
                stem: 64,
                planes: std_planes,
                blocks: [3, 4, 6, 3],
                kind: BlockKind::Bottleneck,
            },
            Backbone::ResnetTiny => Self {
                stem: 8,
                planes: [16, 32, 64, 128],
                blocks: [2, 2, 2, 2],
                kind: BlockKind::Basic,
            },
        })
    }

    fn expansion(&self) -> usize {
        match self.kind {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// Channel counts of F1..F5.
pub fn pyramid_channels(backbone: Backbone) -> [usize; 5] {
    match ResNetLayout::of(backbone) {
        None => PLAIN_WIDTHS,
        Some(l) => {
            let e = l.expansion();
            [l.stem, l.planes[0] * e, l.planes[1] * e, l.planes[2] * e, l.planes[3] * e]
        }
    }
}

/// Downsampling factor of F1 relative to the input.
pub fn first_level_stride(backbone: Backbone) -> usize {
    match backbone {
        Backbone::PlainCnn => 1,
        _ => 2,
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    conv1: ConvBnRelu,
    conv2: ConvBnRelu,
}

impl DoubleConv {
    fn new(init: &mut Init, cin: usize, cout: usize) -> Self {
        Self {
            conv1: ConvBnRelu::new(&mut init.sub("conv1"), cin, cout, 3, false),
            conv2: ConvBnRelu::new(&mut init.sub("conv2"), cout, cout, 3, false),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, x)?;
        self.conv2.forward(g, y)
    }
}

#[derive(Clone, Debug)]
struct Downsample {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
struct ResBlock {
    convs: Vec<(Conv2d, BatchNorm2d)>,
    downsample: Option<Downsample>,
}

impl ResBlock {
    fn new(init: &mut Init, kind: BlockKind, cin: usize, planes: usize, stride: usize) -> Self {
        let mut convs = Vec::new();
        let mut add = |init: &mut Init, i: usize, cin: usize, cout: usize, k: usize, stride: usize| {
            let geom = ConvGeom {
                stride,
                padding: (k - 1) / 2,
                dilation: 1,
            };
            let conv = Conv2d::new(&mut init.sub(format!("conv{i}")), cin, cout, k, geom, false);
            let bn = BatchNorm2d::new(&mut init.sub(format!("bn{i}")), cout);
            convs.push((conv, bn));
        };
        let cout = match kind {
            BlockKind::Basic => {
                add(init, 1, cin, planes, 3, stride);
                add(init, 2, planes, planes, 3, 1);
                planes
            }
            BlockKind::Bottleneck => {
                add(init, 1, cin, planes, 1, 1);
                add(init, 2, planes, planes, 3, stride);
                add(init, 3, planes, planes * 4, 1, 1);
                planes * 4
            }
        };
        let downsample = (stride != 1 || cin != cout).then(|| {
            let mut ds = init.sub("downsample");
            let geom = ConvGeom {
                stride,
                padding: 0,
                dilation: 1,
            };
            Downsample {
                conv: Conv2d::new(&mut ds.sub("0"), cin, cout, 1, geom, false),
                bn: BatchNorm2d::new(&mut ds.sub("1"), cout),
            }
        });
        Self { convs, downsample }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut y = x;
        let last = self.convs.len() - 1;
        for (i, (conv, bn)) in self.convs.iter().enumerate() {
            y = conv.forward(g, y)?;
            y = bn.forward(g, y)?;
            if i != last {
                y = g.relu(y);
            }
        }
        let skip = match &self.downsample {
            Some(ds) => {
                let s = ds.conv.forward(g, x)?;
                ds.bn.forward(g, s)?
            }
            None => x,
        };
        let sum = g.add(y, skip)?;
        Ok(g.relu(sum))
    }
}

#[derive(Clone, Debug)]
struct ResNet {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    layers: Vec<Vec<ResBlock>>,
}

#[derive(Clone, Debug)]
enum Body {
    Plain(Vec<DoubleConv>),
    ResNet(ResNet),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    body: Body,
    in_channels: usize,
    channels: [usize; 5],
}

impl Encoder {
    /// `in_channels` is 3 for pretrained stems (grayscale is replicated) and 1 otherwise.
    pub fn new(init: &mut Init, backbone: Backbone, in_channels: usize) -> Self {
        let channels = pyramid_channels(backbone);
        let body = match ResNetLayout::of(backbone) {
            None => {
                let mut stages = Vec::with_capacity(5);
                let mut cin = in_channels;
                for (l, &w) in PLAIN_WIDTHS.iter().enumerate() {
                    stages.push(DoubleConv::new(&mut init.sub(format!("level{}", l + 1)), cin, w));
                    cin = w;
                }
                Body::Plain(stages)
            }
            Some(layout) => {
                let stem_geom = ConvGeom {
                    stride: 2,
                    padding: 3,
                    dilation: 1,
                };
                let conv1 = Conv2d::new(&mut init.sub("conv1"), in_channels, layout.stem, 7, stem_geom, false);
                let bn1 = BatchNorm2d::new(&mut init.sub("bn1"), layout.stem);
                let mut cin = layout.stem;
                let mut layers = Vec::with_capacity(4);
                for (li, (&planes, &n)) in layout.planes.iter().zip(&layout.blocks).enumerate() {
                    let mut layer_init = init.sub(format!("layer{}", li + 1));
                    let mut blocks = Vec::with_capacity(n);
                    for b in 0..n {
                        let stride = if b == 0 && li > 0 { 2 } else { 1 };
                        blocks.push(ResBlock::new(&mut layer_init.sub(b), layout.kind, cin, planes, stride));
                        cin = planes * layout.expansion();
                    }
                    layers.push(blocks);
                }
                Body::ResNet(ResNet { conv1, bn1, layers })
            }
        };
        Self {
            body,
            in_channels,
            channels,
        }
    }

    pub fn channels(&self) -> [usize; 5] {
        self.channels
    }

    /// Returns F1..F5 for a `B x 1 x H x W` input.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<[Var; 5]> {
        let x = if self.in_channels > 1 {
            let copies = vec![x; self.in_channels];
            g.concat(&copies)?
        } else {
            x
        };
        match &self.body {
            Body::Plain(stages) => {
                let mut feats = Vec::with_capacity(5);
                let mut y = x;
                for (l, stage) in stages.iter().enumerate() {
                    if l > 0 {
                        y = g.max_pool(y, 2, 2, 0)?;
                    }
                    y = stage.forward(g, y)?;
                    feats.push(y);
                }
                Ok(feats.try_into().expect("five stages"))
            }
            Body::ResNet(net) => {
                let y = net.conv1.forward(g, x)?;
                let y = net.bn1.forward(g, y)?;
                let f1 = g.relu(y);
                let mut y = g.max_pool(f1, 3, 2, 1)?;
                let mut feats = vec![f1];
                for layer in &net.layers {
                    for block in layer {
                        y = block.forward(g, y)?;
                    }
                    feats.push(y);
                }
                Ok(feats.try_into().expect("five levels"))
            }
        }
    }
}

//! Full-scale (UNet3+) and single-scale (UNet) decoders.

use crate::attention::{Aspp, DecoderPlan, NodeAttention};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{ConvBnRelu, ConvTranspose2};
use crate::params::Init;

#[derive(Clone, Debug)]
struct FullScaleNode {
    sources: Vec<ConvBnRelu>,
    fuse: ConvBnRelu,
    attention: Option<NodeAttention>,
}

/// Decoder nodes D4..D1, each aggregating all five scales.
///
/// Node `i` sees encoder levels `j <= i` max-pooled by `2^(i-j)`, deeper
/// decoder nodes (and the bottleneck for `j = 5`) bilinearly upsampled, each
/// mapped to `C` channels before a `5C -> C` fusion.
#[derive(Clone, Debug)]
pub struct FullScaleDecoder {
    aspp: Option<Aspp>,
    /// `nodes[i - 1]` is node `i`.
    nodes: Vec<FullScaleNode>,
    channels: usize,
}

impl FullScaleDecoder {
    pub fn new(init: &mut Init, plan: &DecoderPlan) -> Result<Self> {
        let enc = plan.encoder_channels;
        let c = plan.decoder_channels;
        let aspp = match &plan.bottleneck {
            Some(a) => Some(Aspp::new(&mut init.sub("aspp"), enc[4], &a.rates, a.out_channels)?),
            None => None,
        };
        let source_channels = |i: usize, j: usize| match j {
            _ if j <= i => enc[j - 1],
            5 => plan.bottleneck_channels(),
            _ => c,
        };
        let mut nodes = Vec::with_capacity(4);
        for i in 1..=4 {
            let mut node = init.sub(format!("node{i}"));
            let sources = (1..=5)
                .map(|j| ConvBnRelu::new(&mut node.sub(format!("source{j}")), source_channels(i, j), c, 3, false))
                .collect();
            let fuse = ConvBnRelu::new(&mut node.sub("fuse"), 5 * c, c, 3, false);
            let attention = NodeAttention::build(&mut node, plan.node_attention, c);
            nodes.push(FullScaleNode {
                sources,
                fuse,
                attention,
            });
        }
        Ok(Self {
            aspp,
            nodes,
            channels: c,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.channels
    }

    /// Input width of each fusion convolution, node 1 first.
    pub fn fusion_in_channels(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.fuse.conv.in_channels).collect()
    }

    pub fn attention_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.attention.is_some()).count()
    }

    pub fn has_aspp(&self) -> bool {
        self.aspp.is_some()
    }

    pub fn target_layer(&self) -> String {
        self.nodes[0].fuse.conv.name().to_string()
    }

    /// Returns D1.
    pub fn forward(&self, g: &mut Graph, feats: [Var; 5]) -> Result<Var> {
        let bottleneck = match &self.aspp {
            Some(a) => a.forward(g, feats[4])?,
            None => feats[4],
        };
        // deeper[k - 1] holds the decoder-side output at level k
        let mut deeper: [Option<Var>; 5] = [None, None, None, None, Some(bottleneck)];
        for i in (1..=4).rev() {
            let node = &self.nodes[i - 1];
            let (_, _, h, w) = g.value(feats[i - 1]).dims4()?;
            let mut parts = Vec::with_capacity(5);
            for j in 1..=5 {
                let src = if j < i {
                    let k = 1 << (i - j);
                    g.max_pool(feats[j - 1], k, k, 0)?
                } else if j == i {
                    feats[j - 1]
                } else {
                    let d = deeper[j - 1].expect("deeper nodes are computed first");
                    g.resize(d, h, w)?
                };
                parts.push(node.sources[j - 1].forward(g, src)?);
            }
            let cat = g.concat(&parts)?;
            let mut y = node.fuse.forward(g, cat)?;
            if let Some(att) = &node.attention {
                y = att.forward(g, y)?;
            }
            deeper[i - 1] = Some(y);
        }
        Ok(deeper[0].expect("node 1 computed"))
    }
}

#[derive(Clone, Debug)]
struct SingleScaleNode {
    up: ConvTranspose2,
    conv1: ConvBnRelu,
    conv2: ConvBnRelu,
    attention: Option<NodeAttention>,
}

/// Classic UNet decoder: learned x2 upsampling, concatenation with the
/// same-scale encoder level, and two 3x3 conv blocks per node.
#[derive(Clone, Debug)]
pub struct SingleScaleDecoder {
    aspp: Option<Aspp>,
    nodes: Vec<SingleScaleNode>,
    widths: [usize; 4],
}

impl SingleScaleDecoder {
    /// `widths[i - 1]` is the output width of node `i`.
    pub fn new(init: &mut Init, plan: &DecoderPlan, widths: [usize; 4]) -> Result<Self> {
        let enc = plan.encoder_channels;
        let aspp = match &plan.bottleneck {
            Some(a) => Some(Aspp::new(&mut init.sub("aspp"), enc[4], &a.rates, a.out_channels)?),
            None => None,
        };
        let mut nodes = Vec::with_capacity(4);
        for i in 1..=4 {
            let w = widths[i - 1];
            let below = if i == 4 { plan.bottleneck_channels() } else { widths[i] };
            let mut node = init.sub(format!("node{i}"));
            let up = ConvTranspose2::new(&mut node.sub("up"), below, w);
            let conv1 = ConvBnRelu::new(&mut node.sub("conv1"), w + enc[i - 1], w, 3, false);
            let conv2 = ConvBnRelu::new(&mut node.sub("conv2"), w, w, 3, false);
            let attention = NodeAttention::build(&mut node, plan.node_attention, w);
            nodes.push(SingleScaleNode {
                up,
                conv1,
                conv2,
                attention,
            });
        }
        Ok(Self { aspp, nodes, widths })
    }

    pub fn out_channels(&self) -> usize {
        self.widths[0]
    }

    pub fn attention_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.attention.is_some()).count()
    }

    pub fn has_aspp(&self) -> bool {
        self.aspp.is_some()
    }

    pub fn target_layer(&self) -> String {
        self.nodes[0].conv2.conv.name().to_string()
    }

    pub fn forward(&self, g: &mut Graph, feats: [Var; 5]) -> Result<Var> {
        let mut y = match &self.aspp {
            Some(a) => a.forward(g, feats[4])?,
            None => feats[4],
        };
        for i in (1..=4).rev() {
            let node = &self.nodes[i - 1];
            let up = node.up.forward(g, y)?;
            let cat = g.concat(&[up, feats[i - 1]])?;
            y = node.conv1.forward(g, cat)?;
            y = node.conv2.forward(g, y)?;
            if let Some(att) = &node.attention {
                y = att.forward(g, y)?;
            }
        }
        Ok(y)
    }
}

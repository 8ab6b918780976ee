//! Squeeze-and-excitation, CBAM, and ASPP blocks, and their placement in a
//! decoder: SE/CBAM refine every decoder node output, ASPP replaces the
//! identity on the deepest encoder level.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Graph, Var};
use crate::nn::{Conv2d, ConvBnRelu};
use crate::params::Init;

/// A dilated branch is rejected when its rate exceeds this multiple of the
/// larger feature-map side.
pub const MAX_RATE_RATIO: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    #[default]
    None,
    Se,
    Cbam,
    Aspp,
    CbamAspp,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 5] = [Self::None, Self::Se, Self::Cbam, Self::Aspp, Self::CbamAspp];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Se => "se",
            Self::Cbam => "cbam",
            Self::Aspp => "aspp",
            Self::CbamAspp => "cbam_aspp",
        }
    }

    pub fn uses_aspp(self) -> bool {
        matches!(self, Self::Aspp | Self::CbamAspp)
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '+'], "_");
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == key)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attention variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    pub reduction: usize,
    pub spatial_kernel: usize,
    pub aspp_rates: Vec<usize>,
    pub aspp_out_channels: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            variant: AttentionVariant::None,
            reduction: 16,
            spatial_kernel: 7,
            aspp_rates: vec![1, 6, 12, 18],
            aspp_out_channels: 256,
        }
    }
}

impl AttentionConfig {
    pub fn with_variant(variant: AttentionVariant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 {
            return Err(Error::InvalidArgument("attention reduction must be positive".into()));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "spatial kernel must be odd, got {}",
                self.spatial_kernel
            )));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return Err(Error::InvalidArgument("ASPP rates must be a nonempty list of positive integers".into()));
        }
        if self.aspp_out_channels == 0 {
            return Err(Error::InvalidArgument("ASPP output channels must be positive".into()));
        }
        Ok(())
    }
}

/// Hidden width of a reduction MLP; the reduction is clamped to the channel count.
pub fn reduced_channels(channels: usize, reduction: usize) -> usize {
    (channels / reduction.clamp(1, channels.max(1))).max(1)
}

/// Two 1x1 convolutions with a ReLU between them, applied to pooled `B x C x 1 x 1` features.
#[derive(Clone, Debug)]
struct Mlp {
    fc1: Conv2d,
    fc2: Conv2d,
}

impl Mlp {
    fn new(init: &mut Init, channels: usize, reduction: usize) -> Self {
        let hidden = reduced_channels(channels, reduction);
        Self {
            fc1: Conv2d::new(&mut init.sub("fc1"), channels, hidden, 1, ConvGeom::SAME_1X1, true),
            fc2: Conv2d::new(&mut init.sub("fc2"), hidden, channels, 1, ConvGeom::SAME_1X1, true),
        }
    }

    fn forward(&self, g: &mut Graph, pooled: Var) -> Result<Var> {
        let h = self.fc1.forward(g, pooled)?;
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}

/// `y = x * sigmoid(MLP(GAP(x)))`.
#[derive(Clone, Debug)]
pub struct Se {
    mlp: Mlp,
}

impl Se {
    pub fn new(init: &mut Init, channels: usize, reduction: usize) -> Self {
        Self {
            mlp: Mlp::new(init, channels, reduction),
        }
    }

    /// Channel gate `B x C x 1 x 1`.
    pub fn gate(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        let z = self.mlp.forward(g, pooled)?;
        Ok(g.sigmoid(z))
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = self.gate(g, x)?;
        g.mul_broadcast(x, s)
    }
}

/// CBAM channel branch: `sigmoid(MLP(avg(x)) + MLP(max(x)))` with a shared MLP.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    mlp: Mlp,
}

impl ChannelAttention {
    pub fn new(init: &mut Init, channels: usize, reduction: usize) -> Self {
        Self {
            mlp: Mlp::new(init, channels, reduction),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let avg = g.global_avg_pool(x)?;
        let max = g.global_max_pool(x)?;
        let a = self.mlp.forward(g, avg)?;
        let m = self.mlp.forward(g, max)?;
        let z = g.add(a, m)?;
        Ok(g.sigmoid(z))
    }
}

/// CBAM spatial branch: `sigmoid(conv_k([mean_c(x); max_c(x)]))`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(init: &mut Init, kernel: usize) -> Self {
        Self {
            conv: Conv2d::same(&mut init.sub("conv"), 2, 1, kernel, false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mean = g.channel_mean(x)?;
        let max = g.channel_max(x)?;
        let both = g.concat(&[mean, max])?;
        let z = self.conv.forward(g, both)?;
        Ok(g.sigmoid(z))
    }
}

/// Channel refinement followed by spatial refinement.
#[derive(Clone, Debug)]
pub struct Cbam {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl Cbam {
    pub fn new(init: &mut Init, channels: usize, reduction: usize, kernel: usize) -> Self {
        Self {
            channel: ChannelAttention::new(&mut init.sub("channel"), channels, reduction),
            spatial: SpatialAttention::new(&mut init.sub("spatial"), kernel),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let cw = self.channel.forward(g, x)?;
        let y = g.mul_broadcast(x, cw)?;
        let sw = self.spatial.forward(g, y)?;
        g.mul_broadcast(y, sw)
    }
}

/// Atrous spatial pyramid pooling: a 1x1 branch for rate 1, a dilated 3x3
/// branch per larger rate, and an image-pooling branch, fused by 1x1 conv.
#[derive(Clone, Debug)]
pub struct Aspp {
    rates: Vec<usize>,
    branches: Vec<ConvBnRelu>,
    pool: Conv2d,
    fuse: ConvBnRelu,
}

impl Aspp {
    pub fn new(init: &mut Init, in_channels: usize, rates: &[usize], out_channels: usize) -> Result<Self> {
        if rates.is_empty() || rates.contains(&0) {
            return Err(Error::InvalidArgument("ASPP rates must be positive".into()));
        }
        let mut branches = Vec::with_capacity(rates.len());
        for (i, &r) in rates.iter().enumerate() {
            let mut sub = init.sub(format!("branch{i}"));
            let b = if r == 1 {
                ConvBnRelu::with_geom(&mut sub, in_channels, out_channels, 1, ConvGeom::SAME_1X1, false)
            } else {
                ConvBnRelu::with_geom(&mut sub, in_channels, out_channels, 3, ConvGeom::same(3, r), false)
            };
            branches.push(b);
        }
        let pool = Conv2d::new(&mut init.sub("pool"), in_channels, out_channels, 1, ConvGeom::SAME_1X1, true);
        let fuse = ConvBnRelu::with_geom(
            &mut init.sub("fuse"),
            out_channels * (rates.len() + 1),
            out_channels,
            1,
            ConvGeom::SAME_1X1,
            false,
        );
        Ok(Self {
            rates: rates.to_vec(),
            branches,
            pool,
            fuse,
        })
    }

    /// Number of parallel branches including image pooling.
    pub fn branch_count(&self) -> usize {
        self.branches.len() + 1
    }

    /// Per-branch outputs before fusion, pooling branch last.
    pub fn branch_outputs(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let (_, _, h, w) = g.value(x).dims4()?;
        if let Some(&rate) = self.rates.iter().find(|&&r| r > MAX_RATE_RATIO * h.max(w)) {
            return Err(Error::AsppRate {
                rate,
                height: h,
                width: w,
            });
        }
        let mut outs = Vec::with_capacity(self.branch_count());
        for b in &self.branches {
            outs.push(b.forward(g, x)?);
        }
        let pooled = g.global_avg_pool(x)?;
        let p = self.pool.forward(g, pooled)?;
        let p = g.relu(p);
        outs.push(g.resize(p, h, w)?);
        Ok(outs)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let outs = self.branch_outputs(g, x)?;
        let cat = g.concat(&outs)?;
        self.fuse.forward(g, cat)
    }
}

/// Refinement applied to each decoder node output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeAttentionKind {
    None,
    Se { reduction: usize },
    Cbam { reduction: usize, kernel: usize },
}

#[derive(Clone, Debug)]
pub enum NodeAttention {
    Se(Se),
    Cbam(Cbam),
}

impl NodeAttention {
    /// Registers parameters under `se.*` or `cbam.*` within `init`'s scope.
    pub fn build(init: &mut Init, kind: NodeAttentionKind, channels: usize) -> Option<Self> {
        match kind {
            NodeAttentionKind::None => None,
            NodeAttentionKind::Se { reduction } => Some(Self::Se(Se::new(&mut init.sub("se"), channels, reduction))),
            NodeAttentionKind::Cbam { reduction, kernel } => {
                Some(Self::Cbam(Cbam::new(&mut init.sub("cbam"), channels, reduction, kernel)))
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Self::Se(m) => m.forward(g, x),
            Self::Cbam(m) => m.forward(g, x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AsppPlan {
    pub rates: Vec<usize>,
    pub out_channels: usize,
}

/// Unbuilt decoder description: encoder widths, fusion width, and the
/// attention slots a builder must fill.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderPlan {
    pub encoder_channels: [usize; 5],
    pub decoder_channels: usize,
    pub bottleneck: Option<AsppPlan>,
    pub node_attention: NodeAttentionKind,
}

impl DecoderPlan {
    pub fn new(encoder_channels: [usize; 5], decoder_channels: usize) -> Self {
        Self {
            encoder_channels,
            decoder_channels,
            bottleneck: None,
            node_attention: NodeAttentionKind::None,
        }
    }

    /// Channel count of the deepest level as seen by the decoder.
    pub fn bottleneck_channels(&self) -> usize {
        self.bottleneck
            .as_ref()
            .map_or(self.encoder_channels[4], |a| a.out_channels)
    }
}

/// Fills the attention slots of `plan` according to `config`.
pub fn attach_attention(mut plan: DecoderPlan, config: &AttentionConfig) -> Result<DecoderPlan> {
    config.validate()?;
    let v = config.variant;
    plan.node_attention = match v {
        AttentionVariant::Se => NodeAttentionKind::Se {
            reduction: config.reduction,
        },
        AttentionVariant::Cbam | AttentionVariant::CbamAspp => NodeAttentionKind::Cbam {
            reduction: config.reduction,
            kernel: config.spatial_kernel,
        },
        AttentionVariant::None | AttentionVariant::Aspp => NodeAttentionKind::None,
    };
    plan.bottleneck = v.uses_aspp().then(|| AsppPlan {
        rates: config.aspp_rates.clone(),
        out_channels: config.aspp_out_channels,
    });
    Ok(plan)
}

//! Parameterized layers built on [`Graph`] ops.

use crate::error::Result;
use crate::graph::{ConvGeom, Graph, Var};
use crate::params::{Init, ParamId, ParamKind};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// 2D convolution. Its output is recorded as a tap under the layer name.
#[derive(Clone, Debug)]
pub struct Conv2d {
    name: String,
    weight: ParamId,
    bias: Option<ParamId>,
    geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut Init,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        let weight = init.he_normal(
            "weight",
            &[out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
        );
        let bias = bias.then(|| init.constant("bias", &[out_channels], 0.0, ParamKind::Trainable));
        Self {
            name: init.prefix().to_string(),
            weight,
            bias,
            geom,
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// `kernel x kernel` convolution with stride 1 and same padding.
    pub fn same(init: &mut Init, in_channels: usize, out_channels: usize, kernel: usize, bias: bool) -> Self {
        Self::new(init, in_channels, out_channels, kernel, ConvGeom::same(kernel, 1), bias)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn geom(&self) -> ConvGeom {
        self.geom
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        let y = g.conv2d(x, w, b, self.geom)?;
        g.tap(&self.name, y);
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(init: &mut Init, channels: usize) -> Self {
        Self {
            gamma: init.constant("weight", &[channels], 1.0, ParamKind::Trainable),
            beta: init.constant("bias", &[channels], 0.0, ParamKind::Trainable),
            running_mean: init.constant("running_mean", &[channels], 0.0, ParamKind::Buffer),
            running_var: init.constant("running_var", &[channels], 1.0, ParamKind::Buffer),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batch_norm(
            x,
            gamma,
            beta,
            self.running_mean,
            self.running_var,
            BN_EPS,
            BN_MOMENTUM,
        )
    }
}

/// Convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    /// Same-padded `kernel x kernel` block; `init` is scoped to the block.
    pub fn new(init: &mut Init, in_channels: usize, out_channels: usize, kernel: usize, conv_bias: bool) -> Self {
        Self::with_geom(init, in_channels, out_channels, kernel, ConvGeom::same(kernel, 1), conv_bias)
    }

    pub fn with_geom(
        init: &mut Init,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeom,
        conv_bias: bool,
    ) -> Self {
        let conv = Conv2d::new(&mut init.sub("conv"), in_channels, out_channels, kernel, geom, conv_bias);
        let bn = BatchNorm2d::new(&mut init.sub("bn"), out_channels);
        Self { conv, bn }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.relu(y))
    }
}

/// 2x2 stride-2 transposed convolution (learned upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose2 {
    weight: ParamId,
    bias: ParamId,
}

impl ConvTranspose2 {
    pub fn new(init: &mut Init, in_channels: usize, out_channels: usize) -> Self {
        Self {
            weight: init.he_normal("weight", &[in_channels, out_channels, 2, 2], in_channels * 4),
            bias: init.constant("bias", &[out_channels], 0.0, ParamKind::Trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv_transpose2(x, w, Some(b))
    }
}

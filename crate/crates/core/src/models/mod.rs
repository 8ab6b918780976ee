//! Segmentation networks: encoder, decoder, and a 1x1 classification head
//! producing per-pixel class logits at input resolution.

mod checkpoint;
mod decoder;
mod encoder;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, load_pretrained, load_weights, save_checkpoint, LoadReport, CONFIG_KEY};
pub use decoder::{FullScaleDecoder, SingleScaleDecoder};
pub use encoder::{first_level_stride, pyramid_channels, Encoder, PLAIN_WIDTHS};

use crate::attention::{attach_attention, AttentionConfig, DecoderPlan};
use crate::error::{shape_err, Error, Result};
use crate::graph::{ConvGeom, Graph, Mode, Var};
use crate::nn::Conv2d;
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Unet,
    #[default]
    Unet3p,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    PlainCnn,
    Resnet18,
    Resnet34,
    #[default]
    Resnet50,
    ResnetTiny,
}

macro_rules! str_enum {
    ($ty:ty, $what:literal, $($variant:ident => $name:literal),+ $(,)?) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let key = s.trim().to_ascii_lowercase().replace(['-', '+'], "_");
                match key.as_str() {
                    $($name => Ok(Self::$variant),)+
                    _ => Err(Error::InvalidArgument(format!(concat!("unknown ", $what, " `{}`"), s))),
                }
            }
        }
    };
}

str_enum!(Architecture, "architecture", Unet => "unet", Unet3p => "unet3p");
str_enum!(Backbone, "backbone",
    PlainCnn => "plain_cnn",
    Resnet18 => "resnet18",
    Resnet34 => "resnet34",
    Resnet50 => "resnet50",
    ResnetTiny => "resnet_tiny",
);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub backbone: Backbone,
    /// Per-source width `C` of the full-scale decoder; base width of
    /// single-scale decoders on ResNet encoders.
    pub decoder_channels: usize,
    pub attention: AttentionConfig,
    pub num_classes: usize,
    pub input_size: usize,
    pub pretrained: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Unet3p,
            backbone: Backbone::Resnet50,
            decoder_channels: 64,
            attention: AttentionConfig::default(),
            num_classes: 2,
            input_size: 256,
            pretrained: false,
        }
    }
}

impl ModelConfig {
    /// The classic four-down/four-up UNet on the plain encoder.
    pub fn unet_baseline() -> Self {
        Self {
            architecture: Architecture::Unet,
            backbone: Backbone::PlainCnn,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::InvalidArgument(format!(
                "input size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be at least 2".into()));
        }
        if self.decoder_channels == 0 {
            return Err(Error::InvalidArgument("decoder_channels must be positive".into()));
        }
        if self.pretrained && matches!(self.backbone, Backbone::PlainCnn | Backbone::ResnetTiny) {
            return Err(Error::UnsupportedConfig(format!(
                "no pretrained weights exist for the {} backbone",
                self.backbone
            )));
        }
        self.attention.validate()
    }

    /// Grayscale replicated to three channels for pretrained stems.
    pub fn in_channels(&self) -> usize {
        if self.pretrained {
            3
        } else {
            1
        }
    }

    /// Display name in the style of result tables, e.g. `ResNetUNet3+ with CBAM`.
    pub fn display_name(&self) -> String {
        use crate::attention::AttentionVariant as A;
        let arch = match self.architecture {
            Architecture::Unet => "UNet",
            Architecture::Unet3p => "UNet3+",
        };
        let backbone = match self.backbone {
            Backbone::PlainCnn => "",
            Backbone::Resnet18 => "ResNet18",
            Backbone::Resnet34 => "ResNet34",
            Backbone::Resnet50 => "ResNet",
            Backbone::ResnetTiny => "ResNetTiny",
        };
        let suffix = match self.attention.variant {
            A::None => "",
            A::Se => " with SE",
            A::Cbam => " with CBAM",
            A::Aspp => " with ASPP",
            A::CbamAspp => " with CBAM and ASPP",
        };
        format!("{backbone}{arch}{suffix}")
    }
}

/// Encoder outputs F1..F5.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(|t| t.shape()[1]).collect()
    }

    /// Spatial `(H, W)` of each level.
    pub fn sizes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|t| (t.shape()[2], t.shape()[3])).collect()
    }
}

#[derive(Clone, Debug)]
enum Decoder {
    FullScale(FullScaleDecoder),
    SingleScale(SingleScaleDecoder),
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    head: Conv2d,
}

/// Builds a model with He-normal initialization drawn from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut root = Init::new(&mut store, &mut rng, "");
    let encoder = Encoder::new(&mut root.sub("encoder"), config.backbone, config.in_channels());
    let plan = attach_attention(
        DecoderPlan::new(encoder.channels(), config.decoder_channels),
        &config.attention,
    )?;
    let mut dec_init = root.sub("decoder");
    let decoder = match config.architecture {
        Architecture::Unet3p => Decoder::FullScale(FullScaleDecoder::new(&mut dec_init, &plan)?),
        Architecture::Unet => {
            let widths = match config.backbone {
                Backbone::PlainCnn => [PLAIN_WIDTHS[0], PLAIN_WIDTHS[1], PLAIN_WIDTHS[2], PLAIN_WIDTHS[3]],
                _ => {
                    let c = config.decoder_channels;
                    [c, 2 * c, 4 * c, 8 * c]
                }
            };
            Decoder::SingleScale(SingleScaleDecoder::new(&mut dec_init, &plan, widths)?)
        }
    };
    let head_in = match &decoder {
        Decoder::FullScale(d) => d.out_channels(),
        Decoder::SingleScale(d) => d.out_channels(),
    };
    let head = Conv2d::new(&mut root.sub("head"), head_in, config.num_classes, 1, ConvGeom::SAME_1X1, true);
    Ok(Model {
        config: config.clone(),
        store,
        encoder,
        decoder,
        head,
    })
}

/// [`build_model`] on [`ModelConfig::unet_baseline`] with the given input size and class count.
pub fn build_unet_baseline(config: &ModelConfig, seed: u64) -> Result<Model> {
    let cfg = ModelConfig {
        architecture: Architecture::Unet,
        backbone: Backbone::PlainCnn,
        ..config.clone()
    };
    build_model(&cfg, seed)
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Trainable parameter count (normalization statistics excluded).
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// The final convolution before the classification head.
    pub fn default_target_layer(&self) -> String {
        match &self.decoder {
            Decoder::FullScale(d) => d.target_layer(),
            Decoder::SingleScale(d) => d.target_layer(),
        }
    }

    /// Width of the concatenation entering each full-scale fusion, node 1 first.
    pub fn fusion_in_channels(&self) -> Option<Vec<usize>> {
        match &self.decoder {
            Decoder::FullScale(d) => Some(d.fusion_in_channels()),
            Decoder::SingleScale(_) => None,
        }
    }

    /// Number of decoder nodes carrying an SE or CBAM block.
    pub fn node_attention_count(&self) -> usize {
        match &self.decoder {
            Decoder::FullScale(d) => d.attention_count(),
            Decoder::SingleScale(d) => d.attention_count(),
        }
    }

    pub fn has_aspp(&self) -> bool {
        match &self.decoder {
            Decoder::FullScale(d) => d.has_aspp(),
            Decoder::SingleScale(d) => d.has_aspp(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        match shape {
            [n, 1, h, w] if *n > 0 && *h == s && *w == s => Ok(()),
            _ => Err(shape_err(("N", 1, s, s), shape)),
        }
    }

    /// F1..F5 on the tape.
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<[Var; 5]> {
        self.check_input(g.value(x).shape())?;
        self.encoder.forward(g, x)
    }

    /// Class logits `B x K x S x S` on the tape.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let feats = self.features(g, x)?;
        let d1 = match &self.decoder {
            Decoder::FullScale(d) => d.forward(g, feats)?,
            Decoder::SingleScale(d) => d.forward(g, feats)?,
        };
        let logits = self.head.forward(g, d1)?;
        let s = self.config.input_size;
        let (_, _, h, w) = g.value(logits).dims4()?;
        if (h, w) == (s, s) {
            Ok(logits)
        } else {
            g.resize(logits, s, s)
        }
    }

    /// Evaluation-mode encoder pass.
    pub fn encode(&self, batch: &Tensor) -> Result<FeaturePyramid> {
        let mut g = Graph::new(&self.store, Mode::Eval);
        let x = g.input(batch.clone());
        let feats = self.features(&mut g, x)?;
        Ok(FeaturePyramid {
            levels: feats.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store, Mode::Eval);
        let x = g.input(batch.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Evaluation-mode foreground masks (argmax over classes is nonzero).
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<Array2<u8>>> {
        argmax_masks(&self.logits(batch)?)
    }
}

/// Per-sample binary masks: 1 where the argmax class is not background.
/// Ties resolve to the lower class index.
pub fn argmax_masks(logits: &Tensor) -> Result<Vec<Array2<u8>>> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    Ok((0..n)
        .map(|b| {
            let item = logits.item(b);
            let mut mask = Array2::zeros((h, w));
            for (p, m) in mask.iter_mut().enumerate() {
                let mut best = 0;
                for c in 1..k {
                    if item[c * hw + p] > item[best * hw + p] {
                        best = c;
                    }
                }
                *m = (best != 0) as u8;
            }
            mask
        })
        .collect())
}

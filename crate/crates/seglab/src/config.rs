//! Declarative experiment configuration (TOML).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use seglab_core::attention::AttentionVariant;
use seglab_core::data::{PhantomSpec, PrepareConfig, SlicePolicy, SplitLevel};
use seglab_core::metrics::{Spacing, UNIT_SPACING};
use seglab_core::models::{Backbone, ModelConfig};
use seglab_core::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of `<case>_ct.*` / `<case>_mask.*` volumes.
    pub input: PathBuf,
    /// Where prepared slices and the split manifest are written.
    pub prepared: PathBuf,
    /// When set, synthetic volumes are generated into `input` first.
    pub phantom: Option<PhantomSpec>,
    pub size: usize,
    pub split: [f64; 3],
    pub level: SplitLevel,
    pub policy: SlicePolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = PrepareConfig::default();
        Self {
            input: p.input,
            prepared: p.output,
            phantom: None,
            size: p.size,
            split: p.split,
            level: p.level,
            policy: p.policy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Pixel spacing `(sx, sy)` in mm used for HD95.
    pub spacing: Spacing,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { spacing: UNIT_SPACING }
    }
}

/// One variant of an ablation grid; unset fields keep the base model's value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridVariant {
    pub attention: AttentionVariant,
    #[serde(default)]
    pub backbone: Option<Backbone>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<GridVariant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Converted ImageNet weights, required when `model.pretrained` is set.
    pub pretrained_weights: Option<PathBuf>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            output_dir: PathBuf::from("runs/experiment"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrained_weights: None,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads a config file; relative data and output paths resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(base) = path.parent() {
            let weights = cfg.pretrained_weights.iter_mut();
            for p in [&mut cfg.output_dir, &mut cfg.data.input, &mut cfg.data.prepared].into_iter().chain(weights) {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Copies the top-level seed into every stochastic component.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.train.seed = self.seed;
        if let Some(p) = c.data.phantom.as_mut() {
            p.seed = self.seed;
        }
        c.model.input_size = self.data.size;
        c
    }

    pub fn prepare_config(&self) -> PrepareConfig {
        PrepareConfig {
            input: self.data.input.clone(),
            output: self.data.prepared.clone(),
            size: self.data.size,
            split: self.data.split,
            seed: self.seed,
            level: self.data.level,
            policy: self.data.policy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(p) = &self.data.phantom {
            p.validate()?;
        } else if !self.data.input.is_dir() {
            bail!("data directory {} does not exist", self.data.input.display());
        }
        if self.model.pretrained {
            match &self.pretrained_weights {
                Some(p) if p.is_file() => {}
                Some(p) => bail!("pretrained weights {} do not exist", p.display()),
                None => bail!("model.pretrained is set but pretrained_weights is missing"),
            }
        }
        Ok(())
    }
}

/// A desk-scale configuration on synthetic phantoms.
pub fn phantom_preset(output_dir: &Path) -> ExperimentConfig {
    let size = 64;
    ExperimentConfig {
        name: "phantom".into(),
        output_dir: output_dir.join("run"),
        data: DataConfig {
            input: output_dir.join("phantom_raw"),
            prepared: output_dir.join("phantom_prepared"),
            phantom: Some(PhantomSpec {
                n_cases: 10,
                slices_per_case: 4,
                image_size: size,
                ..Default::default()
            }),
            size,
            ..Default::default()
        },
        model: ModelConfig {
            backbone: Backbone::ResnetTiny,
            decoder_channels: 16,
            input_size: size,
            ..Default::default()
        },
        train: TrainConfig {
            lr0: 0.1,
            batch_size: 4,
            max_iterations: 40,
            validate_every: 20,
            ..Default::default()
        },
        ..Default::default()
    }
}

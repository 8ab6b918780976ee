use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, SliceSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::metrics;
use crate::models::Model;
use crate::tensor::Tensor;

use super::loss::{Labels, LossParts, DICE_EPS};
use super::{lr_at, LrSchedule, Sgd};

/// Slices per forward pass during validation.
const VAL_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_iterations: usize,
    /// `(w_ce, w_dice)`.
    pub loss_weights: (f64, f64),
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub validate_every: usize,
    /// Random flips and quarter turns on every training slice.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
            epochs: 100,
            max_iterations: 6000,
            loss_weights: (0.5, 0.5),
            seed: 0,
            lr_schedule: LrSchedule::Poly,
            validate_every: 250,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("lr0", self.lr0),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("w_ce", self.loss_weights.0),
            ("w_dice", self.loss_weights.1),
        ];
        for (name, v) in reals {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("max_iterations", self.max_iterations),
            ("validate_every", self.validate_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.loss_weights.0 + self.loss_weights.1 <= 0.0 {
            return Err(Error::InvalidArgument("loss weights must not both be zero".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    /// The earlier of the epoch bound and the iteration bound.
    pub fn total_steps(&self, n_train: usize) -> usize {
        (self.epochs * self.steps_per_epoch(n_train)).min(self.max_iterations)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub total_loss: f64,
    pub loss_ce: f64,
    pub loss_dice: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub iteration: usize,
    pub val_dice: f64,
    pub val_iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValRecord>,
}

#[derive(Serialize, Deserialize)]
struct LogRow {
    iteration: usize,
    total_loss: Option<f64>,
    loss_ce: Option<f64>,
    loss_dice: Option<f64>,
    lr: Option<f64>,
    val_dice: Option<f64>,
    val_iou: Option<f64>,
}

impl TrainingLog {
    /// Iterations strictly increasing and every loss finite.
    pub fn check(&self) -> Result<()> {
        for w in self.steps.windows(2) {
            if w[1].iteration <= w[0].iteration {
                return Err(Error::Precondition(format!(
                    "log iterations not increasing at {}",
                    w[1].iteration
                )));
            }
        }
        for s in &self.steps {
            if ![s.total_loss, s.loss_ce, s.loss_dice].iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("logged loss at iteration {}", s.iteration)));
            }
        }
        Ok(())
    }

    /// One row per iteration; validation columns are empty where no
    /// validation ran.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut iters: Vec<usize> = self
            .steps
            .iter()
            .map(|s| s.iteration)
            .chain(self.validations.iter().map(|v| v.iteration))
            .collect();
        iters.sort_unstable();
        iters.dedup();
        for it in iters {
            let s = self.steps.iter().find(|s| s.iteration == it);
            let v = self.validations.iter().find(|v| v.iteration == it);
            w.serialize(LogRow {
                iteration: it,
                total_loss: s.map(|s| s.total_loss),
                loss_ce: s.map(|s| s.loss_ce),
                loss_dice: s.map(|s| s.loss_dice),
                lr: s.map(|s| s.lr),
                val_dice: v.map(|v| v.val_dice),
                val_iou: v.map(|v| v.val_iou),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut log = Self::default();
        for row in r.deserialize() {
            let row: LogRow = row?;
            if let (Some(total_loss), Some(loss_ce), Some(loss_dice), Some(lr)) =
                (row.total_loss, row.loss_ce, row.loss_dice, row.lr)
            {
                log.steps.push(StepRecord {
                    iteration: row.iteration,
                    total_loss,
                    loss_ce,
                    loss_dice,
                    lr,
                });
            }
            if let (Some(val_dice), Some(val_iou)) = (row.val_dice, row.val_iou) {
                log.validations.push(ValRecord {
                    iteration: row.iteration,
                    val_dice,
                    val_iou,
                });
            }
        }
        Ok(log)
    }
}

/// Weights at the best validation Dice seen so far.
#[derive(Clone, Debug)]
pub struct BestState {
    pub iteration: usize,
    pub val_dice: f64,
    pub val_iou: f64,
    pub params: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainingLog,
    pub best: Option<BestState>,
}

/// Anything that maps slices to binary foreground masks.
pub trait Segmenter {
    fn segment(&self, images: &[&Array2<f64>]) -> Result<Vec<Array2<u8>>>;
}

impl Segmenter for Model {
    fn segment(&self, images: &[&Array2<f64>]) -> Result<Vec<Array2<u8>>> {
        self.predict(&Tensor::from_images(images)?)
    }
}

/// Mean Dice and IoU of argmax predictions over `val`.
pub fn validate(model: &dyn Segmenter, val: &[SliceSample]) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    let mut dice = 0.0;
    let mut iou = 0.0;
    for chunk in val.chunks(VAL_BATCH) {
        let images: Vec<&Array2<f64>> = chunk.iter().map(|s| &s.image).collect();
        let preds = model.segment(&images)?;
        for (p, s) in preds.iter().zip(chunk) {
            let c = metrics::confusion(p.view(), s.mask.view())?;
            dice += metrics::dice(&c);
            iou += metrics::iou(&c);
        }
    }
    let n = val.len() as f64;
    Ok((dice / n, iou / n))
}

/// One optimizer step on `batch`. The update is skipped when the loss is not
/// finite.
pub fn train_step(
    model: &mut Model,
    sgd: &mut Sgd,
    batch: &[&SliceSample],
    lr: f64,
    weights: (f64, f64),
) -> Result<LossParts> {
    let images: Vec<&Array2<f64>> = batch.iter().map(|s| &s.image).collect();
    let masks: Vec<&Array2<u8>> = batch.iter().map(|s| &s.mask).collect();
    let x = Tensor::from_images(&images)?;
    let labels = Labels::from_masks(&masks)?;
    let (parts, grads, stats) = {
        let mut g = Graph::new(model.store(), Mode::Train);
        let xv = g.input(x);
        let logits = model.forward(&mut g, xv)?;
        let ce = g.cross_entropy(logits, &labels)?;
        let probs = g.softmax(logits)?;
        let dice = g.soft_dice(probs, &labels, DICE_EPS)?;
        let total = g.weighted_sum(&[(ce, weights.0), (dice, weights.1)])?;
        let parts = LossParts {
            total: g.value(total).data()[0],
            ce: g.value(ce).data()[0],
            dice: g.value(dice).data()[0],
        };
        if !(parts.total.is_finite() && parts.ce.is_finite() && parts.dice.is_finite()) {
            return Ok(parts);
        }
        let grads = g.backward(total, &[])?;
        (parts, grads, g.take_stat_updates())
    };
    let store = model.store_mut();
    for (id, value) in stats {
        *store.get_mut(id) = value;
    }
    sgd.step(store, &grads, lr);
    Ok(parts)
}

/// SGD on `train` until the stop rule, validating on `val` every
/// `cfg.validate_every` iterations and after the last one.
pub fn train(model: &mut Model, train: &[SliceSample], val: &[SliceSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation splits must be nonempty".into()));
    }
    let total = cfg.total_steps(train.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = TrainingLog::default();
    let mut best: Option<BestState> = None;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for iteration in 1..=total {
        if cursor >= order.len() {
            order = (0..train.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let picked = &order[cursor..end];
        cursor = end;
        let owned: Vec<SliceSample> = if cfg.augment {
            picked.iter().map(|&i| augment(&train[i], &mut rng).0).collect()
        } else {
            picked.iter().map(|&i| train[i].clone()).collect()
        };
        let batch: Vec<&SliceSample> = owned.iter().collect();
        let lr = lr_at(iteration - 1, cfg);
        let parts = train_step(model, &mut sgd, &batch, lr, cfg.loss_weights)?;
        if !(parts.total.is_finite() && parts.ce.is_finite() && parts.dice.is_finite()) {
            let ids: Vec<String> = batch
                .iter()
                .map(|s| format!("{}#{}", s.case_id, s.slice_index))
                .collect();
            return Err(Error::NonFinite(format!(
                "loss at iteration {iteration} (total {}, ce {}, dice {}, lr {lr}); batch [{}]; \
                 parameters left at their iteration {} values",
                parts.total,
                parts.ce,
                parts.dice,
                ids.join(", "),
                iteration - 1
            )));
        }
        log.steps.push(StepRecord {
            iteration,
            total_loss: parts.total,
            loss_ce: parts.ce,
            loss_dice: parts.dice,
            lr,
        });
        if iteration % cfg.validate_every == 0 || iteration == total {
            let (val_dice, val_iou) = validate(&*model, val)?;
            log.validations.push(ValRecord {
                iteration,
                val_dice,
                val_iou,
            });
            if best.as_ref().is_none_or(|b| val_dice > b.val_dice) {
                best = Some(BestState {
                    iteration,
                    val_dice,
                    val_iou,
                    params: model.store().snapshot(),
                });
            }
        }
    }
    Ok(TrainOutcome { log, best })
}

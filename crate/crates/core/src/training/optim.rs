use serde::{Deserialize, Serialize};

use crate::graph::Gradients;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

use super::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LrSchedule {
    #[default]
    Poly,
    Constant,
}

const POLY_POWER: f64 = 0.9;

/// Learning rate before the optimizer step numbered `iteration` (0-based).
/// Iterations past `max_iterations` clamp to the final value.
pub fn lr_at(iteration: usize, cfg: &TrainConfig) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr0,
        LrSchedule::Poly => {
            let max = cfg.max_iterations.max(1);
            let t = iteration.min(max) as f64 / max as f64;
            cfg.lr0 * (1.0 - t).powf(POLY_POWER)
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `g = grad + wd * p; buf = mu * buf + g; p -= lr * buf`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    pub fn buffer(&self, index: usize) -> Option<&Tensor> {
        self.buffers.get(index).and_then(Option::as_ref)
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        if self.buffers.len() < store.len() {
            self.buffers.resize(store.len(), None);
        }
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let Some(grad) = grads.param(id) else { continue };
            let p = store.get_mut(id);
            let buf = self.buffers[id.index()].get_or_insert_with(|| Tensor::zeros(p.shape()));
            for ((w, b), &g) in p.data_mut().iter_mut().zip(buf.data_mut()).zip(grad.data()) {
                let d = g + self.weight_decay * *w;
                *b = self.momentum * *b + d;
                *w -= lr * *b;
            }
        }
    }
}

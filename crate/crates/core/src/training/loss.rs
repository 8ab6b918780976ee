//! Cross-entropy and soft Dice losses with closed-form gradients.

use ndarray::Array2;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Dice smoothing term; keeps empty classes at 0/0-free values.
pub const DICE_EPS: f64 = 1e-5;

/// Integer class labels, `batch x height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Labels {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Labels {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != batch * height * width {
            return Err(shape_err(batch * height * width, data.len()));
        }
        Ok(Self {
            batch,
            height,
            width,
            data,
        })
    }

    pub fn from_masks(masks: &[&Array2<u8>]) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty label batch".into()))?;
        let (h, w) = first.dim();
        let mut data = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            if m.dim() != (h, w) {
                return Err(shape_err((h, w), m.dim()));
            }
            data.extend(m.iter().copied());
        }
        Self::new(masks.len(), h, w, data)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    fn check_against(&self, t: &Tensor) -> Result<usize> {
        let (n, c, h, w) = t.dims4()?;
        if (n, h, w) != (self.batch, self.height, self.width) {
            return Err(shape_err(
                (self.batch, "C", self.height, self.width),
                t.shape(),
            ));
        }
        if let Some(&bad) = self.data.iter().find(|&&l| l as usize >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        Ok(c)
    }
}

/// Softmax over the channel axis of an `N x C x H x W` tensor.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = logits.dims4()?;
    let hw = h * w;
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let max = (0..c)
                .map(|k| x[base + k * hw + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = (x[base + k * hw + p] - max).exp();
                out[base + k * hw + p] = e;
                z += e;
            }
            for k in 0..c {
                out[base + k * hw + p] /= z;
            }
        }
    }
    Tensor::new(logits.shape(), out)
}

/// Mean per-pixel cross-entropy of `softmax(logits)`; returns the loss and
/// its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, target: &Labels) -> Result<(f64, Tensor)> {
    let c = target.check_against(logits)?;
    let (n, _, h, w) = logits.dims4()?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let x = logits.data();
    let probs = softmax_channels(logits)?;
    let mut grad = probs.clone().into_data();
    let mut loss = 0.0;
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let t = target.data[b * hw + p] as usize;
            let max = (0..c)
                .map(|k| x[base + k * hw + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..c)
                    .map(|k| (x[base + k * hw + p] - max).exp())
                    .sum::<f64>()
                    .ln();
            loss += lse - x[base + t * hw + p];
            grad[base + t * hw + p] -= 1.0;
        }
    }
    grad.iter_mut().for_each(|g| *g /= m);
    Ok((loss / m, Tensor::new(logits.shape(), grad)?))
}

/// Soft Dice loss `1 - mean_k (2 sum p g + eps) / (sum p + sum g + eps)` with
/// sums taken over the whole batch; returns the loss and d loss / d probs.
pub fn soft_dice(probs: &Tensor, target: &Labels, eps: f64) -> Result<(f64, Tensor)> {
    let c = target.check_against(probs)?;
    let (n, _, h, w) = probs.dims4()?;
    let hw = h * w;
    let p = probs.data();
    let mut inter = vec![0.0; c];
    let mut total = vec![0.0; c];
    for b in 0..n {
        for px in 0..hw {
            let t = target.data[b * hw + px] as usize;
            for k in 0..c {
                let v = p[(b * c + k) * hw + px];
                total[k] += v;
                if k == t {
                    inter[k] += v;
                    total[k] += 1.0;
                }
            }
        }
    }
    let kf = c as f64;
    let score: f64 = (0..c)
        .map(|k| (2.0 * inter[k] + eps) / (total[k] + eps))
        .sum::<f64>()
        / kf;
    let mut grad = vec![0.0; p.len()];
    for b in 0..n {
        for px in 0..hw {
            let t = target.data[b * hw + px] as usize;
            for k in 0..c {
                let g = if k == t { 1.0 } else { 0.0 };
                let s = total[k] + eps;
                grad[(b * c + k) * hw + px] =
                    -(2.0 * g * s - (2.0 * inter[k] + eps)) / (s * s) / kf;
            }
        }
    }
    Ok((1.0 - score, Tensor::new(probs.shape(), grad)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
}

/// `w_ce * ce(logits) + w_dice * dice(softmax(logits))`.
pub fn total_loss(logits: &Tensor, target: &Labels, weights: (f64, f64)) -> Result<LossParts> {
    let (ce, _) = cross_entropy(logits, target)?;
    let probs = softmax_channels(logits)?;
    let (dice, _) = soft_dice(&probs, target, DICE_EPS)?;
    Ok(LossParts {
        total: weights.0 * ce + weights.1 * dice,
        ce,
        dice,
    })
}

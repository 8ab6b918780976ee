//! Grad-CAM heatmaps for segmentation outputs and their overlays on CT slices.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::models::{argmax_masks, Model};
use crate::params::ParamStore;
use crate::tensor::{bilinear_taps, resize_plane, Tensor};

/// Class whose logit defines the Grad-CAM score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TargetClass {
    #[default]
    Foreground,
    Background,
}

impl TargetClass {
    fn index(self) -> usize {
        match self {
            Self::Foreground => 1,
            Self::Background => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `H x W`, in `[0, 1]`.
    pub values: Array2<f64>,
    pub target_layer: String,
    pub target_class: TargetClass,
    /// Set when the predicted mask was empty and the score fell back to the
    /// mean logit over all pixels.
    pub empty_prediction: bool,
}

/// Grad-CAM on `model` for a single slice at `layer` (see [`Model::default_target_layer`]).
pub fn gradcam(model: &Model, image: &Array2<f64>, layer: &str) -> Result<Heatmap> {
    gradcam_with(model.store(), &|g, x| model.forward(g, x), image, layer, TargetClass::Foreground)
}

/// Grad-CAM for any tape-built network. `forward` maps a `1 x 1 x H x W`
/// input to `1 x K x H' x W'` logits and must tap `layer`.
///
/// The score sums the target-class logit over pixels predicted as that class
/// (argmax). An empty prediction falls back to the mean target logit.
pub fn gradcam_with(
    params: &ParamStore,
    forward: &dyn Fn(&mut Graph, Var) -> Result<Var>,
    image: &Array2<f64>,
    layer: &str,
    target: TargetClass,
) -> Result<Heatmap> {
    let (h, w) = image.dim();
    let mut g = Graph::new(params, Mode::Eval);
    let x = g.input(Tensor::from_images(&[image])?);
    let logits = forward(&mut g, x)?;
    let Some(act) = g.find_tap(layer) else {
        let mut names: Vec<&str> = g.taps().iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        return Err(Error::UnknownLayer {
            name: layer.to_string(),
            available: names.join(", "),
        });
    };
    let lt = g.value(logits);
    let (_, k, lh, lw) = lt.dims4()?;
    let cls = target.index();
    if cls >= k {
        return Err(Error::InvalidArgument(format!("target class {cls} out of range for {k} classes")));
    }
    let fg = &argmax_masks(lt)?[0];
    let hit = |m: u8| match target {
        TargetClass::Foreground => m == 1,
        TargetClass::Background => m == 0,
    };
    let selected = fg.iter().filter(|&&m| hit(m)).count();
    let plane = lh * lw;
    let mut weights = vec![0.0; k * plane];
    let empty_prediction = selected == 0;
    for (p, &m) in fg.iter().enumerate() {
        weights[cls * plane + p] = if empty_prediction {
            1.0 / plane as f64
        } else if hit(m) {
            1.0
        } else {
            0.0
        };
    }
    let score = g.dot(logits, weights)?;
    let grads = g.backward(score, &[act])?;
    let a = g.value(act);
    let (_, c, ah, aw) = a.dims4()?;
    let aplane = ah * aw;
    let zero = Tensor::zeros(a.shape());
    let da = grads.var(act).unwrap_or(&zero);
    let mut raw = vec![0.0; aplane];
    for ch in 0..c {
        let gk = &da.data()[ch * aplane..(ch + 1) * aplane];
        let wk = gk.iter().sum::<f64>() / aplane as f64;
        let ak = &a.data()[ch * aplane..(ch + 1) * aplane];
        for (r, &v) in raw.iter_mut().zip(ak) {
            *r += wk * v;
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut up = vec![0.0; h * w];
    resize_plane(&raw, ah, aw, &mut up, &bilinear_taps(ah, h), &bilinear_taps(aw, w));
    let values = Array2::from_shape_vec((h, w), up).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(Heatmap {
        values: min_max_normalize(&values),
        target_layer: layer.to_string(),
        target_class: target,
        empty_prediction,
    })
}

/// Maps to `[0, 1]`. An all-zero map stays all-zero; any other constant map
/// becomes all ones.
pub fn min_max_normalize(a: &Array2<f64>) -> Array2<f64> {
    let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if a.is_empty() || (lo == 0.0 && hi == 0.0) {
        return Array2::zeros(a.dim());
    }
    if hi == lo {
        return Array2::ones(a.dim());
    }
    a.mapv(|v| (v - lo) / (hi - lo))
}

/// Viridis sampled at nine evenly spaced points.
const VIRIDIS: [[u8; 3]; 9] = [
    [0x44, 0x01, 0x54],
    [0x47, 0x2d, 0x7b],
    [0x3b, 0x52, 0x8b],
    [0x2c, 0x72, 0x8e],
    [0x21, 0x91, 0x8c],
    [0x28, 0xae, 0x80],
    [0x5e, 0xc9, 0x62],
    [0xad, 0xdc, 0x30],
    [0xfd, 0xe7, 0x25],
];

/// Colormap lookup for `t` in `[0, 1]` (clamped), RGB in `[0, 1]`.
pub fn viridis(t: f64) -> [f64; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let pos = t * (VIRIDIS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f64;
    std::array::from_fn(|c| {
        let a = VIRIDIS[i][c] as f64 / 255.0;
        let b = VIRIDIS[i + 1][c] as f64 / 255.0;
        a + (b - a) * f
    })
}

/// `H x W x 3` blend `(1 - alpha) * gray(image) + alpha * viridis(heatmap)`,
/// values in `[0, 1]`. The CT slice is min-max scaled to gray first.
pub fn overlay(heatmap: &Array2<f64>, image: &Array2<f64>, alpha: f64) -> Result<Array3<f64>> {
    if heatmap.dim() != image.dim() {
        return Err(shape_err(image.dim(), heatmap.dim()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let gray = min_max_normalize(&image.mapv(|v| v - image.iter().copied().fold(f64::INFINITY, f64::min)));
    let (h, w) = image.dim();
    Ok(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        (1.0 - alpha) * gray[[y, x]] + alpha * viridis(heatmap[[y, x]])[c]
    }))
}

/// 8-bit RGB rendering of [`overlay`].
pub fn overlay_image(heatmap: &Array2<f64>, image: &Array2<f64>, alpha: f64) -> Result<image::RgbImage> {
    let rgb = overlay(heatmap, image, alpha)?;
    let (h, w, _) = rgb.dim();
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| {
            (rgb[[y as usize, x as usize, c]] * 255.0).round() as u8
        }))
    }))
}

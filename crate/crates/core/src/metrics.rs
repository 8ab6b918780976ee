//! Overlap, classification-rate, and boundary metrics on binary masks.
//!
//! Degenerate cases follow one convention throughout: when a ratio's
//! denominator is zero the metric is `1.0` and flagged as undefined. For
//! Dice and IoU this means two empty masks agree perfectly.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::exec;

/// Pixel spacing `(row, col)` in millimetres.
pub type Spacing = (f64, f64);

pub const UNIT_SPACING: Spacing = (1.0, 1.0);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// A rate plus whether its denominator was zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub undefined: bool,
}

fn ratio(num: u64, den: u64) -> Rate {
    if den == 0 {
        Rate {
            value: 1.0,
            undefined: true,
        }
    } else {
        Rate {
            value: num as f64 / den as f64,
            undefined: false,
        }
    }
}

fn check_pair(pred: &ArrayView2<u8>, gt: &ArrayView2<u8>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(shape_err(gt.dim(), pred.dim()));
    }
    if pred.iter().chain(gt.iter()).any(|&v| v > 1) {
        return Err(Error::InvalidArgument("masks must be binary (0/1)".into()));
    }
    Ok(())
}

pub fn confusion(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<ConfusionCounts> {
    check_pair(&pred, &gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2 TP / (2 TP + FP + FN)`; two empty masks score 1.
pub fn dice(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_).value
}

/// `TP / (TP + FP + FN)`; two empty masks score 1.
pub fn iou(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp + c.fn_).value
}

pub fn accuracy(c: &ConfusionCounts) -> Rate {
    ratio(c.tp + c.tn, c.total())
}

pub fn precision(c: &ConfusionCounts) -> Rate {
    ratio(c.tp, c.tp + c.fp)
}

pub fn sensitivity(c: &ConfusionCounts) -> Rate {
    ratio(c.tp, c.tp + c.fn_)
}

pub fn specificity(c: &ConfusionCounts) -> Rate {
    ratio(c.tn, c.tn + c.fp)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundarySet {
    pub points: Vec<(usize, usize)>,
    pub spacing: Spacing,
}

/// Foreground pixels with a 4-connected background neighbour or lying on
/// the image border, in row-major order.
pub fn extract_boundary(mask: ArrayView2<u8>, spacing: Spacing) -> BoundarySet {
    let (h, w) = mask.dim();
    let mut points = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 0 {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || mask[[r - 1, c]] == 0
                || mask[[r + 1, c]] == 0
                || mask[[r, c - 1]] == 0
                || mask[[r, c + 1]] == 0;
            if edge {
                points.push((r, c));
            }
        }
    }
    BoundarySet { points, spacing }
}

/// Percentile with linear interpolation between closest ranks
/// (`rank = q/100 * (n - 1)`). `None` for empty input.
pub fn percentile_linear(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

/// Squared Euclidean distance from every pixel to the nearest site, using
/// the separable lower-envelope transform with anisotropic spacing.
fn squared_distance_transform(sites: &Array2<bool>, spacing: Spacing) -> Array2<f64> {
    let (h, w) = sites.dim();
    let mut cols = Array2::from_elem((h, w), f64::INFINITY);
    let mut f = vec![0.0; h.max(w)];
    let mut d = vec![0.0; h.max(w)];
    for c in 0..w {
        for r in 0..h {
            f[r] = if sites[[r, c]] { 0.0 } else { f64::INFINITY };
        }
        lower_envelope(&f[..h], spacing.0, &mut d[..h]);
        for r in 0..h {
            cols[[r, c]] = d[r];
        }
    }
    let mut out = Array2::from_elem((h, w), f64::INFINITY);
    for r in 0..h {
        for c in 0..w {
            f[c] = cols[[r, c]];
        }
        lower_envelope(&f[..w], spacing.1, &mut d[..w]);
        for c in 0..w {
            out[[r, c]] = d[c];
        }
    }
    out
}

/// 1D transform `d[p] = min_q f[q] + (s (p - q))^2` over finite `f[q]`.
fn lower_envelope(f: &[f64], s: f64, d: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let key = |q: usize| f[q] + (s * q as f64) * (s * q as f64);
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&last) => {
                    let x = (key(q) - key(last)) / (2.0 * s * s * (q - last) as f64);
                    if x <= *z.last().expect("z tracks v") {
                        v.pop();
                        z.pop();
                        if v.is_empty() {
                            continue;
                        }
                    } else {
                        v.push(q);
                        z.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, out) in d.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        let dist = s * (p as f64 - q as f64);
        *out = f[q] + dist * dist;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hd95 {
    pub value: f64,
    /// Exactly one mask was empty; `value` is the image diagonal in mm.
    pub fallback: bool,
}

/// 95th percentile of the pooled directed boundary distances
/// `{d(p, G) : p in boundary(P)} ∪ {d(g, P) : g in boundary(G)}`.
pub fn hd95(pred: ArrayView2<u8>, gt: ArrayView2<u8>, spacing: Spacing) -> Result<Hd95> {
    check_pair(&pred, &gt)?;
    let (h, w) = pred.dim();
    let bp = extract_boundary(pred, spacing);
    let bg = extract_boundary(gt, spacing);
    match (bp.points.is_empty(), bg.points.is_empty()) {
        (true, true) => {
            return Ok(Hd95 {
                value: 0.0,
                fallback: false,
            })
        }
        (true, false) | (false, true) => {
            let diag = ((h as f64 * spacing.0).powi(2) + (w as f64 * spacing.1).powi(2)).sqrt();
            return Ok(Hd95 {
                value: diag,
                fallback: true,
            });
        }
        _ => {}
    }
    let sites = |b: &BoundarySet| {
        let mut m = Array2::from_elem((h, w), false);
        for &(r, c) in &b.points {
            m[[r, c]] = true;
        }
        m
    };
    let to_gt = squared_distance_transform(&sites(&bg), spacing);
    let to_pred = squared_distance_transform(&sites(&bp), spacing);
    let mut distances = Vec::with_capacity(bp.points.len() + bg.points.len());
    distances.extend(bp.points.iter().map(|&(r, c)| to_gt[[r, c]].sqrt()));
    distances.extend(bg.points.iter().map(|&(r, c)| to_pred[[r, c]].sqrt()));
    Ok(Hd95 {
        value: percentile_linear(&distances, 95.0).expect("nonempty"),
        fallback: false,
    })
}

/// Every metric for one slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub hd95: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub hd95_fallback: bool,
    pub precision_undefined: bool,
    pub sensitivity_undefined: bool,
    pub specificity_undefined: bool,
}

pub fn evaluate_slice(id: &str, pred: ArrayView2<u8>, gt: ArrayView2<u8>, spacing: Spacing) -> Result<SliceMetrics> {
    let c = confusion(pred, gt)?;
    let hd = hd95(pred, gt, spacing)?;
    let (p, s, sp) = (precision(&c), sensitivity(&c), specificity(&c));
    Ok(SliceMetrics {
        id: id.to_string(),
        dice: dice(&c),
        iou: iou(&c),
        hd95: hd.value,
        accuracy: accuracy(&c).value,
        precision: p.value,
        sensitivity: s.value,
        specificity: sp.value,
        hd95_fallback: hd.fallback,
        precision_undefined: p.undefined,
        sensitivity_undefined: s.undefined,
        specificity_undefined: sp.undefined,
    })
}

/// Aggregate means in the column order used for result tables.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub dice: f64,
    pub hd95: f64,
    pub iou: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<SliceMetrics>,
    pub mean: MeanMetrics,
    pub hd95_fallback_count: usize,
    pub undefined_rate_count: usize,
}

impl MetricsReport {
    /// Unweighted mean over the given per-slice rows.
    pub fn from_rows(rows: Vec<SliceMetrics>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("no slices to aggregate".into()));
        }
        let n = rows.len() as f64;
        let mean_of = |f: fn(&SliceMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let mean = MeanMetrics {
            dice: mean_of(|r| r.dice),
            hd95: mean_of(|r| r.hd95),
            iou: mean_of(|r| r.iou),
            accuracy: mean_of(|r| r.accuracy),
            precision: mean_of(|r| r.precision),
            sensitivity: mean_of(|r| r.sensitivity),
            specificity: mean_of(|r| r.specificity),
        };
        let hd95_fallback_count = rows.iter().filter(|r| r.hd95_fallback).count();
        let undefined_rate_count = rows
            .iter()
            .filter(|r| r.precision_undefined || r.sensitivity_undefined || r.specificity_undefined)
            .count();
        Ok(Self {
            rows,
            mean,
            hd95_fallback_count,
            undefined_rate_count,
        })
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<SliceMetrics>, _>>()?;
        Self::from_rows(rows)
    }
}

/// Per-slice metrics (in parallel) followed by unweighted means.
pub fn evaluate_split(
    predictions: &[Array2<u8>],
    ground_truths: &[Array2<u8>],
    spacing: Spacing,
) -> Result<MetricsReport> {
    let ids: Vec<String> = (0..predictions.len()).map(|i| i.to_string()).collect();
    evaluate_named(&ids, predictions, ground_truths, spacing)
}

pub fn evaluate_named(
    ids: &[String],
    predictions: &[Array2<u8>],
    ground_truths: &[Array2<u8>],
    spacing: Spacing,
) -> Result<MetricsReport> {
    if predictions.len() != ground_truths.len() || ids.len() != predictions.len() {
        return Err(Error::InvalidArgument(format!(
            "misaligned slice lists: {} ids, {} predictions, {} ground truths",
            ids.len(),
            predictions.len(),
            ground_truths.len()
        )));
    }
    let rows = exec::map_range(predictions.len(), |i| {
        evaluate_slice(&ids[i], predictions[i].view(), ground_truths[i].view(), spacing)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_masks_count_true_positives() {
        let m = array![[0u8, 1, 1], [0, 1, 0]];
        let c = confusion(m.view(), m.view()).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 3, fp: 0, fn_: 0, tn: 3 });
    }

    #[test]
    fn all_ones_against_empty() {
        let p = Array2::from_elem((4, 4), 1u8);
        let g = Array2::zeros((4, 4));
        let c = confusion(p.view(), g.view()).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 0, fp: 16, fn_: 0, tn: 0 });
    }

    #[test]
    fn hand_values() {
        let c = ConfusionCounts { tp: 2, fp: 2, fn_: 2, tn: 0 };
        assert_eq!(dice(&c), 0.5);
        let c = ConfusionCounts { tp: 1, fp: 1, fn_: 2, tn: 0 };
        assert_eq!(iou(&c), 0.25);
        let c = ConfusionCounts { tp: 3, fp: 1, fn_: 0, tn: 0 };
        assert_eq!(precision(&c).value, 0.75);
        let c = ConfusionCounts { tp: 8, fp: 0, fn_: 0, tn: 8 };
        for r in [accuracy(&c), precision(&c), sensitivity(&c), specificity(&c)] {
            assert_eq!(r.value, 1.0);
            assert!(!r.undefined);
        }
    }

    #[test]
    fn both_empty_is_perfect_and_flagged() {
        let c = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 9 };
        assert_eq!(dice(&c), 1.0);
        assert_eq!(iou(&c), 1.0);
        assert!(precision(&c).undefined);
        assert_eq!(precision(&c).value, 1.0);
        assert!(sensitivity(&c).undefined);
        assert!(!specificity(&c).undefined);
    }

    #[test]
    fn boundary_of_square_excludes_center() {
        let mut m = Array2::zeros((5, 5));
        m.slice_mut(ndarray::s![1..4, 1..4]).fill(1u8);
        let b = extract_boundary(m.view(), UNIT_SPACING);
        assert_eq!(b.points.len(), 8);
        assert!(!b.points.contains(&(2, 2)));
    }

    #[test]
    fn boundary_of_single_pixel() {
        let mut m = Array2::zeros((5, 5));
        m[[2, 3]] = 1u8;
        assert_eq!(extract_boundary(m.view(), UNIT_SPACING).points, vec![(2, 3)]);
    }

    #[test]
    fn border_pixels_are_boundary() {
        let m = Array2::from_elem((3, 3), 1u8);
        let b = extract_boundary(m.view(), UNIT_SPACING);
        assert_eq!(b.points.len(), 8);
    }

    #[test]
    fn hd95_single_pixels() {
        let mut p = Array2::zeros((6, 6));
        let mut g = Array2::zeros((6, 6));
        p[[0, 0]] = 1u8;
        g[[3, 4]] = 1u8;
        let h = hd95(p.view(), g.view(), UNIT_SPACING).unwrap();
        assert_eq!(h.value, 5.0);
        assert!(!h.fallback);
    }

    #[test]
    fn hd95_identity_and_degenerate_cases() {
        let mut m = Array2::zeros((8, 8));
        m.slice_mut(ndarray::s![2..5, 1..6]).fill(1u8);
        assert_eq!(hd95(m.view(), m.view(), UNIT_SPACING).unwrap().value, 0.0);
        let empty = Array2::zeros((8, 8));
        assert_eq!(hd95(empty.view(), empty.view(), UNIT_SPACING).unwrap().value, 0.0);
        let h = hd95(m.view(), empty.view(), (2.0, 1.0)).unwrap();
        assert!(h.fallback);
        assert!((h.value - (16.0f64.powi(2) + 8.0f64.powi(2)).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn hd95_respects_spacing() {
        let mut p = Array2::zeros((6, 6));
        let mut g = Array2::zeros((6, 6));
        p[[0, 0]] = 1u8;
        g[[3, 4]] = 1u8;
        let h = hd95(p.view(), g.view(), (2.0, 0.5)).unwrap();
        assert!((h.value - (36.0f64 + 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = Array2::<u8>::zeros((3, 3));
        let b = Array2::<u8>::zeros((3, 4));
        assert!(confusion(a.view(), b.view()).is_err());
        assert!(hd95(a.view(), b.view(), UNIT_SPACING).is_err());
        assert!(evaluate_split(&[a.clone()], &[], UNIT_SPACING).is_err());
    }

    #[test]
    fn percentile_linear_interpolates() {
        assert_eq!(percentile_linear(&[4.0, 1.0, 3.0, 2.0], 50.0), Some(2.5));
        assert_eq!(percentile_linear(&[7.0], 95.0), Some(7.0));
        assert_eq!(percentile_linear(&[], 50.0), None);
    }

    #[test]
    fn split_means() {
        let mut g = Array2::zeros((4, 4));
        g[[1, 1]] = 1u8;
        g[[1, 2]] = 1u8;
        let mut half = Array2::zeros((4, 4));
        half[[1, 1]] = 1u8;
        // dice(half, g) = 2/3; dice(g, g) = 1
        let r = evaluate_split(&[g.clone(), g.clone()], &[g.clone(), g.clone()], UNIT_SPACING).unwrap();
        assert_eq!(r.mean.dice, 1.0);
        assert_eq!(r.mean.hd95, 0.0);
        let r = evaluate_split(&[half, g.clone()], &[g.clone(), g], UNIT_SPACING).unwrap();
        assert!((r.mean.dice - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    }
}

//! Figures: training-curve panels (SVG), contour overlays and comparison
//! strips (PNG).

use std::fmt::Write as _;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use seglab_core::explain::min_max_normalize;
use seglab_core::metrics::{extract_boundary, UNIT_SPACING};
use seglab_core::training::TrainingLog;

pub const CURVE_PANELS: [&str; 6] = ["total_loss", "loss_ce", "loss_dice", "lr", "val_dice", "val_iou"];

pub const PRED_COLOR: Rgb<u8> = Rgb([0, 0, 255]);
pub const GT_COLOR: Rgb<u8> = Rgb([255, 0, 0]);

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 40.0;

fn series(log: &TrainingLog, panel: &str) -> Vec<(f64, f64)> {
    match panel {
        "total_loss" => log.steps.iter().map(|s| (s.iteration as f64, s.total_loss)).collect(),
        "loss_ce" => log.steps.iter().map(|s| (s.iteration as f64, s.loss_ce)).collect(),
        "loss_dice" => log.steps.iter().map(|s| (s.iteration as f64, s.loss_dice)).collect(),
        "lr" => log.steps.iter().map(|s| (s.iteration as f64, s.lr)).collect(),
        "val_dice" => log.validations.iter().map(|v| (v.iteration as f64, v.val_dice)).collect(),
        "val_iou" => log.validations.iter().map(|v| (v.iteration as f64, v.val_iou)).collect(),
        _ => Vec::new(),
    }
}

fn bounds(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// A 3 x 2 grid of line plots, one per [`CURVE_PANELS`] entry.
pub fn curves_svg(log: &TrainingLog, title: &str) -> String {
    let cols = 3;
    let width = cols as f64 * PANEL_W;
    let height = 2.0 * PANEL_H + 30.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="10" y="18" font-size="14">{}</text>"#, escape(title));
    for (i, name) in CURVE_PANELS.iter().enumerate() {
        let ox = (i % cols) as f64 * PANEL_W;
        let oy = 30.0 + (i / cols) as f64 * PANEL_H;
        let pts = series(log, name);
        let (x0, x1) = bounds(pts.iter().map(|p| p.0));
        let (y0, y1) = bounds(pts.iter().map(|p| p.1));
        let pw = PANEL_W - 1.5 * MARGIN;
        let ph = PANEL_H - 1.5 * MARGIN;
        let _ = writeln!(svg, r#"<g class="panel" id="{name}" transform="translate({ox},{oy})">"#);
        let _ = writeln!(svg, r#"<text x="{}" y="14">{name}</text>"#, MARGIN);
        let _ = writeln!(
            svg,
            r#"<rect x="{MARGIN}" y="20" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(svg, r#"<text x="2" y="28">{}</text>"#, fmt_tick(y1));
        let _ = writeln!(svg, r#"<text x="2" y="{}">{}</text>"#, 20.0 + ph, fmt_tick(y0));
        let _ = writeln!(svg, r#"<text x="{MARGIN}" y="{}">{}</text>"#, 34.0 + ph, fmt_tick(x0));
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            MARGIN + pw,
            34.0 + ph,
            fmt_tick(x1)
        );
        if pts.is_empty() {
            let _ = writeln!(svg, r#"<text x="{}" y="{}">no data</text>"#, MARGIN + 8.0, 40.0);
        } else {
            let coords: Vec<String> = pts
                .iter()
                .map(|&(x, y)| {
                    let px = MARGIN + (x - x0) / (x1 - x0) * pw;
                    let py = 20.0 + ph - (y - y0) / (y1 - y0) * ph;
                    format!("{px:.2},{py:.2}")
                })
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#,
                coords.join(" ")
            );
        }
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    svg
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Contour pixels of a binary mask (the boundary used by HD95).
pub fn contour(mask: &Array2<u8>) -> Vec<(usize, usize)> {
    extract_boundary(mask.view(), UNIT_SPACING).points
}

/// Min-max scaled grayscale rendering of a slice.
pub fn gray_image(image: &Array2<f64>) -> RgbImage {
    let g = min_max_normalize(&image.mapv(|v| v - image.iter().copied().fold(f64::INFINITY, f64::min)));
    let (h, w) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (g[[y as usize, x as usize]] * 255.0).round() as u8;
        Rgb([v, v, v])
    })
}

fn paint(img: &mut RgbImage, pixels: &[(usize, usize)], color: Rgb<u8>) {
    for &(y, x) in pixels {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// Slice with the ground-truth contour in red and the prediction contour in
/// blue (drawn last, so coinciding contours show blue).
pub fn contour_panel(image: &Array2<f64>, pred: &Array2<u8>, gt: &Array2<u8>) -> RgbImage {
    let mut img = gray_image(image);
    paint(&mut img, &contour(gt), GT_COLOR);
    paint(&mut img, &contour(pred), PRED_COLOR);
    img
}

fn mask_image(mask: &Array2<u8>, color: Rgb<u8>) -> RgbImage {
    let (h, w) = mask.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        if mask[[y as usize, x as usize]] != 0 {
            color
        } else {
            Rgb([0, 0, 0])
        }
    })
}

/// Rows are slices; columns are input, ground truth, then one prediction per
/// run. Returns the image and its column count.
pub fn comparison_strip(
    images: &[&Array2<f64>],
    gts: &[&Array2<u8>],
    preds_per_run: &[Vec<Array2<u8>>],
) -> anyhow::Result<(RgbImage, usize)> {
    let rows = images.len();
    anyhow::ensure!(rows > 0, "comparison strip needs at least one slice");
    anyhow::ensure!(gts.len() == rows, "one ground truth per slice");
    for p in preds_per_run {
        anyhow::ensure!(p.len() == rows, "every run needs one prediction per slice");
    }
    let (h, w) = images[0].dim();
    let cols = preds_per_run.len() + 2;
    let gap = 2;
    let mut out = RgbImage::from_pixel(
        (cols * (w + gap) - gap) as u32,
        (rows * (h + gap) - gap) as u32,
        Rgb([255, 255, 255]),
    );
    for r in 0..rows {
        let mut tiles = vec![gray_image(images[r]), mask_image(gts[r], GT_COLOR)];
        tiles.extend(preds_per_run.iter().map(|p| contour_panel(images[r], &p[r], gts[r])));
        for (c, tile) in tiles.iter().enumerate() {
            anyhow::ensure!(tile.dimensions() == (w as u32, h as u32), "slice sizes differ");
            image::imageops::replace(&mut out, tile, (c * (w + gap)) as i64, (r * (h + gap)) as i64);
        }
    }
    Ok((out, cols))
}

//! Result-table markers and figure geometry.

use image::Rgb;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seglab::render::*;
use seglab::table::*;
use seglab_core::metrics::MeanMetrics;
use seglab_core::training::{StepRecord, TrainingLog, ValRecord};

fn random_table(rng: &mut ChaCha8Rng, rows: usize) -> ResultTable {
    ResultTable {
        rows: (0..rows)
            .map(|i| {
                // coarse values so ties actually occur
                let mut q = || (rng.random_range(0..4) as f64) / 4.0;
                let m = MeanMetrics {
                    dice: q(),
                    hd95: q() * 100.0,
                    iou: q(),
                    accuracy: q(),
                    precision: q(),
                    sensitivity: q(),
                    specificity: q(),
                };
                TableRow::new(format!("model{i}"), 1_000_000 + i * 12_345, &m)
            })
            .collect(),
    }
}

#[test]
fn best_markers_match_recomputed_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let dir = tempfile::tempdir().unwrap();
    for trial in 0..30 {
        let table = random_table(&mut rng, 1 + trial % 6);
        let path = dir.path().join("t.csv");
        table.write_csv(&path).unwrap();
        let (read, marks) = ResultTable::read_csv(&path).unwrap();
        assert_eq!(read, table);
        for c in FIRST_METRIC..COLUMNS.len() {
            let col: Vec<f64> = read.rows.iter().map(|r| r.values[c - FIRST_METRIC]).collect();
            let target = if COLUMNS[c] == "HD95" {
                col.iter().copied().fold(f64::INFINITY, f64::min)
            } else {
                col.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            for (i, v) in col.iter().enumerate() {
                assert_eq!(*v == target, marks[i].iter().any(|m| m == COLUMNS[c]), "column {}", COLUMNS[c]);
            }
        }
        let stars = table.to_text().matches('*').count() - 1;
        assert_eq!(stars, marks.iter().map(Vec::len).sum::<usize>());
    }
}

#[test]
fn table_layout() {
    let m = MeanMetrics {
        dice: 0.74567,
        hd95: 88.08249,
        iou: 0.657,
        accuracy: 0.915,
        precision: 0.764,
        sensitivity: 0.768,
        specificity: 0.916,
    };
    let table = ResultTable {
        rows: vec![TableRow::new("ResNetUNet3+", 31_100_000, &m)],
    };
    let text = table.to_text();
    let lines: Vec<&str> = text.lines().collect();
    let header: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(header, COLUMNS);
    assert!(lines[2].starts_with("ResNetUNet3+"));
    assert!(lines[2].contains("31.10M"));
    assert!(lines[2].contains("0.7457*"));
    assert!(lines[2].contains("88.082*"));
    assert_eq!(direction("HD95"), Better::Lower);
    assert_eq!(direction("Dice(DSC)"), Better::Higher);
}

fn log() -> TrainingLog {
    TrainingLog {
        steps: (1..=10)
            .map(|i| StepRecord {
                iteration: i,
                total_loss: 1.0 / i as f64,
                loss_ce: 0.6 / i as f64,
                loss_dice: 0.4 / i as f64,
                lr: 0.01 * (1.0 - (i - 1) as f64 / 10.0).powf(0.9),
            })
            .collect(),
        validations: [5, 10]
            .into_iter()
            .map(|i| ValRecord {
                iteration: i,
                val_dice: i as f64 / 12.0,
                val_iou: i as f64 / 15.0,
            })
            .collect(),
    }
}

#[test]
fn curve_figure_has_six_panels() {
    let svg = curves_svg(&log(), "A & B");
    assert_eq!(svg.matches(r#"<g class="panel""#).count(), 6);
    for name in CURVE_PANELS {
        assert!(svg.contains(&format!(r#"id="{name}""#)), "{name}");
    }
    assert!(svg.contains("A &amp; B"));
    assert!(svg.trim_end().ends_with("</svg>"));
}

fn disc(n: usize, cy: f64, cx: f64, r: f64) -> Array2<u8> {
    Array2::from_shape_fn((n, n), |(y, x)| ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r) as u8)
}

fn colored(img: &image::RgbImage, c: Rgb<u8>) -> Vec<(usize, usize)> {
    let mut v: Vec<(usize, usize)> = img
        .enumerate_pixels()
        .filter(|(_, _, p)| **p == c)
        .map(|(x, y, _)| (y as usize, x as usize))
        .collect();
    v.sort();
    v
}

#[test]
fn coinciding_contours_overlap() {
    let image = Array2::from_shape_fn((32, 32), |(y, x)| ((x + y) % 7) as f64 * 0.1);
    let gt = disc(32, 15.0, 14.0, 6.0);
    let same = contour_panel(&image, &gt, &gt);
    assert!(colored(&same, GT_COLOR).is_empty());
    let mut expected = contour(&gt);
    expected.sort();
    assert_eq!(colored(&same, PRED_COLOR), expected);

    let shifted = disc(32, 18.0, 17.0, 6.0);
    let diff = contour_panel(&image, &shifted, &gt);
    assert!(!colored(&diff, GT_COLOR).is_empty());
    assert!(!colored(&diff, PRED_COLOR).is_empty());
}

#[test]
fn comparison_strip_columns() {
    let image = Array2::from_elem((16, 20), 0.5);
    let gt = Array2::<u8>::zeros((16, 20));
    for runs in 0..4 {
        let preds: Vec<Vec<Array2<u8>>> = (0..runs).map(|_| vec![gt.clone(), gt.clone()]).collect();
        let (img, cols) = comparison_strip(&[&image, &image], &[&gt, &gt], &preds).unwrap();
        assert_eq!(cols, runs + 2);
        assert_eq!(img.dimensions(), ((cols * 22 - 2) as u32, (2 * 18 - 2) as u32));
    }
    let bad = vec![vec![gt.clone()]];
    assert!(comparison_strip(&[&image, &image], &[&gt, &gt], &bad).is_err());
}

//! Experiment orchestration: prepare, train, evaluate, ablate, report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use seglab_core::data::{generate_phantom, load_prepared, prepare, PreparedDataset, SliceSample, Split};
use seglab_core::metrics::{evaluate_named, MeanMetrics, MetricsReport};
use seglab_core::models::{build_model, load_checkpoint, load_pretrained, save_checkpoint, Model};
use seglab_core::training::{train, Segmenter, TrainConfig, TrainingLog};

use crate::config::ExperimentConfig;
use crate::render::{comparison_strip, contour_panel, curves_svg};
use crate::table::{ResultTable, TableRow};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.safetensors";
pub const LOG: &str = "training_log.csv";
pub const REPORT: &str = "report.csv";
pub const CURVES: &str = "curves.svg";
pub const FAILURE_MARKER: &str = "FAILED";

const PREDICT_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub iteration: usize,
    pub val_dice: f64,
    pub val_iou: f64,
}

/// Machine-readable record of a run; `artifacts` maps kind to file name
/// relative to the run directory and includes the manifest itself.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub status: RunStatus,
    pub model: String,
    pub param_count: usize,
    pub seed: u64,
    pub prepared_data: PathBuf,
    /// SHA-256 over the sorted `(case, slice, split)` assignment.
    pub split_sha256: String,
    pub best: Option<BestCheckpoint>,
    pub mean: Option<MeanMetrics>,
    pub hd95_fallback_count: Option<usize>,
    pub error: Option<String>,
    pub artifacts: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub report: MetricsReport,
    pub log: TrainingLog,
}

/// Generates phantom volumes when configured, then runs the slice pipeline.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedDataset> {
    if let Some(spec) = &cfg.data.phantom {
        generate_phantom(spec, &cfg.data.input)?;
    } else if !cfg.data.input.is_dir() {
        bail!("data directory {} does not exist", cfg.data.input.display());
    }
    Ok(prepare(&cfg.prepare_config())?)
}

pub fn split_digest(data: &PreparedDataset) -> String {
    let mut lines: Vec<String> = data
        .index
        .records
        .iter()
        .map(|r| {
            let split = r.split.map_or("NONE", |s| s.as_str());
            format!("{}\t{}\t{}", r.case_id, r.slice_index, split)
        })
        .collect();
    lines.sort();
    let mut h = Sha256::new();
    for l in &lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Argmax foreground masks for `slices`, in order.
pub fn predict_slices(model: &dyn Segmenter, slices: &[SliceSample]) -> Result<Vec<Array2<u8>>> {
    let mut out = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(PREDICT_BATCH) {
        let images: Vec<&Array2<f64>> = chunk.iter().map(|s| &s.image).collect();
        out.extend(model.segment(&images)?);
    }
    Ok(out)
}

pub fn slice_id(s: &SliceSample) -> String {
    format!("{}#{}", s.case_id, s.slice_index)
}

/// Evaluates `model` on the test split.
pub fn evaluate_model(model: &Model, data: &PreparedDataset, cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let test = data.split(Split::Test);
    if test.is_empty() {
        bail!("test split is empty; adjust data.split or add cases");
    }
    let preds = predict_slices(model, &test)?;
    let gts: Vec<Array2<u8>> = test.iter().map(|s| s.mask.clone()).collect();
    let ids: Vec<String> = test.iter().map(slice_id).collect();
    Ok(evaluate_named(&ids, &preds, &gts, cfg.eval.spacing)?)
}

/// prepare -> train -> evaluate into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let data = prepare_data(&cfg)?;
    run_on_dataset(&cfg, &data, &cfg.output_dir)
}

/// Trains and evaluates on an already prepared dataset. On failure the run
/// directory keeps whatever was written plus a failure marker.
pub fn run_on_dataset(cfg: &ExperimentConfig, data: &PreparedDataset, dir: &Path) -> Result<RunResult> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let marker = dir.join(FAILURE_MARKER);
    if marker.exists() {
        std::fs::remove_file(&marker)?;
    }
    let mut manifest = RunManifest {
        name: cfg.name.clone(),
        status: RunStatus::Failed,
        model: cfg.model.display_name(),
        param_count: 0,
        seed: cfg.seed,
        prepared_data: cfg.data.prepared.clone(),
        split_sha256: split_digest(data),
        best: None,
        mean: None,
        hd95_fallback_count: None,
        error: None,
        artifacts: BTreeMap::new(),
        config: cfg.clone(),
    };
    match run_stages(cfg, data, dir, &mut manifest) {
        Ok((report, log)) => {
            manifest.status = RunStatus::Completed;
            write_manifest(dir, &mut manifest)?;
            Ok(RunResult {
                dir: dir.to_path_buf(),
                manifest,
                report,
                log,
            })
        }
        Err(e) => {
            std::fs::write(&marker, format!("{e:#}\n"))?;
            manifest.error = Some(format!("{e:#}"));
            manifest.artifacts.insert("failure_marker".into(), FAILURE_MARKER.into());
            write_manifest(dir, &mut manifest)?;
            Err(e)
        }
    }
}

fn write_manifest(dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    manifest.artifacts.insert("manifest".into(), MANIFEST.into());
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

fn run_stages(
    cfg: &ExperimentConfig,
    data: &PreparedDataset,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<(MetricsReport, TrainingLog)> {
    let train_set = data.split(Split::Train);
    let val_set = data.split(Split::Val);
    let mut model = build_model(&cfg.model, cfg.seed)?;
    if cfg.model.pretrained {
        let path = cfg.pretrained_weights.as_deref().context("pretrained_weights is not set")?;
        load_pretrained(&mut model, path)?;
    }
    manifest.param_count = model.param_count();

    let outcome = train(&mut model, &train_set, &val_set, &cfg.train)?;
    outcome.log.write_csv(&dir.join(LOG))?;
    manifest.artifacts.insert("log".into(), LOG.into());
    std::fs::write(dir.join(CURVES), curves_svg(&outcome.log, &manifest.model))?;
    manifest.artifacts.insert("curves".into(), CURVES.into());

    if let Some(best) = &outcome.best {
        model.store_mut().restore(&best.params);
        manifest.best = Some(BestCheckpoint {
            iteration: best.iteration,
            val_dice: best.val_dice,
            val_iou: best.val_iou,
        });
    }
    let mut meta = BTreeMap::new();
    meta.insert("experiment".to_string(), cfg.name.clone());
    meta.insert("train_config".to_string(), serde_json::to_string(&cfg.train)?);
    meta.insert("best".to_string(), serde_json::to_string(&manifest.best)?);
    save_checkpoint(&model, &dir.join(CHECKPOINT), &meta)?;
    manifest.artifacts.insert("checkpoint".into(), CHECKPOINT.into());

    let report = evaluate_model(&model, data, cfg)?;
    report.write_csv(&dir.join(REPORT))?;
    manifest.artifacts.insert("report".into(), REPORT.into());
    manifest.mean = Some(report.mean);
    manifest.hd95_fallback_count = Some(report.hd95_fallback_count);
    Ok((report, outcome.log))
}

/// Reads the training configuration stored alongside a checkpoint.
pub fn checkpoint_train_config(meta: &BTreeMap<String, String>) -> Option<TrainConfig> {
    meta.get("train_config").and_then(|s| serde_json::from_str(s).ok())
}

#[derive(Debug)]
pub struct AblationResult {
    pub table: ResultTable,
    pub runs: Vec<RunResult>,
    /// `(variant name, error)` for variants that failed.
    pub failures: Vec<(String, String)>,
    pub csv: PathBuf,
    pub text: PathBuf,
}

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TXT: &str = "ablation.txt";

/// Runs every grid variant on one shared prepared dataset and seed.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationResult> {
    let cfg = cfg.resolved();
    if cfg.ablation.variants.is_empty() {
        bail!("ablation grid is empty");
    }
    cfg.validate()?;
    let data = prepare_data(&cfg)?;
    let mut table = ResultTable::default();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (i, v) in cfg.ablation.variants.iter().enumerate() {
        let mut vcfg = cfg.clone();
        vcfg.model.attention.variant = v.attention;
        if let Some(b) = v.backbone {
            vcfg.model.backbone = b;
        }
        let name = format!("{i:02}_{}_{}", vcfg.model.backbone, v.attention);
        vcfg.name = format!("{}/{name}", cfg.name);
        let dir = cfg.output_dir.join(&name);
        vcfg.output_dir = dir.clone();
        let result = vcfg.validate().and_then(|_| run_on_dataset(&vcfg, &data, &dir));
        match result {
            Ok(r) => {
                table
                    .rows
                    .push(TableRow::new(r.manifest.model.clone(), r.manifest.param_count, &r.report.mean));
                runs.push(r);
            }
            Err(e) => failures.push((name, format!("{e:#}"))),
        }
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    let csv = cfg.output_dir.join(ABLATION_CSV);
    let text = cfg.output_dir.join(ABLATION_TXT);
    table.write_csv(&csv)?;
    let mut body = table.to_text();
    for (name, err) in &failures {
        body.push_str(&format!("FAILED {name}: {err}\n"));
    }
    std::fs::write(&text, body)?;
    Ok(AblationResult {
        table,
        runs,
        failures,
        csv,
        text,
    })
}

#[derive(Debug, Default)]
pub struct ReportSummary {
    pub written: Vec<PathBuf>,
    /// Human-readable descriptions of artifacts that could not be used.
    pub missing: Vec<String>,
}

/// Test slices shown in qualitative panels.
const PANEL_SLICES: usize = 4;

fn run_label(dir: &Path) -> String {
    dir.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned())
}

/// Curves, contour panels, a comparison strip and a combined table for the
/// given run directories. Missing artifacts are listed and skipped.
pub fn render_report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportSummary> {
    std::fs::create_dir_all(out)?;
    let mut summary = ReportSummary::default();
    let mut table = ResultTable::default();
    let mut shown: Option<Vec<SliceSample>> = None;
    let mut strip_preds = Vec::new();
    for dir in run_dirs {
        let label = run_label(dir);
        let manifest = match RunManifest::read(dir) {
            Ok(m) => m,
            Err(e) => {
                summary.missing.push(format!("{label}: {e:#}"));
                continue;
            }
        };
        if let Some(mean) = &manifest.mean {
            table.rows.push(TableRow::new(manifest.model.clone(), manifest.param_count, mean));
        } else {
            summary.missing.push(format!("{label}: no metrics in manifest"));
        }
        match TrainingLog::read_csv(&dir.join(LOG)) {
            Ok(log) => {
                let path = out.join(format!("{label}_curves.svg"));
                std::fs::write(&path, curves_svg(&log, &manifest.model))?;
                summary.written.push(path);
            }
            Err(e) => summary.missing.push(format!("{label}: {LOG}: {e}")),
        }
        let model = match load_checkpoint(&dir.join(CHECKPOINT)) {
            Ok((m, _)) => m,
            Err(e) => {
                summary.missing.push(format!("{label}: {CHECKPOINT}: {e}"));
                continue;
            }
        };
        if shown.is_none() {
            match load_prepared(&manifest.prepared_data) {
                Ok(d) => shown = Some(d.split(Split::Test).into_iter().take(PANEL_SLICES).collect()),
                Err(e) => {
                    summary.missing.push(format!("{label}: prepared data: {e}"));
                    continue;
                }
            }
        }
        let slices = shown.as_deref().unwrap_or_default();
        if slices.is_empty() {
            summary.missing.push(format!("{label}: no test slices to render"));
            continue;
        }
        let preds = match predict_slices(&model, slices) {
            Ok(p) => p,
            Err(e) => {
                summary.missing.push(format!("{label}: prediction failed: {e:#}"));
                continue;
            }
        };
        let (h, w) = slices[0].image.dim();
        let mut panel = image::RgbImage::new((slices.len() * (w + 2) - 2) as u32, h as u32);
        for (k, (s, p)) in slices.iter().zip(&preds).enumerate() {
            let tile = contour_panel(&s.image, p, &s.mask);
            image::imageops::replace(&mut panel, &tile, (k * (w + 2)) as i64, 0);
        }
        let path = out.join(format!("{label}_contours.png"));
        panel.save(&path)?;
        summary.written.push(path);
        strip_preds.push(preds);
    }
    if let (Some(slices), false) = (&shown, strip_preds.is_empty()) {
        let images: Vec<&Array2<f64>> = slices.iter().map(|s| &s.image).collect();
        let gts: Vec<&Array2<u8>> = slices.iter().map(|s| &s.mask).collect();
        let (img, _) = comparison_strip(&images, &gts, &strip_preds)?;
        let path = out.join("comparison.png");
        img.save(&path)?;
        summary.written.push(path);
    }
    if !table.rows.is_empty() {
        let csv = out.join("results.csv");
        let txt = out.join("results.txt");
        table.write_csv(&csv)?;
        std::fs::write(&txt, table.to_text())?;
        summary.written.extend([csv, txt]);
    }
    Ok(summary)
}

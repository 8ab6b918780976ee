use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Ix2};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};

use seglab::config::{phantom_preset, ExperimentConfig};
use seglab::runner::{render_report, run_ablation, run_experiment, run_on_dataset};
use seglab_core::data::{
    generate_phantom, load_prepared, normalize_slice, prepare, resize_image, PhantomSpec, PrepareConfig, SlicePolicy,
    SplitLevel,
};
use seglab_core::explain::{gradcam, overlay_image};
use seglab_core::metrics::{evaluate_named, Spacing};
use seglab_core::attention::AttentionVariant;
use seglab_core::models::{load_checkpoint, Backbone};

#[derive(Parser)]
#[command(name = "seglab", version, about = "Liver-lesion segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify volumes, extract slices, normalize, resize and split.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, visible_alias = "out")]
        output: PathBuf,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_triple, default_value = "0.7,0.2,0.1")]
        split: [f64; 3],
        #[arg(long, default_value = "case")]
        level: SplitLevel,
        #[arg(long, default_value = "lesion")]
        policy: SlicePolicy,
    },
    /// Write synthetic CT/mask volumes.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        cases: usize,
        #[arg(long, default_value_t = 8)]
        slices: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a small phantom experiment config to get started.
    Init {
        #[arg(long)]
        out: PathBuf,
    },
    /// Full prepare -> train -> evaluate run from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train and evaluate on an already prepared dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score predicted masks against ground truth (matched by file name).
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_parser = parse_spacing, default_value = "1,1")]
        spacing: Spacing,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every variant of the config's ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Grad-CAM heatmap and overlay for one slice.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 2D `.npy` slice.
        #[arg(long)]
        input: PathBuf,
        /// Defaults to the last convolution before the head.
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
    /// Figures and a combined table from completed run directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Command-line values that take precedence over the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    attention: Option<AttentionVariant>,
    #[arg(long)]
    backbone: Option<Backbone>,
    #[arg(long)]
    max_iterations: Option<usize>,
}

fn parse_floats(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    parse_floats(s)?
        .try_into()
        .map_err(|_| "expected three comma-separated ratios".to_string())
}

fn parse_spacing(s: &str) -> Result<Spacing, String> {
    match parse_floats(s)?.as_slice() {
        &[x, y] if x > 0.0 && y > 0.0 => Ok((x, y)),
        _ => Err("expected two positive values `sx,sy`".into()),
    }
}

fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
    if ext.eq_ignore_ascii_case("png") {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        return Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            (img.get_pixel(x as u32, y as u32)[0] != 0) as u8
        }));
    }
    if let Ok(a) = Array2::<u8>::read_npy(File::open(path)?) {
        return Ok(a.mapv(|v| (v != 0) as u8));
    }
    if let Ok(a) = Array2::<i64>::read_npy(File::open(path)?) {
        return Ok(a.mapv(|v| (v != 0) as u8));
    }
    let a = Array2::<f64>::read_npy(File::open(path)?).with_context(|| format!("reading mask {}", path.display()))?;
    Ok(a.mapv(|v| (v > 0.5) as u8))
}

fn read_slice(path: &Path) -> Result<Array2<f64>> {
    if let Ok(a) = Array2::<f64>::read_npy(File::open(path)?) {
        return Ok(a);
    }
    let a = Array2::<f32>::read_npy(File::open(path)?).with_context(|| format!("reading slice {}", path.display()))?;
    Ok(a.mapv(f64::from))
}

fn mask_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default().to_ascii_lowercase();
        if path.is_file() && (ext == "npy" || ext == "png") {
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            out.push((name, path));
        }
    }
    out.sort();
    Ok(out)
}

fn evaluate(pred: &Path, gt: &Path, spacing: Spacing, out: &Path) -> Result<()> {
    let preds = mask_files(pred)?;
    let gts = mask_files(gt)?;
    let mut ids = Vec::new();
    let mut p = Vec::new();
    let mut g = Vec::new();
    for (name, path) in &gts {
        let Some((_, pp)) = preds.iter().find(|(n, _)| n == name) else {
            bail!("no prediction for ground-truth file {name}");
        };
        ids.push(name.clone());
        p.push(read_mask(pp)?);
        g.push(read_mask(path)?);
    }
    if ids.is_empty() {
        bail!("no masks found in {}", gt.display());
    }
    let report = evaluate_named(&ids, &p, &g, spacing)?;
    report.write_csv(out)?;
    let m = report.mean;
    println!(
        "slices {}  Dice {:.4}  HD95 {:.3}  IoU {:.4}  Acc {:.4}  Pre {:.4}  Sen {:.4}  Spe {:.4}",
        ids.len(),
        m.dice,
        m.hd95,
        m.iou,
        m.accuracy,
        m.precision,
        m.sensitivity,
        m.specificity
    );
    println!(
        "HD95 fallback slices: {}; slices with an undefined rate: {}",
        report.hd95_fallback_count, report.undefined_rate_count
    );
    Ok(())
}

fn explain(checkpoint: &Path, input: &Path, layer: Option<&str>, out: &Path, alpha: f64) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let raw = read_slice(input)?.into_dimensionality::<Ix2>()?;
    let size = model.config().input_size;
    let image = resize_image(normalize_slice(raw.view())?.view(), size);
    let layer = layer.map_or_else(|| model.default_target_layer(), str::to_string);
    let heat = gradcam(&model, &image, &layer)?;
    if heat.empty_prediction {
        eprintln!("note: predicted mask is empty; the score used the mean foreground logit");
    }
    overlay_image(&heat.values, &image, alpha)?.save(out)?;
    let npy = out.with_extension("npy");
    heat.values.write_npy(File::create(&npy)?)?;
    println!("wrote {} and {}", out.display(), npy.display());
    Ok(())
}

fn load_config(path: &Path, o: Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(dir) = o.out {
        cfg.output_dir = dir;
    }
    if let Some(a) = o.attention {
        cfg.model.attention.variant = a;
    }
    if let Some(b) = o.backbone {
        cfg.model.backbone = b;
    }
    if let Some(n) = o.max_iterations {
        cfg.train.max_iterations = n;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Prepare {
            input,
            output,
            size,
            seed,
            split,
            level,
            policy,
        } => {
            let data = prepare(&PrepareConfig {
                input,
                output: output.clone(),
                size,
                split,
                seed,
                level,
                policy,
            })?;
            let rejected = data.pairs.iter().filter(|p| !p.valid).count();
            println!(
                "{} slices from {} pairs ({} rejected); split counts {:?}; written to {}",
                data.samples.len(),
                data.pairs.len(),
                rejected,
                data.index.split_counts(),
                output.display()
            );
        }
        Command::Phantom {
            out,
            cases,
            slices,
            size,
            seed,
        } => {
            let spec = PhantomSpec {
                n_cases: cases,
                slices_per_case: slices,
                image_size: size,
                seed,
                ..Default::default()
            };
            let (pairs, _) = generate_phantom(&spec, &out)?;
            println!("wrote {} phantom cases to {}", pairs.len(), out.display());
        }
        Command::Init { out } => {
            let cfg = phantom_preset(Path::new("."));
            std::fs::write(&out, cfg.to_toml()?)?;
            println!("wrote {}", out.display());
        }
        Command::Run { config, overrides } => {
            let cfg = load_config(&config, overrides)?;
            let r = run_experiment(&cfg)?;
            println!("run complete: {}", r.dir.display());
            println!("{}", seglab::table::ResultTable {
                rows: vec![seglab::table::TableRow::new(r.manifest.model, r.manifest.param_count, &r.report.mean)],
            }
            .to_text());
        }
        Command::Train {
            config,
            data,
            overrides,
        } => {
            let mut cfg = load_config(&config, overrides)?.resolved();
            cfg.data.prepared = data.clone();
            cfg.model.validate()?;
            cfg.train.validate()?;
            let dataset = load_prepared(&data)?;
            let r = run_on_dataset(&cfg, &dataset, &cfg.output_dir)?;
            println!("run complete: {}", r.dir.display());
        }
        Command::Evaluate { pred, gt, spacing, out } => evaluate(&pred, &gt, spacing, &out)?,
        Command::Ablate { config, overrides } => {
            let cfg = load_config(&config, overrides)?;
            let r = run_ablation(&cfg)?;
            print!("{}", r.table.to_text());
            for (name, err) in &r.failures {
                eprintln!("variant {name} failed: {err}");
            }
            println!("tables: {} and {}", r.csv.display(), r.text.display());
            if !r.failures.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Explain {
            checkpoint,
            input,
            layer,
            out,
            alpha,
        } => explain(&checkpoint, &input, layer.as_deref(), &out, alpha)?,
        Command::Report { runs, out } => {
            let s = render_report(&runs, &out)?;
            for p in &s.written {
                println!("wrote {}", p.display());
            }
            for m in &s.missing {
                eprintln!("missing: {m}");
            }
            if !s.missing.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use corrdet::data::{class_by_name, class_name, read_png, write_png, FewShotDataset, Stage};
use corrdet::detector::{detect, precompute_prototypes};
use corrdet::eval::render_table;
use corrdet::pipeline::{self, RunDir};
use corrdet::{Checkpoint, ClassId, Detection, Image, RunConfig};
use serde_json::json;

/// Few-shot detection on synthetic shapes.
#[derive(Parser, Debug)]
#[command(name = "corrdet", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.k_shot=2`.
    /// Repeatable; given before the subcommand.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory; overrides `output_dir` from the configuration.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset to disk.
    GenerateData {
        /// Destination; defaults to `dataset` from the configuration.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Episodic training on base classes.
    TrainBase {
        /// Continue from a base checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a base checkpoint on a K-shot support set.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        support_seed: Option<u64>,
    },
    /// AP over the test pool, once per support seed.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated seeds; defaults to `eval.support_seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Detect objects in one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Dataset whose few-shot pool provides the supports.
        #[arg(long)]
        supports: Option<PathBuf>,
        /// Class names to look for; all classes when omitted.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        #[arg(long, default_value_t = corrdet::detector::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Fine-tune and evaluate once per value of one setting.
    Sweep {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values; C: integers, cam-flags: three-letter
        /// 0/1 masks (sigmoid, multiply, background), cam-placement: layers.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    C,
    CamFlags,
    CamPlacement,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::C => "c",
            Axis::CamFlags => "cam_flags",
            Axis::CamPlacement => "cam_placement",
        }
    }

    fn defaults(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::C => &["1", "2", "5", "8"],
            Axis::CamFlags => &["000", "001", "110", "111"],
            Axis::CamPlacement => &["1", "2", "3"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

const OUTPUT_ROOT_ENV: &str = "CORRDET_OUTPUT_ROOT";

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::with_overrides(&text, &cli.overrides)?;
    if let Some(o) = &cli.output_dir {
        cfg.output_dir = o.clone();
    }
    if cfg.output_dir.is_relative() {
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
            cfg.output_dir = PathBuf::from(root).join(&cfg.output_dir);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Appends one command record to `manifest.json` and rewrites
/// `config.resolved`.
fn record(dir: &RunDir, cfg: &RunConfig, command: &str, extra: serde_json::Value) -> Result<()> {
    cfg.write_resolved(&dir.root)?;
    let path = dir.root.join("manifest.json");
    let mut manifest: serde_json::Value = match fs::read(&path) {
        Ok(b) => serde_json::from_slice(&b).with_context(|| format!("parsing {}", path.display()))?,
        Err(_) => json!({ "runs": [] }),
    };
    let entry = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config_sha256": cfg.sha256(),
        "config": cfg.to_toml(),
        "details": extra,
    });
    manifest["runs"]
        .as_array_mut()
        .context("manifest.json has no runs array")?
        .push(entry);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<FewShotDataset> {
    FewShotDataset::load(path).with_context(|| format!("loading dataset from {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_generate_data(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| cfg.dataset.clone());
    let ds = FewShotDataset::generate(&cfg.data)?;
    ds.save(&out)?;
    println!(
        "wrote {} base, {} few-shot and {} test images to {}",
        ds.base.len(),
        ds.fewshot.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train_base(cfg: &RunConfig, resume: Option<PathBuf>) -> Result<()> {
    let ds = load_dataset(&cfg.dataset)?;
    let dir = RunDir::create(&cfg.output_dir)?;
    let resume = resume.map(|p| load_checkpoint(&p)).transpose()?;
    let out = pipeline::train_base(cfg, &ds, Some(&dir), resume.as_ref())?;
    let last = out.reports.last();
    record(
        &dir,
        cfg,
        "train-base",
        json!({
            "resumed_from_step": resume.as_ref().map(|c| c.manifest.step),
            "final_step": out.checkpoint.manifest.step,
            "final_loss": last.map(|r| r.terms.total),
        }),
    )?;
    println!(
        "base training finished at step {}; checkpoints in {}",
        out.checkpoint.manifest.step,
        dir.checkpoints().display()
    );
    Ok(())
}

fn cmd_finetune(mut cfg: RunConfig, base: PathBuf, k: Option<usize>, seed: Option<u64>) -> Result<()> {
    if let Some(k) = k {
        cfg.train.k_shot = k;
    }
    if let Some(s) = seed {
        cfg.train.support_seed = s;
    }
    cfg.validate()?;
    let ds = load_dataset(&cfg.dataset)?;
    let dir = RunDir::create(&cfg.output_dir)?;
    let base_ck = load_checkpoint(&base)?;
    let out = pipeline::finetune(&cfg, &ds, &base_ck, Some(&dir))?;
    let m = &out.checkpoint.manifest;
    record(
        &dir,
        &cfg,
        "finetune",
        json!({
            "base_checkpoint": base,
            "k_shot": m.k_shot,
            "support_seed": m.support_seed,
            "support_manifest": m.support_manifest,
            "final_step": m.step,
        }),
    )?;
    println!(
        "fine-tuned with K={} seed {}; checkpoints in {}",
        cfg.train.k_shot,
        cfg.train.support_seed,
        dir.checkpoints().display()
    );
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, checkpoint: PathBuf, seeds: Vec<u64>) -> Result<()> {
    let seeds = if seeds.is_empty() {
        cfg.eval.support_seeds.clone()
    } else {
        seeds
    };
    let ds = load_dataset(&cfg.dataset)?;
    let dir = RunDir::create(&cfg.output_dir)?;
    let ck = load_checkpoint(&checkpoint)?;
    let out = pipeline::evaluate(cfg, &ds, &ck, &seeds)?;
    let tag = format!("eval_{}", ck.manifest.stage);
    let files = pipeline::write_eval_reports(&dir, &tag, &out)?;
    let table = render_table(&out.summary, class_name);
    let table_path = dir.reports().join(format!("{tag}_summary.txt"));
    fs::write(&table_path, &table)?;
    record(
        &dir,
        cfg,
        "evaluate",
        json!({ "checkpoint": checkpoint, "seeds": seeds, "reports": files }),
    )?;
    println!("{table}");
    Ok(())
}

const PALETTE: [[u8; 3]; 6] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
];

/// Copy of `image` with a one-pixel outline per detection.
fn overlay(image: &Image, dets: &[Detection]) -> Result<Image> {
    let (w, h) = (image.width(), image.height());
    let mut px = image.rgb8().to_vec();
    for d in dets {
        let b = d.bbox.to_xyxy();
        let color = PALETTE[d.class_id.index() % PALETTE.len()];
        let clamp = |v: f64, n: usize| ((v * n as f64).round() as isize).clamp(0, n as isize - 1) as usize;
        let (x0, y0, x1, y1) = (clamp(b.x0, w), clamp(b.y0, h), clamp(b.x1, w), clamp(b.y1, h));
        let mut put = |x: usize, y: usize| px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
        for x in x0..=x1 {
            put(x, y0);
            put(x, y1);
        }
        for y in y0..=y1 {
            put(x0, y);
            put(x1, y);
        }
    }
    Ok(Image::from_rgb8(w, h, px)?)
}

fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: PathBuf,
    image: PathBuf,
    supports: Option<PathBuf>,
    classes: Vec<String>,
    threshold: f64,
) -> Result<()> {
    let ck = load_checkpoint(&checkpoint)?;
    let ds = load_dataset(supports.as_deref().unwrap_or(&cfg.dataset))?;
    let seed = ck.manifest.support_seed.unwrap_or(cfg.train.support_seed);
    let k = ck.manifest.k_shot.unwrap_or(cfg.train.k_shot);
    let set = corrdet::data::build_finetune_set(&ds, k, seed, true)?;
    let classes: Vec<ClassId> = if classes.is_empty() {
        ds.split.all()
    } else {
        classes
            .iter()
            .map(|n| class_by_name(n).with_context(|| format!("unknown class {n:?}")))
            .collect::<Result<_>>()?
    };
    let det = ck.detector();
    let wanted: BTreeMap<_, _> = classes
        .iter()
        .map(|c| {
            set.per_class
                .get(c)
                .map(|v| (*c, v.clone()))
                .ok_or(corrdet::Error::MissingClassSupport(*c))
        })
        .collect::<corrdet::Result<_>>()?;
    let cache = precompute_prototypes(&det, &wanted)?;
    let img = read_png(&image)?;
    let dets = detect(&det, &img, &cache, &classes, ck.manifest.episode_classes, threshold)?;

    let dir = RunDir::create(&cfg.output_dir)?;
    let pred_dir = dir.root.join("predictions");
    fs::create_dir_all(&pred_dir)?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let csv_path = pred_dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["class", "score", "x0", "y0", "x1", "y1"])?;
    for d in &dets {
        let b = d.bbox.to_xyxy();
        let (pw, ph) = (img.width() as f64, img.height() as f64);
        w.write_record(&[
            class_name(d.class_id),
            format!("{:.6}", d.score),
            format!("{:.2}", (b.x0 * pw).clamp(0.0, pw)),
            format!("{:.2}", (b.y0 * ph).clamp(0.0, ph)),
            format!("{:.2}", (b.x1 * pw).clamp(0.0, pw)),
            format!("{:.2}", (b.y1 * ph).clamp(0.0, ph)),
        ])?;
    }
    w.flush()?;
    let png_path = pred_dir.join(format!("{stem}_overlay.png"));
    write_png(&png_path, &overlay(&img, &dets)?)?;
    record(
        &dir,
        cfg,
        "predict",
        json!({
            "checkpoint": checkpoint,
            "image": image,
            "threshold": threshold,
            "k_shot": k,
            "support_seed": seed,
            "detections": dets.len(),
        }),
    )?;
    println!("{} detections -> {}", dets.len(), csv_path.display());
    Ok(())
}

fn parse_flags(v: &str) -> Result<corrdet::cam::CamFlags> {
    let b: Vec<bool> = v
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => bail!("cam flag masks use 0/1, got {v:?}"),
        })
        .collect::<Result<_>>()?;
    if b.len() != 3 {
        bail!("cam flag masks have three digits (sigmoid, multiply, background), got {v:?}");
    }
    Ok(corrdet::cam::CamFlags {
        apply_sigmoid: b[0],
        query_multiply: b[1],
        model_background: b[2],
    })
}

fn cmd_sweep(cfg: &RunConfig, base: PathBuf, axis: Axis, values: Vec<String>, seeds: Vec<u64>) -> Result<()> {
    let values = if values.is_empty() { axis.defaults() } else { values };
    let seeds = if seeds.is_empty() {
        cfg.eval.support_seeds.clone()
    } else {
        seeds
    };
    let ds = load_dataset(&cfg.dataset)?;
    let dir = RunDir::create(&cfg.output_dir)?;
    let base_ck = load_checkpoint(&base)?;
    base_ck.expect_stage(Stage::Base)?;
    let path = dir.reports().join(format!("sweep_{}.csv", axis.name()));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "axis",
        "value",
        "novel_map",
        "novel_std",
        "base_map",
        "base_std",
        "confusion",
        "seeds",
    ])?;
    let seed_list = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
    let mut rows = Vec::new();
    for v in &values {
        let mut c = cfg.clone();
        c.model = base_ck.manifest.model.clone();
        let ck = match axis {
            Axis::C => {
                c.train.episode_classes = v.parse().with_context(|| format!("C value {v:?}"))?;
                base_ck.clone()
            }
            Axis::CamFlags => {
                c.model.cam = parse_flags(v)?;
                let mut ck = base_ck.clone();
                ck.manifest.model.cam = c.model.cam;
                ck
            }
            Axis::CamPlacement => {
                // Placement changes which layers exist, so the base stage reruns.
                c.model.cam_placement = v.parse().with_context(|| format!("placement value {v:?}"))?;
                c.validate()?;
                log::info!("training base model with cam_placement {v}");
                pipeline::train_base(&c, &ds, None, None)?.checkpoint
            }
        };
        c.validate()?;
        let out = pipeline::finetune_and_evaluate(&c, &ds, &ck, &seeds)?;
        let s = &out.summary;
        let conf: usize = out.confusion.iter().map(|p| p.cross()).sum();
        w.write_record(&[
            axis.name().to_string(),
            v.clone(),
            format!("{:.6}", s.novel.mean),
            format!("{:.6}", s.novel.std),
            format!("{:.6}", s.base.mean),
            format!("{:.6}", s.base.std),
            conf.to_string(),
            seed_list.clone(),
        ])?;
        w.flush()?;
        rows.push(format!(
            "{:<14} {:>8} {:>8.4} ± {:<8.4} {:>8.4} ± {:<8.4} {:>6}",
            axis.name(),
            v,
            s.novel.mean,
            s.novel.std,
            s.base.mean,
            s.base.std,
            conf
        ));
    }
    record(
        &dir,
        cfg,
        "sweep",
        json!({ "base_checkpoint": base, "axis": axis.name(), "values": values, "seeds": seeds, "report": path }),
    )?;
    println!(
        "{:<14} {:>8} {:>19} {:>19} {:>6}",
        "axis", "value", "novel mAP", "base mAP", "conf"
    );
    for r in rows {
        println!("{r}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenerateData { out } => cmd_generate_data(&cfg, out),
        Command::TrainBase { resume } => cmd_train_base(&cfg, resume),
        Command::Finetune { base, k, support_seed } => cmd_finetune(cfg, base, k, support_seed),
        Command::Evaluate { checkpoint, seeds } => cmd_evaluate(&cfg, checkpoint, seeds),
        Command::Predict {
            checkpoint,
            image,
            supports,
            classes,
            threshold,
        } => cmd_predict(&cfg, checkpoint, image, supports, classes, threshold),
        Command::Sweep {
            base,
            axis,
            values,
            seeds,
        } => cmd_sweep(&cfg, base, axis, values, seeds),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! End-to-end drivers shared by the command line and the tests: base
//! training, fine-tuning, and evaluation over the test pool.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use corrdet_tensor::par;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointManifest};
use crate::config::RunConfig;
use crate::data::{build_finetune_set, class_by_name, EpisodeSampler, FewShotDataset, KShotSupportSet, Stage};
use crate::detector::{detect, precompute_prototypes, Detector, StepReport, Trainer};
use crate::error::{Error, Result};
use crate::eval::{confusion_pairs, evaluate_map, multi_run_report, APReport, MultiRunReport, PairConfusion};
use crate::types::{ClassId, Detection, Episode};

/// Output layout of one run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let d = Self { root: root.into() };
        for p in [d.checkpoints(), d.logs(), d.reports()] {
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(d)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LossRow {
    step: u64,
    loss_total: f64,
    loss_cls: f64,
    loss_l1: f64,
    loss_giou: f64,
    loss_proto: f64,
}

impl From<&StepReport> for LossRow {
    fn from(r: &StepReport) -> Self {
        Self {
            step: r.step,
            loss_total: r.terms.total,
            loss_cls: r.terms.cls,
            loss_l1: r.terms.l1,
            loss_giou: r.terms.giou,
            loss_proto: r.terms.proto,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        what: "csv",
        detail: format!("{}: {e}", path.display()),
    }
}

/// Per-step loss log. On resume, rows past the resumed step are dropped so
/// the file matches an uninterrupted run.
struct LossLog {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl LossLog {
    fn open(path: PathBuf, keep_through: u64) -> Result<Self> {
        let mut kept = Vec::new();
        if keep_through > 0 && path.exists() {
            let mut r = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
            for row in r.deserialize::<LossRow>() {
                let row = row.map_err(|e| csv_err(&path, e))?;
                if row.step <= keep_through {
                    kept.push(row);
                }
            }
        }
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut log = Self {
            writer: csv::Writer::from_writer(f),
            path,
        };
        log.writer
            .write_record(["step", "loss_total", "loss_cls", "loss_l1", "loss_giou", "loss_proto"])
            .map_err(|e| csv_err(&log.path, e))?;
        for row in &kept {
            log.write(row)?;
        }
        log.flush()?;
        Ok(log)
    }

    fn write(&mut self, row: &LossRow) -> Result<()> {
        self.writer
            .write_record(&[
                row.step.to_string(),
                row.loss_total.to_string(),
                row.loss_cls.to_string(),
                row.loss_l1.to_string(),
                row.loss_giou.to_string(),
                row.loss_proto.to_string(),
            ])
            .map_err(|e| csv_err(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Episode randomness for a given step, independent of earlier steps so a
/// resumed run draws the same episodes.
pub fn episode_rng(seed: u64, stage: Stage, step: u64) -> ChaCha8Rng {
    let tag = match stage {
        Stage::Base => 0x6261_7365,
        Stage::Finetune => 0x6674_756e,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag);
    rng.set_stream(step);
    rng
}

/// The batch of episodes used at `step` (0-based).
pub fn sample_batch(cfg: &RunConfig, sampler: &EpisodeSampler, step: u64) -> Result<Vec<Episode>> {
    let c = cfg.train.episode_classes.min(sampler.scope().len());
    let mut rng = episode_rng(cfg.seed, sampler.stage, step);
    (0..cfg.optim.batch_episodes)
        .map(|_| sampler.sample(c, cfg.train.episode_shots, &mut rng))
        .collect()
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Reports for the steps run in this call.
    pub reports: Vec<StepReport>,
}

struct StageRun<'a> {
    cfg: &'a RunConfig,
    sampler: EpisodeSampler,
    total_steps: u64,
    manifest: CheckpointManifest,
    dir: Option<&'a RunDir>,
    log_name: &'static str,
}

const EMA_DECAY: f64 = 0.98;

impl StageRun<'_> {
    fn checkpoint(&self, trainer: &Trainer) -> Checkpoint {
        Checkpoint {
            manifest: CheckpointManifest {
                step: trainer.step(),
                ..self.manifest.clone()
            },
            params: trainer.detector.params.clone(),
            optimizer: Some(trainer.opt.clone()),
        }
    }

    fn run(self, mut trainer: Trainer) -> Result<TrainOutcome> {
        let stage = self.sampler.stage;
        let start = trainer.step();
        let mut log = match self.dir {
            Some(d) => Some(LossLog::open(d.logs().join(self.log_name), start)?),
            None => None,
        };
        let every = self.cfg.train.checkpoint_every.max(1);
        let mut ema: Option<f64> = None;
        let mut best = f64::INFINITY;
        let mut reports = Vec::new();
        for step in start..self.total_steps {
            let batch = sample_batch(self.cfg, &self.sampler, step)?;
            let r = trainer.train_step(&batch, self.total_steps)?;
            ema = Some(match ema {
                Some(e) => EMA_DECAY * e + (1.0 - EMA_DECAY) * r.terms.total,
                None => r.terms.total,
            });
            if let Some(l) = log.as_mut() {
                l.write(&LossRow::from(&r))?;
            }
            if self.cfg.train.log_every > 0 && r.step % self.cfg.train.log_every == 0 {
                log::info!(
                    "{stage} step {}/{} loss {:.4} (cls {:.4} l1 {:.4} giou {:.4} proto {:.4}) |g| {:.3} lr {:.1e}",
                    r.step,
                    self.total_steps,
                    r.terms.total,
                    r.terms.cls,
                    r.terms.l1,
                    r.terms.giou,
                    r.terms.proto,
                    r.grad_norm,
                    r.lr
                );
            }
            reports.push(r);
            let last = r.step == self.total_steps;
            if let Some(d) = self.dir {
                if r.step % every == 0 || last {
                    if let Some(l) = log.as_mut() {
                        l.flush()?;
                    }
                    let ck = self.checkpoint(&trainer);
                    ck.save(&d.checkpoints().join(format!("{stage}_last.ckpt")))?;
                    let e = ema.unwrap_or(f64::INFINITY);
                    if e < best {
                        best = e;
                        ck.save(&d.checkpoints().join(format!("{stage}_best.ckpt")))?;
                    }
                }
            }
        }
        if let Some(l) = log.as_mut() {
            l.flush()?;
        }
        let checkpoint = self.checkpoint(&trainer);
        if let Some(d) = self.dir {
            checkpoint.save(&d.checkpoints().join(format!("{stage}_final.ckpt")))?;
        }
        Ok(TrainOutcome { checkpoint, reports })
    }
}

fn restore_trainer(cfg: &RunConfig, ck: &Checkpoint) -> Trainer {
    let mut t = Trainer::new(ck.detector(), cfg.loss, cfg.optim.clone());
    if let Some(opt) = &ck.optimizer {
        t.opt = opt.clone();
        t.opt.weight_decay = cfg.optim.weight_decay;
    }
    t
}

/// Base training from scratch, or continued from `resume`.
pub fn train_base(
    cfg: &RunConfig,
    ds: &FewShotDataset,
    dir: Option<&RunDir>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let trainer = match resume {
        Some(ck) => {
            ck.expect_stage(Stage::Base)?;
            restore_trainer(cfg, ck)
        }
        None => Trainer::new(
            Detector::new(cfg.model.clone(), ds.num_classes(), cfg.seed)?,
            cfg.loss,
            cfg.optim.clone(),
        ),
    };
    let manifest = CheckpointManifest {
        stage: Stage::Base,
        model: trainer.detector.config.clone(),
        num_dataset_classes: ds.num_classes(),
        split: ds.split.clone(),
        episode_classes: cfg.train.episode_classes,
        step: 0,
        config_sha256: cfg.sha256(),
        k_shot: None,
        support_seed: None,
        support_manifest: None,
    };
    StageRun {
        cfg,
        sampler: EpisodeSampler::base(ds),
        total_steps: cfg.train.base_steps,
        manifest,
        dir,
        log_name: "base_loss.csv",
    }
    .run(trainer)
}

/// Fine-tunes a base checkpoint on the K-shot set drawn with
/// `cfg.train.support_seed`. Optimizer state starts fresh.
pub fn finetune(cfg: &RunConfig, ds: &FewShotDataset, base: &Checkpoint, dir: Option<&RunDir>) -> Result<TrainOutcome> {
    cfg.validate()?;
    base.expect_stage(Stage::Base)?;
    let set = build_finetune_set(ds, cfg.train.k_shot, cfg.train.support_seed, cfg.train.balanced_base)?;
    let trainer = Trainer::new(base.detector(), cfg.loss, cfg.optim.clone());
    let manifest = CheckpointManifest {
        stage: Stage::Finetune,
        step: 0,
        config_sha256: cfg.sha256(),
        episode_classes: cfg.train.episode_classes,
        k_shot: Some(set.k),
        support_seed: Some(set.seed),
        support_manifest: Some(set.manifest()),
        ..base.manifest.clone()
    };
    StageRun {
        cfg,
        sampler: EpisodeSampler::finetune(&set),
        total_steps: cfg.train.finetune_steps,
        manifest,
        dir,
        log_name: "finetune_loss.csv",
    }
    .run(trainer)
}

/// Resolves configured class-name pairs.
pub fn confusion_class_pairs(cfg: &RunConfig) -> Result<Vec<(ClassId, ClassId)>> {
    cfg.eval
        .confusion_pairs
        .iter()
        .map(|(a, b)| {
            let get = |n: &str| class_by_name(n).ok_or_else(|| Error::Config(format!("unknown class name {n:?}")));
            Ok((get(a)?, get(b)?))
        })
        .collect()
}

/// Results for one support set.
#[derive(Clone, Debug)]
pub struct SeedEval {
    pub report: APReport,
    pub confusion: Vec<PairConfusion>,
    pub detections: Vec<Vec<Detection>>,
}

/// Runs the detector over the whole test pool with prototypes from `set`,
/// which must cover every dataset class.
pub fn evaluate_with_supports(
    cfg: &RunConfig,
    ds: &FewShotDataset,
    det: &Detector,
    chunk: usize,
    set: &KShotSupportSet,
) -> Result<SeedEval> {
    let cache = precompute_prototypes(det, &set.per_class)?;
    let classes: Vec<ClassId> = ds.split.all();
    let threshold = cfg.eval.score_threshold;
    let detections = par::map(&ds.test, |li| {
        detect(det, &li.image, &cache, &classes, chunk, threshold)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let gt: Vec<_> = ds.test.iter().map(|li| li.annotations.clone()).collect();
    let report = evaluate_map(&detections, &gt, &classes, &ds.split, cfg.eval.iou_threshold, set.seed)?;
    let confusion = confusion_pairs(&detections, &gt, &confusion_class_pairs(cfg)?);
    Ok(SeedEval {
        report,
        confusion,
        detections,
    })
}

/// Evaluation support set for `seed`: `k_shot` examples of every class.
pub fn eval_support_set(cfg: &RunConfig, ds: &FewShotDataset, seed: u64) -> Result<KShotSupportSet> {
    build_finetune_set(ds, cfg.train.k_shot, seed, true)
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub runs: Vec<SeedEval>,
    pub summary: MultiRunReport,
    /// Confusion counts summed over runs.
    pub confusion: Vec<PairConfusion>,
}

pub fn summarize(runs: Vec<SeedEval>) -> Result<EvalOutcome> {
    if runs.is_empty() {
        return Err(Error::Config("at least one support seed is required".into()));
    }
    let summary = multi_run_report(&runs.iter().map(|r| r.report.clone()).collect::<Vec<_>>())?;
    let mut confusion: Vec<PairConfusion> = runs[0]
        .confusion
        .iter()
        .map(|p| PairConfusion {
            x: p.x,
            y: p.y,
            ..Default::default()
        })
        .collect();
    for r in &runs {
        for (acc, p) in confusion.iter_mut().zip(&r.confusion) {
            acc.add(p);
        }
    }
    Ok(EvalOutcome {
        runs,
        summary,
        confusion,
    })
}

/// Evaluates one checkpoint once per support seed.
pub fn evaluate(cfg: &RunConfig, ds: &FewShotDataset, ck: &Checkpoint, seeds: &[u64]) -> Result<EvalOutcome> {
    if ck.manifest.num_dataset_classes != ds.num_classes() {
        return Err(Error::shape(
            "dataset classes",
            ck.manifest.num_dataset_classes,
            ds.num_classes(),
        ));
    }
    let det = ck.detector();
    let runs = seeds
        .iter()
        .map(|&seed| {
            evaluate_with_supports(
                cfg,
                ds,
                &det,
                ck.manifest.episode_classes,
                &eval_support_set(cfg, ds, seed)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    summarize(runs)
}

/// Writes per-seed, summary and confusion CSVs under `dir/reports`.
pub fn write_eval_reports(dir: &RunDir, tag: &str, out: &EvalOutcome) -> Result<Vec<PathBuf>> {
    use crate::data::class_name;
    use crate::eval::{write_confusion_csv, write_multi_run_csv, write_report_csv};
    let name = class_name;
    let mut written = Vec::new();
    for r in &out.runs {
        let p = dir.reports().join(format!("{tag}_seed{}.csv", r.report.seed));
        write_report_csv(&p, &r.report, name)?;
        written.push(p);
    }
    let p = dir.reports().join(format!("{tag}_summary.csv"));
    write_multi_run_csv(&p, &out.summary, name)?;
    written.push(p);
    let p = dir.reports().join(format!("{tag}_confusion.csv"));
    write_confusion_csv(&p, &out.confusion, name)?;
    written.push(p);
    Ok(written)
}

/// Per-class support image ids, for run manifests.
pub fn support_ids(set: &KShotSupportSet) -> BTreeMap<ClassId, Vec<u64>> {
    set.manifest()
}

/// Multi-run protocol: for every seed, fine-tune `base` on that seed's
/// K-shot set and evaluate with the same supports.
pub fn finetune_and_evaluate(
    cfg: &RunConfig,
    ds: &FewShotDataset,
    base: &Checkpoint,
    seeds: &[u64],
) -> Result<EvalOutcome> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut c = cfg.clone();
        c.train.support_seed = seed;
        let ft = finetune(&c, ds, base, None)?;
        let set = eval_support_set(&c, ds, seed)?;
        let det = ft.checkpoint.detector();
        runs.push(evaluate_with_supports(&c, ds, &det, c.train.episode_classes, &set)?);
        log::info!(
            "seed {seed}: novel mAP {:.4} base mAP {:.4}",
            runs.last().map_or(0.0, |r| r.report.novel_map),
            runs.last().map_or(0.0, |r| r.report.base_map)
        );
    }
    summarize(runs)
}

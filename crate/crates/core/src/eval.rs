//! Detection metrics: all-points AP at a single IoU threshold, pair
//! confusion counts, and multi-run aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::types::{Annotation, ClassId, ClassSplit, Detection};

/// Per-class AP plus novel/base means. Classes without ground truth are
/// left out of both the table and the means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub per_class: BTreeMap<ClassId, f64>,
    pub novel_map: f64,
    pub base_map: f64,
    pub seed: u64,
}

/// All-points interpolated AP of score-sorted hits against `n_gt` objects.
pub fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

/// Score-ordered greedy matching for one class. Returns one hit flag per
/// detection in descending score order (ties keep image order) and the
/// ground-truth count.
pub fn match_class(
    detections: &[Vec<Detection>],
    gt: &[Vec<Annotation>],
    class: ClassId,
    iou_threshold: f64,
) -> (Vec<bool>, usize) {
    let mut dets: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(|d| d.class_id == class).map(move |d| (i, d)))
        .collect();
    dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let gts: Vec<Vec<&Annotation>> = gt
        .iter()
        .map(|g| g.iter().filter(|a| a.class_id == class).collect())
        .collect();
    let n_gt = gts.iter().map(Vec::len).sum();
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let hits = dets
        .iter()
        .map(|(img, d)| {
            let db = d.bbox.to_xyxy();
            let best = gts[*img]
                .iter()
                .enumerate()
                .filter(|(j, _)| !taken[*img][*j])
                .map(|(j, a)| (j, iou(&db, &a.bbox.to_xyxy())))
                .filter(|(_, v)| *v >= iou_threshold)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((j, _)) => {
                    taken[*img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (hits, n_gt)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// AP per class over a set of images. `detections[i]` and `gt[i]` belong to
/// the same image.
pub fn evaluate_map(
    detections: &[Vec<Detection>],
    gt: &[Vec<Annotation>],
    classes: &[ClassId],
    split: &ClassSplit,
    iou_threshold: f64,
    seed: u64,
) -> Result<APReport> {
    if detections.len() != gt.len() {
        return Err(Error::shape("images with detections", gt.len(), detections.len()));
    }
    let mut per_class = BTreeMap::new();
    for &c in classes {
        let (hits, n_gt) = match_class(detections, gt, c, iou_threshold);
        if n_gt > 0 {
            per_class.insert(c, average_precision(&hits, n_gt));
        }
    }
    let pick = |novel: bool| {
        mean(
            per_class
                .iter()
                .filter(|(c, _)| split.is_novel(**c) == novel)
                .map(|(_, v)| *v),
        )
    };
    Ok(APReport {
        novel_map: pick(true),
        base_map: pick(false),
        per_class,
        seed,
    })
}

/// Outcome counts for a class pair `(x, y)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairConfusion {
    pub x: ClassId,
    pub y: ClassId,
    pub x_as_x: usize,
    pub x_as_y: usize,
    pub x_as_other: usize,
    pub x_missed: usize,
    pub y_as_y: usize,
    pub y_as_x: usize,
    pub y_as_other: usize,
    pub y_missed: usize,
}

impl PairConfusion {
    /// Cross-class confusions in both directions.
    pub fn cross(&self) -> usize {
        self.x_as_y + self.y_as_x
    }

    pub fn add(&mut self, o: &PairConfusion) {
        self.x_as_x += o.x_as_x;
        self.x_as_y += o.x_as_y;
        self.x_as_other += o.x_as_other;
        self.x_missed += o.x_missed;
        self.y_as_y += o.y_as_y;
        self.y_as_x += o.y_as_x;
        self.y_as_other += o.y_as_other;
        self.y_missed += o.y_missed;
    }
}

/// Matches every ground-truth object of either class to its best-IoU
/// detection (at least 0.5, any class) and tallies the predicted label.
pub fn confusion_pairs(
    detections: &[Vec<Detection>],
    gt: &[Vec<Annotation>],
    pairs: &[(ClassId, ClassId)],
) -> Vec<PairConfusion> {
    pairs
        .iter()
        .map(|&(x, y)| {
            let mut pc = PairConfusion {
                x,
                y,
                ..Default::default()
            };
            for (ds, gs) in detections.iter().zip(gt) {
                for a in gs.iter().filter(|a| a.class_id == x || a.class_id == y) {
                    let ab = a.bbox.to_xyxy();
                    let best = ds
                        .iter()
                        .map(|d| (d, iou(&ab, &d.bbox.to_xyxy())))
                        .filter(|(_, v)| *v >= 0.5)
                        .max_by(|a, b| a.1.total_cmp(&b.1).then(a.0.score.total_cmp(&b.0.score)));
                    let pred = best.map(|(d, _)| d.class_id);
                    let is_x = a.class_id == x;
                    let slot = match (is_x, pred) {
                        (_, None) if is_x => &mut pc.x_missed,
                        (_, None) => &mut pc.y_missed,
                        (true, Some(p)) if p == x => &mut pc.x_as_x,
                        (true, Some(p)) if p == y => &mut pc.x_as_y,
                        (true, Some(_)) => &mut pc.x_as_other,
                        (false, Some(p)) if p == y => &mut pc.y_as_y,
                        (false, Some(p)) if p == x => &mut pc.y_as_x,
                        (false, Some(_)) => &mut pc.y_as_other,
                    };
                    *slot += 1;
                }
            }
            pc
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (`n − 1`); a single value has
/// deviation 0.
pub fn mean_std(v: &[f64]) -> MeanStd {
    let m = mean(v.iter().copied());
    let std = if v.len() < 2 {
        0.0
    } else {
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    MeanStd { mean: m, std }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiRunReport {
    pub per_class: BTreeMap<ClassId, MeanStd>,
    pub novel: MeanStd,
    pub base: MeanStd,
    pub seeds: Vec<u64>,
}

pub fn multi_run_report(runs: &[APReport]) -> Result<MultiRunReport> {
    if runs.is_empty() {
        return Err(Error::Config("multi-run report needs at least one run".into()));
    }
    let mut cells: BTreeMap<ClassId, Vec<f64>> = BTreeMap::new();
    for r in runs {
        for (c, v) in &r.per_class {
            cells.entry(*c).or_default().push(*v);
        }
    }
    let novel: Vec<f64> = runs.iter().map(|r| r.novel_map).collect();
    let base: Vec<f64> = runs.iter().map(|r| r.base_map).collect();
    Ok(MultiRunReport {
        per_class: cells.into_iter().map(|(c, v)| (c, mean_std(&v))).collect(),
        novel: mean_std(&novel),
        base: mean_std(&base),
        seeds: runs.iter().map(|r| r.seed).collect(),
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            what: "csv",
            detail: format!("{other:?}"),
        },
    }
}

/// One row per class plus `novel_mean` and `base_mean` rows.
pub fn write_report_csv(path: &Path, r: &APReport, name: impl Fn(ClassId) -> String) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut row = |a: &str, b: String, c: String| w.write_record([a, &b, &c]).map_err(|e| csv_err(path, e));
    row("class", "ap50".into(), "seed".into())?;
    for (c, v) in &r.per_class {
        row(&name(*c), format!("{v:.6}"), r.seed.to_string())?;
    }
    row("novel_mean", format!("{:.6}", r.novel_map), r.seed.to_string())?;
    row("base_mean", format!("{:.6}", r.base_map), r.seed.to_string())?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_multi_run_csv(path: &Path, r: &MultiRunReport, name: impl Fn(ClassId) -> String) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["class", "ap50_mean", "ap50_std", "runs"])
        .map_err(|e| csv_err(path, e))?;
    let n = r.seeds.len().to_string();
    let mut emit = |label: String, m: &MeanStd| {
        w.write_record([label, format!("{:.6}", m.mean), format!("{:.6}", m.std), n.clone()])
            .map_err(|e| csv_err(path, e))
    };
    for (c, m) in &r.per_class {
        emit(name(*c), m)?;
    }
    emit("novel_mean".into(), &r.novel)?;
    emit("base_mean".into(), &r.base)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_confusion_csv(path: &Path, pcs: &[PairConfusion], name: impl Fn(ClassId) -> String) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["gt", "pred_x", "pred_y", "pred_other", "missed", "x", "y"])
        .map_err(|e| csv_err(path, e))?;
    for p in pcs {
        let (x, y) = (name(p.x), name(p.y));
        for (gt, a, b, o, m) in [
            (&x, p.x_as_x, p.x_as_y, p.x_as_other, p.x_missed),
            (&y, p.y_as_x, p.y_as_y, p.y_as_other, p.y_missed),
        ] {
            w.write_record([
                gt.clone(),
                a.to_string(),
                b.to_string(),
                o.to_string(),
                m.to_string(),
                x.clone(),
                y.clone(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Plain-text table of a multi-run report.
pub fn render_table(r: &MultiRunReport, name: impl Fn(ClassId) -> String) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<18} {:>9} {:>9}", "class", "AP50", "std");
    for (c, m) in &r.per_class {
        let _ = writeln!(s, "{:<18} {:>9.4} {:>9.4}", name(*c), m.mean, m.std);
    }
    let _ = writeln!(s, "{:<18} {:>9.4} {:>9.4}", "novel mean", r.novel.mean, r.novel.std);
    let _ = writeln!(s, "{:<18} {:>9.4} {:>9.4}", "base mean", r.base.mean, r.base.std);
    let _ = writeln!(s, "runs: {} (seeds {:?})", r.seeds.len(), r.seeds);
    s
}

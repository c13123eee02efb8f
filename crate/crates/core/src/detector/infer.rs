use std::collections::BTreeMap;

use corrdet_tensor::{sigmoid, Graph, Session, Tensor};

use super::{Detector, PredictionSet};
use crate::error::{Error, Result};
use crate::targetgen::{build_encoding_map, unmap_predictions, ChiMap, RawPrediction};
use crate::types::{BBox, ClassId, Detection, Image, SupportExample};

pub const DEFAULT_THRESHOLD: f64 = 0.25;

/// Per-class prototypes computed once and reused for every query.
#[derive(Clone, Debug, Default)]
pub struct PrototypeCache {
    protos: BTreeMap<ClassId, Tensor>,
}

impl PrototypeCache {
    pub fn get(&self, c: ClassId) -> Result<&Tensor> {
        self.protos.get(&c).ok_or(Error::MissingClassSupport(c))
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.protos.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }
}

fn class_prototype_value(det: &Detector, shots: &[SupportExample]) -> Result<Tensor> {
    let g = Graph::new();
    let s = Session::frozen(&g, &det.params);
    Ok((*det.class_prototype(&s, shots)?.value()).clone())
}

pub fn precompute_prototypes(
    det: &Detector,
    supports: &BTreeMap<ClassId, Vec<SupportExample>>,
) -> Result<PrototypeCache> {
    let mut protos = BTreeMap::new();
    for (&c, shots) in supports {
        if shots.is_empty() {
            return Err(Error::MissingClassSupport(c));
        }
        protos.insert(c, class_prototype_value(det, shots)?);
    }
    Ok(PrototypeCache { protos })
}

/// Predictions for one query given stacked `[C, d]` prototype values, whose
/// rows follow `chi`'s class order.
pub fn predict_chunk(det: &Detector, image: &Image, protos: &Tensor, chi: &ChiMap) -> Result<PredictionSet> {
    let positions: Vec<usize> = (1..=chi.len()).collect();
    let encodings = det.encodings_for(&positions)?;
    let g = Graph::new();
    let s = Session::frozen(&g, &det.params);
    let layers = det.forward(&s, image, s.constant(protos.clone()), &encodings)?;
    Ok(PredictionSet::from_vars(&layers))
}

fn decode(p: &PredictionSet, chi: &ChiMap, report: &[bool], threshold: f64) -> Result<Vec<Detection>> {
    let (logits, boxes) = p.last();
    let mut raw = Vec::new();
    for j in 0..logits.rows() {
        let b = boxes.row(j);
        for k in 0..logits.cols() {
            let score = sigmoid(logits.at(j, k));
            if report[k] && score > threshold {
                raw.push(RawPrediction {
                    encoding: k + 1,
                    score,
                    bbox: BBox {
                        cx: b[0],
                        cy: b[1],
                        w: b[2],
                        h: b[3],
                    },
                });
            }
        }
    }
    unmap_predictions(&raw, chi)
}

/// Splits `classes` into forward passes of `chunk` classes. The last pass
/// is padded with classes already covered so every pass sees `chunk`
/// supports; padded classes are not reported twice.
fn chunks(classes: &[ClassId], chunk: usize) -> Vec<(Vec<ClassId>, Vec<bool>)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < classes.len() {
        let end = (start + chunk).min(classes.len());
        let mut ids = classes[start..end].to_vec();
        let mut report = vec![true; ids.len()];
        let mut fill = 0;
        while ids.len() < chunk && fill < start {
            ids.push(classes[fill]);
            report.push(false);
            fill += 1;
        }
        out.push((ids, report));
        start = end;
    }
    out
}

fn detect_with<F>(
    det: &Detector,
    image: &Image,
    classes: &[ClassId],
    chunk: usize,
    threshold: f64,
    proto_of: F,
) -> Result<Vec<Detection>>
where
    F: Fn(ClassId) -> Result<Tensor>,
{
    let chunk = det.config.chunk_classes(chunk);
    let mut all = Vec::new();
    for (ids, report) in chunks(classes, chunk) {
        let rows = ids.iter().map(|&c| proto_of(c)).collect::<Result<Vec<_>>>()?;
        let d = det.config.d;
        let protos = Tensor::from_vec(&[rows.len(), d], rows.iter().flat_map(|r| r.data().to_vec()).collect());
        let chi = build_encoding_map(&ids)?;
        let p = predict_chunk(det, image, &protos, &chi)?;
        all.extend(decode(&p, &chi, &report, threshold)?);
    }
    Ok(all)
}

/// Detections for `classes` using cached prototypes, `chunk` classes per
/// forward pass. No suppression is applied.
pub fn detect(
    det: &Detector,
    image: &Image,
    cache: &PrototypeCache,
    classes: &[ClassId],
    chunk: usize,
    threshold: f64,
) -> Result<Vec<Detection>> {
    detect_with(det, image, classes, chunk, threshold, |c| cache.get(c).cloned())
}

/// Same as [`detect`] but rebuilds every prototype from the supports.
pub fn detect_recompute(
    det: &Detector,
    image: &Image,
    supports: &BTreeMap<ClassId, Vec<SupportExample>>,
    classes: &[ClassId],
    chunk: usize,
    threshold: f64,
) -> Result<Vec<Detection>> {
    detect_with(det, image, classes, chunk, threshold, |c| {
        let shots = supports
            .get(&c)
            .filter(|s| !s.is_empty())
            .ok_or(Error::MissingClassSupport(c))?;
        class_prototype_value(det, shots)
    })
}

//! Set-prediction loss terms and the prototype classification loss.

use corrdet_tensor::{sigmoid, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::giou;
use crate::matcher::Assignment;
use crate::targetgen::DetectionTargets;
use crate::types::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_l1: f64,
    pub w_giou: f64,
    pub w_proto: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub proto_temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cls: 2.0,
            w_l1: 5.0,
            w_giou: 2.0,
            w_proto: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            proto_temperature: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.w_cls, self.w_l1, self.w_giou, self.w_proto];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config("focal_alpha must lie in [0, 1]".into()));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::Config("focal_gamma must be non-negative".into()));
        }
        if !(self.proto_temperature > 0.0 && self.proto_temperature.is_finite()) {
            return Err(Error::Config("proto_temperature must be positive".into()));
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Focal loss of one logit against a positive and a negative target:
/// `(α(1−p)^γ(−log p), (1−α)p^γ(−log(1−p)))`.
pub fn focal_terms(x: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let pos = alpha * (1.0 - p).powf(gamma) * softplus(-x);
    let neg = (1.0 - alpha) * p.powf(gamma) * softplus(x);
    (pos, neg)
}

fn focal_grads(x: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let (log_p, log_q) = (-softplus(-x), -softplus(x));
    let pos = alpha * (1.0 - p).powf(gamma) * (gamma * p * log_p - (1.0 - p));
    let neg = (1.0 - alpha) * p.powf(gamma) * (-gamma * (1.0 - p) * log_q + p);
    (pos, neg)
}

/// Element-wise sigmoid focal loss and its sum. Targets are 0 or 1.
pub fn sigmoid_focal_loss(logits: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> (f64, Tensor) {
    assert_eq!(logits.shape(), targets.shape());
    let per = logits.zip_map(targets, |x, t| {
        let (pos, neg) = focal_terms(x, alpha, gamma);
        t * pos + (1.0 - t) * neg
    });
    (per.sum(), per)
}

/// Summed sigmoid focal loss as a graph node.
pub fn focal_loss_var<'g>(logits: Var<'g>, targets: &Tensor, alpha: f64, gamma: f64) -> Var<'g> {
    let x = logits.value();
    let (total, _) = sigmoid_focal_loss(&x, targets, alpha, gamma);
    let t = targets.clone();
    logits.graph().op(
        Tensor::scalar(total),
        &[logits],
        Box::new(move |g, _| {
            let s = g.item();
            let gx = x.zip_map(&t, |x, t| {
                let (pos, neg) = focal_grads(x, alpha, gamma);
                s * (t * pos + (1.0 - t) * neg)
            });
            vec![Some(gx)]
        }),
    )
}

/// `(Σ|pred − target|, 1 − giou)` for one box pair.
pub fn box_loss(pred: &BBox, target: &BBox) -> (f64, f64) {
    let l1 = pred
        .to_array()
        .iter()
        .zip(target.to_array())
        .map(|(a, b)| (a - b).abs())
        .sum();
    (l1, 1.0 - giou(&pred.to_xyxy(), &target.to_xyxy()))
}

/// Summed L1 distance between `[m, 4]` box rows.
pub fn l1_loss_var<'g>(pred: Var<'g>, target: &Tensor) -> Var<'g> {
    let p = pred.value();
    assert_eq!(p.shape(), target.shape());
    let total = p.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    let t = target.clone();
    pred.graph().op(
        Tensor::scalar(total),
        &[pred],
        Box::new(move |g, _| {
            let s = g.item();
            vec![Some(p.zip_map(&t, |a, b| s * (a - b).signum() * f64::from(a != b)))]
        }),
    )
}

/// GIoU loss of one cxcywh pair with its gradient w.r.t. the prediction.
fn giou_loss_grad(p: &[f64], t: &[f64]) -> (f64, [f64; 4]) {
    use crate::geometry::AREA_EPS;
    let (x0, x1) = (p[0] - 0.5 * p[2], p[0] + 0.5 * p[2]);
    let (y0, y1) = (p[1] - 0.5 * p[3], p[1] + 0.5 * p[3]);
    let (tx0, tx1) = (t[0] - 0.5 * t[2], t[0] + 0.5 * t[2]);
    let (ty0, ty1) = (t[1] - 0.5 * t[3], t[1] + 0.5 * t[3]);

    let iw_raw = x1.min(tx1) - x0.max(tx0);
    let ih_raw = y1.min(ty1) - y0.max(ty0);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let (pw, ph) = ((x1 - x0).max(0.0), (y1 - y0).max(0.0));
    let union = pw * ph + (tx1 - tx0) * (ty1 - ty0) - inter;
    let hw = x1.max(tx1) - x0.min(tx0);
    let hh = y1.max(ty1) - y0.min(ty0);
    let hull = hw * hh;
    let uc = union.max(AREA_EPS);
    let hc = hull.max(AREA_EPS);
    let loss = 2.0 - inter / uc - uc / hc;

    let d_union = if union > AREA_EPS {
        inter / (uc * uc) - 1.0 / hc
    } else {
        0.0
    };
    let d_hull = if hull > AREA_EPS { uc / (hc * hc) } else { 0.0 };
    let d_inter = -1.0 / uc - d_union;
    let d_area = d_union;

    let (d_iw, d_ih) = if iw_raw > 0.0 && ih_raw > 0.0 {
        (d_inter * ih, d_inter * iw)
    } else {
        (0.0, 0.0)
    };
    let (d_hw, d_hh) = (d_hull * hh, d_hull * hw);

    let mut gx0 = 0.0;
    let mut gx1 = 0.0;
    let mut gy0 = 0.0;
    let mut gy1 = 0.0;
    if x1 <= tx1 {
        gx1 += d_iw;
    }
    if x0 >= tx0 {
        gx0 -= d_iw;
    }
    if y1 <= ty1 {
        gy1 += d_ih;
    }
    if y0 >= ty0 {
        gy0 -= d_ih;
    }
    if x1 > tx1 {
        gx1 += d_hw;
    }
    if x0 < tx0 {
        gx0 -= d_hw;
    }
    if y1 > ty1 {
        gy1 += d_hh;
    }
    if y0 < ty0 {
        gy0 -= d_hh;
    }
    let g_w_area = d_area * ph;
    let g_h_area = d_area * pw;
    (
        loss,
        [
            gx0 + gx1,
            gy0 + gy1,
            0.5 * (gx1 - gx0) + g_w_area,
            0.5 * (gy1 - gy0) + g_h_area,
        ],
    )
}

/// Summed `1 − giou` between `[m, 4]` cxcywh rows.
pub fn giou_loss_var<'g>(pred: Var<'g>, target: &Tensor) -> Var<'g> {
    let p = pred.value();
    assert_eq!(p.shape(), target.shape());
    let m = p.rows();
    let mut total = 0.0;
    let mut grad = Tensor::zeros(&[m, 4]);
    for i in 0..m {
        let (l, g) = giou_loss_grad(p.row(i), target.row(i));
        total += l;
        grad.row_mut(i).copy_from_slice(&g);
    }
    pred.graph().op(
        Tensor::scalar(total),
        &[pred],
        Box::new(move |g, _| vec![Some(grad.scale(g.item()))]),
    )
}

/// One decoder layer's predictions for one image: `[N, C]` logits and
/// `[N, 4]` sigmoid boxes.
#[derive(Clone, Copy)]
pub struct LayerOutput<'g> {
    pub logits: Var<'g>,
    pub boxes: Var<'g>,
}

/// Weighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub proto: f64,
}

impl LossTerms {
    pub fn add(&mut self, o: &LossTerms) {
        self.total += o.total;
        self.cls += o.cls;
        self.l1 += o.l1;
        self.giou += o.giou;
        self.proto += o.proto;
    }

    pub fn scaled(&self, s: f64) -> LossTerms {
        LossTerms {
            total: self.total * s,
            cls: self.cls * s,
            l1: self.l1 * s,
            giou: self.giou * s,
            proto: self.proto * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.cls, self.l1, self.giou, self.proto]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Graph nodes for the weighted terms; `l1`/`giou` are `None` when no
/// slot carries an object.
pub struct DetectionLoss<'g> {
    pub total: Var<'g>,
    pub cls: Var<'g>,
    pub l1: Option<Var<'g>>,
    pub giou: Option<Var<'g>>,
}

impl DetectionLoss<'_> {
    pub fn terms(&self) -> LossTerms {
        let v = |x: Option<Var<'_>>| x.map_or(0.0, |x| x.value().item());
        LossTerms {
            total: self.total.value().item(),
            cls: self.cls.value().item(),
            l1: v(self.l1),
            giou: v(self.giou),
            proto: 0.0,
        }
    }
}

/// One-hot classification targets aligned with prediction slots.
pub fn class_targets(targets: &DetectionTargets, a: &Assignment, classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[targets.len(), classes]);
    for (i, slot) in targets.objects() {
        t.set(a.sigma[i], slot.label - 1, 1.0);
    }
    t
}

/// Loss of one image summed over decoder layers, divided by `normalizer`
/// (the batch's object count, clamped at 1 by the caller).
pub fn detection_loss<'g>(
    layers: &[LayerOutput<'g>],
    targets: &DetectionTargets,
    assignments: &[Assignment],
    w: &LossWeights,
    normalizer: f64,
) -> Result<DetectionLoss<'g>> {
    if layers.len() != assignments.len() {
        return Err(Error::shape("assignments per layer", layers.len(), assignments.len()));
    }
    let n = targets.len();
    let objects: Vec<_> = targets.objects().collect();
    let box_target = Tensor::from_rows(&objects.iter().map(|(_, s)| s.bbox.to_array()).collect::<Vec<_>>());
    let scale = 1.0 / normalizer;
    let mut cls: Option<Var<'g>> = None;
    let mut l1: Option<Var<'g>> = None;
    let mut gl: Option<Var<'g>> = None;
    let sum = |acc: &mut Option<Var<'g>>, v: Var<'g>| {
        *acc = Some(match *acc {
            Some(a) => a.add(v),
            None => v,
        })
    };
    for (layer, a) in layers.iter().zip(assignments) {
        a.validate(n)?;
        let lshape = layer.logits.shape();
        if lshape[0] != n || layer.boxes.shape() != [n, 4] {
            return Err(Error::shape("prediction slots", n, format!("{lshape:?}")));
        }
        let ct = class_targets(targets, a, lshape[1]);
        sum(
            &mut cls,
            focal_loss_var(layer.logits, &ct, w.focal_alpha, w.focal_gamma),
        );
        if !objects.is_empty() {
            let idx: Vec<_> = objects.iter().map(|(i, _)| a.sigma[*i]).collect();
            let pb = layer.boxes.select_rows(&idx);
            sum(&mut l1, l1_loss_var(pb, &box_target));
            sum(&mut gl, giou_loss_var(pb, &box_target));
        }
    }
    let cls = cls
        .ok_or_else(|| Error::shape("decoder layers", "at least 1", 0))?
        .scale(w.w_cls * scale);
    let l1 = l1.map(|v| v.scale(w.w_l1 * scale));
    let gl = gl.map(|v| v.scale(w.w_giou * scale));
    let mut total = cls;
    for v in [l1, gl].into_iter().flatten() {
        total = total.add(v);
    }
    Ok(DetectionLoss {
        total,
        cls,
        l1,
        giou: gl,
    })
}

/// Mean cross-entropy of cosine similarities between prototypes `[C, d]`
/// and class embeddings `[M, d]`, scaled by `1/temperature`.
pub fn prototype_class_loss<'g>(
    prototypes: Var<'g>,
    labels: &[usize],
    class_embeddings: Var<'g>,
    temperature: f64,
) -> Var<'g> {
    let c = labels.len();
    assert_eq!(prototypes.shape()[0], c);
    let p = prototypes.l2_normalize_rows(1e-12);
    let e = class_embeddings.l2_normalize_rows(1e-12);
    p.matmul_nt(e)
        .scale(1.0 / temperature)
        .cross_entropy_rows(labels)
        .scale(1.0 / c.max(1) as f64)
}

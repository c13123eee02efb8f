use std::collections::BTreeMap;

use corrdet_tensor::{accumulate_grads, clip_grad_norm, par, AdamW, Graph, Session, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{Detector, PredictionSet};
use crate::error::{Error, Result};
use crate::losses::{detection_loss, prototype_class_loss, LossTerms, LossWeights};
use crate::matcher::{hungarian_match, match_cost, Assignment};
use crate::targetgen::{remap_targets, DetectionTargets};
use crate::types::{validate_episode, Episode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_episodes: usize,
    /// Fraction of the step budget after which the learning rate drops.
    pub lr_drop_at: f64,
    pub lr_drop_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            grad_clip: 0.1,
            batch_episodes: 4,
            lr_drop_at: 0.8,
            lr_drop_factor: 0.1,
        }
    }
}

/// Step schedule: `lr` until `lr_drop_at · total`, then `lr · lr_drop_factor`.
pub fn lr_at(cfg: &OptimConfig, step: u64, total: u64) -> f64 {
    if (step as f64) >= cfg.lr_drop_at * total as f64 {
        cfg.lr * cfg.lr_drop_factor
    } else {
        cfg.lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub terms: LossTerms,
}

fn episode_targets(det: &Detector, ep: &Episode) -> Result<Vec<DetectionTargets>> {
    ep.query_images
        .iter()
        .map(|q| remap_targets(&q.annotations, &ep.encoding_map, det.config.num_queries))
        .collect()
}

/// Encoding positions of the support classes, in prototype-row order.
pub(crate) fn encoding_positions(ep: &Episode) -> Result<Vec<usize>> {
    ep.support_classes
        .iter()
        .map(|c| ep.encoding_map.encode(*c).ok_or(Error::EncodingMapMismatch))
        .collect()
}

/// Builds one episode's loss graph. Returns the loss node, its weighted
/// terms, and the per-image assignments that were used.
pub fn episode_loss<'g>(
    det: &Detector,
    s: &Session<'g>,
    ep: &Episode,
    w: &LossWeights,
    normalizer: f64,
    proto_scale: f64,
    fixed: Option<&[Vec<Assignment>]>,
) -> Result<(Var<'g>, LossTerms, Vec<Vec<Assignment>>)> {
    let protos = det.prototypes(s, &ep.support_sets)?;
    let encodings = det.encodings_for(&encoding_positions(ep)?)?;
    let targets = episode_targets(det, ep)?;
    let mut total: Option<Var<'g>> = None;
    let mut terms = LossTerms::default();
    let mut used = Vec::with_capacity(ep.query_images.len());
    for (qi, (q, t)) in ep.query_images.iter().zip(&targets).enumerate() {
        let layers = det.forward(s, &q.image, protos, &encodings)?;
        let assignments = match fixed {
            Some(a) => a[qi].clone(),
            None => {
                let values = PredictionSet::from_vars(&layers);
                values
                    .layers
                    .iter()
                    .map(|(lg, bx)| hungarian_match(&match_cost(t, lg, bx, w)?))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let dl = detection_loss(&layers, t, &assignments, w, normalizer)?;
        terms.add(&dl.terms());
        total = Some(match total {
            Some(v) => v.add(dl.total),
            None => dl.total,
        });
        used.push(assignments);
    }
    let mut total = total.ok_or_else(|| Error::shape("episode query images", "at least 1", 0))?;
    if w.w_proto > 0.0 && !ep.support_classes.is_empty() {
        let labels: Vec<usize> = ep.support_classes.iter().map(|c| c.index()).collect();
        if let Some(&bad) = labels.iter().find(|&&l| l >= det.num_dataset_classes) {
            return Err(Error::Config(format!("class {bad} outside the embedding table")));
        }
        let pl = prototype_class_loss(protos, &labels, s.param("proto.embed"), w.proto_temperature)
            .scale(w.w_proto * proto_scale);
        terms.proto += pl.value().item();
        total = total.add(pl);
    }
    terms.total = total.value().item();
    Ok((total, terms, used))
}

/// Parameter gradients of one episode's loss.
pub fn episode_gradients(
    det: &Detector,
    ep: &Episode,
    w: &LossWeights,
    normalizer: f64,
    proto_scale: f64,
) -> Result<(BTreeMap<String, Tensor>, LossTerms)> {
    let g = Graph::new();
    let s = Session::train(&g, &det.params);
    let (loss, terms, _) = episode_loss(det, &s, ep, w, normalizer, proto_scale, None)?;
    let mut grads = g.backward(loss);
    Ok((s.param_grads(&mut grads), terms))
}

/// Owns a detector and its optimizer state.
pub struct Trainer {
    pub detector: Detector,
    pub opt: AdamW,
    pub weights: LossWeights,
    pub optim: OptimConfig,
}

impl Trainer {
    pub fn new(detector: Detector, weights: LossWeights, optim: OptimConfig) -> Self {
        Self {
            detector,
            opt: AdamW::new(optim.weight_decay),
            weights,
            optim,
        }
    }

    pub fn step(&self) -> u64 {
        self.opt.steps_taken()
    }

    /// One optimizer update from a batch of episodes. Episode gradients are
    /// computed in parallel and summed in batch order.
    pub fn train_step(&mut self, episodes: &[Episode], total_steps: u64) -> Result<StepReport> {
        for ep in episodes {
            validate_episode(ep)?;
        }
        let det = &self.detector;
        let mut objects = 0usize;
        for ep in episodes {
            for t in episode_targets(det, ep)? {
                objects += t.num_objects();
            }
        }
        let normalizer = objects.max(1) as f64;
        let proto_scale = 1.0 / episodes.len().max(1) as f64;
        let w = self.weights;
        let results = par::map(episodes, |ep| episode_gradients(det, ep, &w, normalizer, proto_scale));
        let mut grads = BTreeMap::new();
        let mut terms = LossTerms::default();
        let step = self.step();
        for r in results {
            let (g, t) = r?;
            terms.add(&t);
            accumulate_grads(&mut grads, g);
        }
        if !terms.is_finite() || grads.values().any(|g| !g.all_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!(
                    "terms {terms:?}; episode classes {:?}",
                    episodes.iter().map(|e| &e.support_classes).collect::<Vec<_>>()
                ),
            });
        }
        let grad_norm = clip_grad_norm(&mut grads, self.optim.grad_clip);
        let lr = lr_at(&self.optim, step, total_steps);
        self.opt.step(&mut self.detector.params, &grads, lr);
        Ok(StepReport {
            step: step + 1,
            lr,
            grad_norm,
            terms,
        })
    }
}

//! Optimal bipartite matching between target slots and prediction slots.

use corrdet_tensor::Tensor;

use crate::error::{Error, Result};
use crate::geometry::giou;
use crate::losses::{focal_terms, LossWeights};
use crate::targetgen::DetectionTargets;
use crate::types::BBox;

/// `sigma[i]` is the prediction slot paired with target slot `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub sigma: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn identity(n: usize) -> Self {
        Self {
            sigma: (0..n).collect(),
            total_cost: 0.0,
        }
    }

    /// Checks that `sigma` is a permutation of `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        if self.sigma.len() != n {
            return Err(Error::AssignmentInvalid { n });
        }
        for &j in &self.sigma {
            if j >= n || std::mem::replace(&mut seen[j], true) {
                return Err(Error::AssignmentInvalid { n });
            }
        }
        Ok(())
    }
}

/// `[N, N]` matching cost; row `i` is target slot `i`, column `j` is
/// prediction slot `j`. Rows of empty targets are zero.
pub fn match_cost(targets: &DetectionTargets, logits: &Tensor, boxes: &Tensor, w: &LossWeights) -> Result<Tensor> {
    let n = targets.len();
    if logits.rows() != n || boxes.shape() != [n, 4] {
        return Err(Error::shape(
            "match_cost predictions",
            format!("{n} slots"),
            format!("{:?} / {:?}", logits.shape(), boxes.shape()),
        ));
    }
    let mut cost = Tensor::zeros(&[n, n]);
    for (i, t) in targets.objects() {
        if t.label == 0 || t.label > logits.cols() {
            return Err(Error::UnknownEncodingIndex {
                index: t.label,
                max: logits.cols(),
            });
        }
        let tb = t.bbox.to_array();
        let txy = t.bbox.to_xyxy();
        for j in 0..n {
            let (pos, neg) = focal_terms(logits.at(j, t.label - 1), w.focal_alpha, w.focal_gamma);
            let b = boxes.row(j);
            let l1: f64 = b.iter().zip(&tb).map(|(p, q)| (p - q).abs()).sum();
            let pb = BBox {
                cx: b[0],
                cy: b[1],
                w: b[2],
                h: b[3],
            };
            let g = giou(&pb.to_xyxy(), &txy);
            cost.set(i, j, w.w_cls * (pos - neg) + w.w_l1 * l1 + w.w_giou * (1.0 - g));
        }
    }
    Ok(cost)
}

/// Minimum-cost perfect matching on a square matrix (shortest augmenting
/// paths with vertex potentials, `O(n³)`).
pub fn hungarian_match(cost: &Tensor) -> Result<Assignment> {
    let n = cost.rows();
    if cost.ndim() != 2 || cost.cols() != n {
        return Err(Error::shape("cost matrix", "square", format!("{:?}", cost.shape())));
    }
    for i in 0..n {
        for j in 0..n {
            if !cost.at(i, j).is_finite() {
                return Err(Error::NonFiniteCost { row: i, col: j });
            }
        }
    }
    // 1-based arrays; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![0; n];
    for j in 1..=n {
        sigma[p[j] - 1] = j - 1;
    }
    let total_cost = assignment_cost(cost, &sigma);
    Ok(Assignment { sigma, total_cost })
}

/// `Σ_i cost[i, sigma[i]]`, summed in row order.
pub fn assignment_cost(cost: &Tensor, sigma: &[usize]) -> f64 {
    sigma.iter().enumerate().map(|(i, &j)| cost.at(i, j)).sum()
}

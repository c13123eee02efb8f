//! Box conversions and overlap measures, all in normalized coordinates.

use corrdet_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::BBox;

/// Denominator floor for areas in lenient mode.
pub const AREA_EPS: f64 = 1e-9;

/// Corner-form box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct XyxyBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl XyxyBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.x0 * s, self.y0 * s, self.x1 * s, self.y1 * s)
    }
}

pub fn cxcywh_to_xyxy(b: &BBox) -> XyxyBox {
    XyxyBox {
        x0: b.cx - 0.5 * b.w,
        y0: b.cy - 0.5 * b.h,
        x1: b.cx + 0.5 * b.w,
        y1: b.cy + 0.5 * b.h,
    }
}

/// Inverse of [`cxcywh_to_xyxy`]; does not validate the result.
pub fn xyxy_to_cxcywh(b: &XyxyBox) -> BBox {
    BBox {
        cx: 0.5 * (b.x0 + b.x1),
        cy: 0.5 * (b.y0 + b.y1),
        w: b.x1 - b.x0,
        h: b.y1 - b.y0,
    }
}

/// How zero-area pairs are handled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OverlapPolicy {
    /// Clamp denominators at [`AREA_EPS`].
    #[default]
    Lenient,
    /// Reject pairs where both boxes have zero area.
    Strict,
}

struct Overlap {
    inter: f64,
    union: f64,
    hull: f64,
}

fn overlap(a: &XyxyBox, b: &XyxyBox) -> Overlap {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let hw = a.x1.max(b.x1) - a.x0.min(b.x0);
    let hh = a.y1.max(b.y1) - a.y0.min(b.y0);
    Overlap {
        inter,
        union,
        hull: hw.max(0.0) * hh.max(0.0),
    }
}

fn check(a: &XyxyBox, b: &XyxyBox, policy: OverlapPolicy) -> Result<()> {
    if policy == OverlapPolicy::Strict && a.area() == 0.0 && b.area() == 0.0 {
        return Err(Error::DegenerateBox);
    }
    Ok(())
}

pub fn iou_with(a: &XyxyBox, b: &XyxyBox, policy: OverlapPolicy) -> Result<f64> {
    check(a, b, policy)?;
    let o = overlap(a, b);
    Ok(o.inter / o.union.max(AREA_EPS))
}

pub fn giou_with(a: &XyxyBox, b: &XyxyBox, policy: OverlapPolicy) -> Result<f64> {
    check(a, b, policy)?;
    let o = overlap(a, b);
    let union = o.union.max(AREA_EPS);
    let hull = o.hull.max(AREA_EPS);
    Ok(o.inter / union - (hull - union) / hull)
}

/// Lenient IoU.
pub fn iou(a: &XyxyBox, b: &XyxyBox) -> f64 {
    let o = overlap(a, b);
    o.inter / o.union.max(AREA_EPS)
}

/// Lenient generalized IoU.
pub fn giou(a: &XyxyBox, b: &XyxyBox) -> f64 {
    giou_with(a, b, OverlapPolicy::Lenient).expect("lenient policy never fails")
}

/// `|a| x |b|` matrix of generalized IoU values.
pub fn pairwise_giou(a: &[XyxyBox], b: &[XyxyBox]) -> Tensor {
    let mut data = Vec::with_capacity(a.len() * b.len());
    for x in a {
        data.extend(b.iter().map(|y| giou(x, y)));
    }
    Tensor::from_vec(&[a.len(), b.len()], data)
}

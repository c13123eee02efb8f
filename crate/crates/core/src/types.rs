//! Shared domain types.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::sync::Arc;

use corrdet_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cxcywh_to_xyxy, XyxyBox};
use crate::targetgen::ChiMap;

const BOUND_EPS: f64 = 1e-9;

/// Global class label, shared by base and novel classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl ClassId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Normalized center-size box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Validated constructor: centers in `[0,1]`, sizes in `(0,1]`.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |field: &'static str, v: f64, lo_open: bool| -> Result<()> {
            let ok = v.is_finite() && v <= 1.0 && if lo_open { v > 0.0 } else { v >= 0.0 };
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidBox {
                    field,
                    detail: format!("{v} outside {}", if lo_open { "(0,1]" } else { "[0,1]" }),
                })
            }
        };
        check("cx", self.cx, false)?;
        check("cy", self.cy, false)?;
        check("w", self.w, true)?;
        check("h", self.h, true)
    }

    pub fn to_xyxy(&self) -> XyxyBox {
        cxcywh_to_xyxy(self)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Whether the box edges lie inside the unit square.
    pub fn within_image(&self) -> bool {
        let b = self.to_xyxy();
        b.x0 >= -BOUND_EPS && b.y0 >= -BOUND_EPS && b.x1 <= 1.0 + BOUND_EPS && b.y1 <= 1.0 + BOUND_EPS
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: ClassId,
    pub bbox: BBox,
}

/// 8-bit RGB image in HWC order; channel values read as `byte / 255`.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Arc<[u8]>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Image({}x{})", self.width, self.height)
    }
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn from_rgb8(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * Self::CHANNELS {
            return Err(Error::shape(
                "image pixels",
                width * height * Self::CHANNELS,
                pixels.len(),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels: pixels.into(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgb8(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * Self::CHANNELS + c] as f64 / 255.0
    }

    /// `[3, H, W]` tensor with values in `[0,1]`.
    pub fn to_chw(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0; Self::CHANNELS * h * w];
        for (i, px) in self.pixels.chunks_exact(Self::CHANNELS).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                data[c * h * w + i] = v as f64 / 255.0;
            }
        }
        Tensor::from_vec(&[Self::CHANNELS, h, w], data)
    }
}

/// A decoded, thresholded detection in the global label space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: ClassId,
    pub score: f64,
    pub bbox: BBox,
}

/// An image with its (possibly empty) ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: u64,
    pub image: Image,
    pub annotations: Vec<Annotation>,
}

/// One annotated support instance.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportExample {
    pub image: LabeledImage,
    pub instance_box: BBox,
}

impl SupportExample {
    pub fn validate(&self) -> Result<()> {
        self.instance_box.validate()?;
        if !self.instance_box.within_image() {
            return Err(Error::BoxOutOfBounds {
                field: format!("support image {} instance_box", self.image.id),
                detail: format!("{:?}", self.instance_box.to_xyxy()),
            });
        }
        Ok(())
    }
}

/// Disjoint base and novel class sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSplit")]
pub struct ClassSplit {
    base: BTreeSet<ClassId>,
    novel: BTreeSet<ClassId>,
}

#[derive(Deserialize)]
struct RawSplit {
    base: BTreeSet<ClassId>,
    novel: BTreeSet<ClassId>,
}

impl TryFrom<RawSplit> for ClassSplit {
    type Error = Error;
    fn try_from(r: RawSplit) -> Result<Self> {
        ClassSplit::new(r.base, r.novel)
    }
}

impl ClassSplit {
    pub fn new(base: impl IntoIterator<Item = ClassId>, novel: impl IntoIterator<Item = ClassId>) -> Result<Self> {
        let base: BTreeSet<_> = base.into_iter().collect();
        let novel: BTreeSet<_> = novel.into_iter().collect();
        let overlap: Vec<_> = base.intersection(&novel).copied().collect();
        if !overlap.is_empty() {
            return Err(Error::OverlappingSplit(overlap));
        }
        Ok(Self { base, novel })
    }

    pub fn base(&self) -> &BTreeSet<ClassId> {
        &self.base
    }

    pub fn novel(&self) -> &BTreeSet<ClassId> {
        &self.novel
    }

    pub fn is_novel(&self, c: ClassId) -> bool {
        self.novel.contains(&c)
    }

    /// Base then novel classes, each ascending.
    pub fn all(&self) -> Vec<ClassId> {
        let mut v: Vec<_> = self.base.iter().chain(&self.novel).copied().collect();
        v.sort();
        v
    }
}

/// One meta-learning task.
#[derive(Clone, Debug)]
pub struct Episode {
    pub query_images: Vec<LabeledImage>,
    /// Ordered support classes; position `i` maps to task encoding `i + 1`.
    pub support_classes: Vec<ClassId>,
    /// `support_sets[i]` holds the examples of `support_classes[i]`.
    pub support_sets: Vec<Vec<SupportExample>>,
    pub shots: usize,
    pub encoding_map: ChiMap,
}

impl Episode {
    pub fn num_classes(&self) -> usize {
        self.support_classes.len()
    }
}

/// Checks every episode invariant, naming the offending field on failure.
pub fn validate_episode(e: &Episode) -> Result<()> {
    let mut seen = HashSet::new();
    for &c in &e.support_classes {
        if !seen.insert(c) {
            return Err(Error::DuplicateSupportClass { class: c });
        }
    }
    if e.support_sets.len() != e.support_classes.len() {
        return Err(Error::shape(
            "episode support_sets",
            e.support_classes.len(),
            e.support_sets.len(),
        ));
    }
    for (c, set) in e.support_classes.iter().zip(&e.support_sets) {
        if set.len() != e.shots {
            return Err(Error::ShotCountMismatch {
                class: *c,
                expected: e.shots,
                found: set.len(),
            });
        }
        for s in set {
            s.validate()?;
        }
    }
    for q in &e.query_images {
        for (i, a) in q.annotations.iter().enumerate() {
            a.bbox.validate()?;
            if !a.bbox.within_image() {
                return Err(Error::BoxOutOfBounds {
                    field: format!("query image {} annotation {i}", q.id),
                    detail: format!("{:?}", a.bbox.to_xyxy()),
                });
            }
        }
    }
    if e.encoding_map.classes() != e.support_classes.as_slice() {
        return Err(Error::EncodingMapMismatch);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targetgen::build_encoding_map;

    fn img(id: u64) -> LabeledImage {
        LabeledImage {
            id,
            image: Image::from_rgb8(64, 64, vec![0; 64 * 64 * 3]).unwrap(),
            annotations: vec![],
        }
    }

    fn support(id: u64) -> SupportExample {
        SupportExample {
            image: img(id),
            instance_box: BBox::new(0.5, 0.5, 0.2, 0.2).unwrap(),
        }
    }

    fn episode(classes: &[u32], shots: usize, per_class: &[usize]) -> Episode {
        let cls: Vec<_> = classes.iter().map(|&c| ClassId(c)).collect();
        Episode {
            query_images: vec![img(0)],
            encoding_map: ChiMap::from_classes_unchecked(cls.clone()),
            support_sets: per_class
                .iter()
                .enumerate()
                .map(|(i, &n)| (0..n).map(|k| support(100 + (i * 10 + k) as u64)).collect())
                .collect(),
            support_classes: cls,
            shots,
        }
    }

    #[test]
    fn valid_episode_passes() {
        let mut e = episode(&[3, 1, 4], 2, &[2, 2, 2]);
        e.encoding_map = build_encoding_map(&e.support_classes).unwrap();
        validate_episode(&e).unwrap();
    }

    #[test]
    fn duplicate_class_rejected() {
        let e = episode(&[3, 3], 1, &[1, 1]);
        assert!(matches!(
            validate_episode(&e),
            Err(Error::DuplicateSupportClass { class: ClassId(3) })
        ));
    }

    #[test]
    fn shot_count_checked() {
        let e = episode(&[1, 2], 5, &[5, 4]);
        assert!(matches!(
            validate_episode(&e),
            Err(Error::ShotCountMismatch {
                class: ClassId(2),
                expected: 5,
                found: 4
            })
        ));
    }

    #[test]
    fn support_box_must_fit_image() {
        let mut e = episode(&[1], 1, &[1]);
        e.support_sets[0][0].instance_box = BBox {
            cx: 0.95,
            cy: 0.5,
            w: 0.3,
            h: 0.2,
        };
        assert!(matches!(validate_episode(&e), Err(Error::BoxOutOfBounds { .. })));
    }

    #[test]
    fn split_rejects_overlap_at_construction() {
        assert!(ClassSplit::new([ClassId(1), ClassId(2)], [ClassId(2)]).is_err());
        let s = ClassSplit::new([ClassId(1)], [ClassId(2)]).unwrap();
        assert_eq!(s.all(), vec![ClassId(1), ClassId(2)]);
        let bad = r#"{"base":[1,2],"novel":[2]}"#;
        assert!(serde_json::from_str::<ClassSplit>(bad).is_err());
    }

    #[test]
    fn box_validation() {
        assert!(BBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BBox::new(1.1, 0.5, 0.1, 0.1).is_err());
        assert!(BBox::new(0.5, 0.5, 1.0, 1.0).is_ok());
    }

    #[test]
    fn chw_layout() {
        let mut px = vec![0u8; 2 * 1 * 3];
        px[3] = 255; // pixel (1,0), red
        let im = Image::from_rgb8(2, 1, px).unwrap();
        let t = im.to_chw();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(im.get(1, 0, 0), 1.0);
    }
}

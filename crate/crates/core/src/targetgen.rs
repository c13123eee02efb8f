//! Class-agnostic targets: support classes map to task-encoding indices
//! and ground truth is rewritten in terms of those indices.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Annotation, BBox, ClassId, Detection};

/// Ordered class to encoding-index map. Index 0 is reserved for background,
/// so the `i`-th class (0-based) maps to `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassId>", into = "Vec<ClassId>")]
pub struct ChiMap {
    classes: Vec<ClassId>,
    #[serde(skip)]
    index: HashMap<ClassId, usize>,
}

impl TryFrom<Vec<ClassId>> for ChiMap {
    type Error = Error;
    fn try_from(v: Vec<ClassId>) -> Result<Self> {
        build_encoding_map(&v)
    }
}

impl From<ChiMap> for Vec<ClassId> {
    fn from(m: ChiMap) -> Self {
        m.classes
    }
}

impl ChiMap {
    /// Skips the duplicate check; for building deliberately invalid episodes.
    #[doc(hidden)]
    pub fn from_classes_unchecked(classes: Vec<ClassId>) -> Self {
        let index = classes.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
        Self { classes, index }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    /// `chi(c)`, in `1..=C`.
    pub fn encode(&self, c: ClassId) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// `chi^{-1}(index)`.
    pub fn decode(&self, index: usize) -> Result<ClassId> {
        if index == 0 || index > self.classes.len() {
            return Err(Error::UnknownEncodingIndex {
                index,
                max: self.classes.len(),
            });
        }
        Ok(self.classes[index - 1])
    }
}

/// `chi(s_i) = i` for the ordered support classes.
pub fn build_encoding_map(support: &[ClassId]) -> Result<ChiMap> {
    let m = ChiMap::from_classes_unchecked(support.to_vec());
    if m.index.len() != support.len() {
        let mut seen = std::collections::HashSet::new();
        let dup = support.iter().find(|c| !seen.insert(**c)).copied();
        return Err(Error::DuplicateSupportClass {
            class: dup.expect("length mismatch implies a duplicate"),
        });
    }
    Ok(m)
}

/// One target slot: an encoding label with its box, or empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetSlot {
    pub label: usize,
    pub bbox: BBox,
}

/// `N` target slots; `None` is the empty target `(∅, ∅)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTargets {
    pub slots: Vec<Option<TargetSlot>>,
}

impl DetectionTargets {
    pub fn empty(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_objects(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    /// `(slot index, target)` for every non-empty slot.
    pub fn objects(&self) -> impl Iterator<Item = (usize, &TargetSlot)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|t| (i, t)))
    }
}

/// Rewrites one image's ground truth: in-support objects keep their boxes
/// under their encoding label, everything else becomes empty.
pub fn remap_targets(y: &[Annotation], chi: &ChiMap, n: usize) -> Result<DetectionTargets> {
    if y.len() > n {
        return Err(Error::TooManyObjects {
            count: y.len(),
            slots: n,
        });
    }
    let mut t = DetectionTargets::empty(n);
    let kept = y
        .iter()
        .filter_map(|a| chi.encode(a.class_id).map(|label| TargetSlot { label, bbox: a.bbox }));
    for (slot, k) in t.slots.iter_mut().zip(kept) {
        *slot = Some(k);
    }
    Ok(t)
}

/// A decoded prediction before the inverse map is applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawPrediction {
    pub encoding: usize,
    pub score: f64,
    pub bbox: BBox,
}

pub fn unmap_predictions(raw: &[RawPrediction], chi: &ChiMap) -> Result<Vec<Detection>> {
    raw.iter()
        .map(|r| {
            Ok(Detection {
                class_id: chi.decode(r.encoding)?,
                score: r.score,
                bbox: r.bbox,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<ClassId> {
        v.iter().map(|&c| ClassId(c)).collect()
    }

    fn b(x: f64) -> BBox {
        BBox::new(x, 0.5, 0.1, 0.1).unwrap()
    }

    #[test]
    fn encoding_map_follows_order() {
        let m = build_encoding_map(&ids(&[7, 2, 9])).unwrap();
        assert_eq!(m.encode(ClassId(7)), Some(1));
        assert_eq!(m.encode(ClassId(2)), Some(2));
        assert_eq!(m.encode(ClassId(9)), Some(3));
        let p = build_encoding_map(&ids(&[2, 9, 7])).unwrap();
        assert_eq!(p.encode(ClassId(2)), Some(1));
        assert_eq!(p.encode(ClassId(7)), Some(3));
        assert_eq!(build_encoding_map(&ids(&[4])).unwrap().encode(ClassId(4)), Some(1));
        assert!(matches!(
            build_encoding_map(&ids(&[1, 5, 1])),
            Err(Error::DuplicateSupportClass { class: ClassId(1) })
        ));
    }

    #[test]
    fn remap_examples() {
        let chi = build_encoding_map(&ids(&[7, 2, 9])).unwrap();
        let y = [Annotation {
            class_id: ClassId(2),
            bbox: b(0.3),
        }];
        let t = remap_targets(&y, &chi, 4).unwrap();
        assert_eq!(t.slots[0], Some(TargetSlot { label: 2, bbox: b(0.3) }));
        assert!(t.slots[1..].iter().all(Option::is_none));

        let y = [Annotation {
            class_id: ClassId(5),
            bbox: b(0.3),
        }];
        assert_eq!(remap_targets(&y, &chi, 4).unwrap().num_objects(), 0);
        assert_eq!(remap_targets(&[], &chi, 4).unwrap(), DetectionTargets::empty(4));
        let many = vec![y[0]; 5];
        assert!(matches!(
            remap_targets(&many, &chi, 4),
            Err(Error::TooManyObjects { count: 5, slots: 4 })
        ));
    }

    #[test]
    fn unmap_examples() {
        let chi = build_encoding_map(&ids(&[7, 2, 9])).unwrap();
        let r = RawPrediction {
            encoding: 1,
            score: 0.9,
            bbox: b(0.5),
        };
        let d = unmap_predictions(&[r], &chi).unwrap();
        assert_eq!(d[0].class_id, ClassId(7));
        assert_eq!(d[0].score, 0.9);
        let bg = RawPrediction { encoding: 0, ..r };
        assert!(matches!(
            unmap_predictions(&[bg], &chi),
            Err(Error::UnknownEncodingIndex { index: 0, max: 3 })
        ));
    }

    #[test]
    fn serde_round_trip_rejects_duplicates() {
        let chi = build_encoding_map(&ids(&[3, 1])).unwrap();
        let s = serde_json::to_string(&chi).unwrap();
        assert_eq!(s, "[3,1]");
        assert_eq!(serde_json::from_str::<ChiMap>(&s).unwrap(), chi);
        assert!(serde_json::from_str::<ChiMap>("[3,3]").is_err());
    }
}

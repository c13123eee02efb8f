//! Episodic sampling for both training stages and K-shot support sets.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::FewShotDataset;
use crate::error::{Error, Result};
use crate::targetgen::build_encoding_map;
use crate::types::{ClassId, Episode, LabeledImage, SupportExample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Base => "base",
            Stage::Finetune => "finetune",
        })
    }
}

/// Exactly `k` support examples per class, drawn with a recorded seed.
#[derive(Clone, Debug)]
pub struct KShotSupportSet {
    pub k: usize,
    pub seed: u64,
    pub per_class: BTreeMap<ClassId, Vec<SupportExample>>,
}

impl KShotSupportSet {
    /// Image ids per class, for manifests.
    pub fn manifest(&self) -> BTreeMap<ClassId, Vec<u64>> {
        self.per_class
            .iter()
            .map(|(c, v)| (*c, v.iter().map(|s| s.image.id).collect()))
            .collect()
    }

    /// Distinct source images, in class then shot order. These double as the
    /// fine-tuning query pool.
    pub fn images(&self) -> Vec<LabeledImage> {
        let mut seen = std::collections::HashSet::new();
        self.per_class
            .values()
            .flatten()
            .filter(|s| seen.insert(s.image.id))
            .map(|s| s.image.clone())
            .collect()
    }
}

/// Draws `k` single-object pool images for every novel class and, when
/// `balanced_base` is set, for every base class as well.
pub fn build_finetune_set(ds: &FewShotDataset, k: usize, seed: u64, balanced_base: bool) -> Result<KShotSupportSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scope: Vec<ClassId> = ds.split.novel().iter().copied().collect();
    if balanced_base {
        scope.extend(ds.split.base().iter().copied());
        scope.sort();
    }
    let mut per_class = BTreeMap::new();
    for c in scope {
        let mut pool: Vec<&LabeledImage> = ds
            .fewshot
            .iter()
            .filter(|li| li.annotations.iter().any(|a| a.class_id == c))
            .collect();
        if pool.len() < k {
            return Err(Error::InsufficientShots {
                class: c,
                needed: k,
                available: pool.len(),
            });
        }
        pool.shuffle(&mut rng);
        let shots = pool[..k]
            .iter()
            .map(|li| {
                let a = li.annotations.iter().find(|a| a.class_id == c).expect("filtered");
                SupportExample {
                    image: (*li).clone(),
                    instance_box: a.bbox,
                }
            })
            .collect();
        per_class.insert(c, shots);
    }
    Ok(KShotSupportSet { k, seed, per_class })
}

/// Source of episodes for one training stage.
pub struct EpisodeSampler {
    pub stage: Stage,
    queries: Vec<LabeledImage>,
    supports: BTreeMap<ClassId, Vec<SupportExample>>,
    scope: Vec<ClassId>,
    /// Probability that a class present in the query joins the episode.
    pub positive_rate: f64,
}

impl EpisodeSampler {
    /// Base stage: queries and supports both come from the base split.
    pub fn base(ds: &FewShotDataset) -> Self {
        let mut supports: BTreeMap<ClassId, Vec<SupportExample>> = BTreeMap::new();
        for li in &ds.base {
            for a in &li.annotations {
                supports.entry(a.class_id).or_default().push(SupportExample {
                    image: li.clone(),
                    instance_box: a.bbox,
                });
            }
        }
        Self {
            stage: Stage::Base,
            queries: ds.base.clone(),
            scope: ds.split.base().iter().copied().collect(),
            supports,
            positive_rate: 0.5,
        }
    }

    /// Fine-tuning stage: queries and supports restricted to the K-shot set.
    pub fn finetune(set: &KShotSupportSet) -> Self {
        Self {
            stage: Stage::Finetune,
            queries: set.images(),
            scope: set.per_class.keys().copied().collect(),
            supports: set.per_class.clone(),
            positive_rate: 0.5,
        }
    }

    pub fn scope(&self) -> &[ClassId] {
        &self.scope
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    /// One episode with a single query image and `c` support classes of
    /// `shots` examples each. Supports never come from the query image.
    pub fn sample<R: Rng>(&self, c: usize, shots: usize, rng: &mut R) -> Result<Episode> {
        if c > self.scope.len() {
            return Err(Error::InsufficientClasses {
                needed: c,
                available: self.scope.len(),
            });
        }
        for &cls in &self.scope {
            let available = self.supports.get(&cls).map_or(0, Vec::len);
            if available < shots {
                return Err(Error::InsufficientShots {
                    class: cls,
                    needed: shots,
                    available,
                });
            }
        }
        let query = self.queries.choose(rng).ok_or(Error::InsufficientClasses {
            needed: c,
            available: 0,
        })?;
        let eligible = |cls: &ClassId| -> Vec<&SupportExample> {
            self.supports[cls].iter().filter(|s| s.image.id != query.id).collect()
        };
        let usable: Vec<ClassId> = self
            .scope
            .iter()
            .copied()
            .filter(|cls| eligible(cls).len() >= shots)
            .collect();
        if usable.len() < c {
            return Err(Error::InsufficientClasses {
                needed: c,
                available: usable.len(),
            });
        }
        let mut present: Vec<ClassId> = query.annotations.iter().map(|a| a.class_id).collect();
        present.sort();
        present.dedup();
        let mut chosen: Vec<ClassId> = present
            .iter()
            .copied()
            .filter(|cls| usable.contains(cls))
            .filter(|_| rng.random_bool(self.positive_rate))
            .collect();
        chosen.truncate(c);
        // Fill with absent classes; rejected present classes only when
        // the query covers nearly the whole scope.
        let (absent, rejected): (Vec<ClassId>, Vec<ClassId>) = usable
            .iter()
            .copied()
            .filter(|cls| !chosen.contains(cls))
            .partition(|cls| !present.contains(cls));
        chosen.extend(absent.choose_multiple(rng, c - chosen.len()).copied());
        if chosen.len() < c {
            chosen.extend(rejected.choose_multiple(rng, c - chosen.len()).copied());
        }
        chosen.shuffle(rng);
        let support_sets = chosen
            .iter()
            .map(|cls| {
                eligible(cls)
                    .choose_multiple(rng, shots)
                    .map(|s| (*s).clone())
                    .collect()
            })
            .collect();
        Ok(Episode {
            query_images: vec![query.clone()],
            encoding_map: build_encoding_map(&chosen)?,
            support_classes: chosen,
            support_sets,
            shots,
        })
    }
}

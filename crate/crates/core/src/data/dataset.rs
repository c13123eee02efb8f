//! In-memory dataset and its on-disk form: `images/*.png`, a COCO-style
//! `annotations.json`, and `manifest.json`.

use std::fs;
use std::path::Path;

use corrdet_tensor::par;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::shapes::{class_name, generate_scene, scene_rng, ShapeWorldConfig, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::types::{Annotation, BBox, ClassId, ClassSplit, Image, LabeledImage};

pub const FORMAT_VERSION: u32 = 1;

/// Which pool an image belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Multi-object scenes containing base classes only.
    Base,
    /// Single-object scenes of every class; K-shot sets are drawn from here.
    Fewshot,
    /// Held-out multi-object scenes over all classes.
    Test,
}

impl Split {
    fn code(self) -> u64 {
        match self {
            Split::Base => 0,
            Split::Fewshot => 1,
            Split::Test => 2,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Fewshot => "fewshot",
            Split::Test => "test",
        }
    }
}

const ID_STRIDE: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotDataset {
    pub config: ShapeWorldConfig,
    pub split: ClassSplit,
    pub base: Vec<LabeledImage>,
    pub fewshot: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl FewShotDataset {
    /// Renders every scene. Scenes are independent, so this runs in
    /// parallel by index with identical results to a serial run.
    pub fn generate(config: &ShapeWorldConfig) -> Result<Self> {
        config.validate()?;
        let all: Vec<ClassId> = (0..NUM_CLASSES as u32).map(ClassId).collect();
        let novel = config.novel_classes.clone();
        let base_classes: Vec<ClassId> = all.iter().copied().filter(|c| !novel.contains(c)).collect();
        let split = ClassSplit::new(base_classes.clone(), novel)?;
        let id = |s: Split, i: usize| s.code() * ID_STRIDE + i as u64;

        let base = par::map_range(config.base_scenes, |i| {
            let mut rng = scene_rng(config.seed, Split::Base.code(), i as u64);
            generate_scene(&mut rng, config, &base_classes, id(Split::Base, i))
        });
        let single = ShapeWorldConfig {
            min_objects: 1,
            max_objects: 1,
            ..config.clone()
        };
        let per = config.pool_per_class;
        let fewshot = par::map_range(all.len() * per, |i| {
            let mut rng = scene_rng(config.seed, Split::Fewshot.code(), i as u64);
            generate_scene(&mut rng, &single, &all[i / per..i / per + 1], id(Split::Fewshot, i))
        });
        let test = par::map_range(config.test_scenes, |i| {
            let mut rng = scene_rng(config.seed, Split::Test.code(), i as u64);
            generate_scene(&mut rng, config, &all, id(Split::Test, i))
        });
        Ok(Self {
            config: config.clone(),
            split,
            base,
            fewshot,
            test,
        })
    }

    pub fn pool(&self, s: Split) -> &[LabeledImage] {
        match s {
            Split::Base => &self.base,
            Split::Fewshot => &self.fewshot,
            Split::Test => &self.test,
        }
    }

    pub fn num_classes(&self) -> usize {
        NUM_CLASSES
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut doc = CocoDocument {
            info: CocoInfo {
                description: "synthetic shapes few-shot detection dataset".into(),
                version: FORMAT_VERSION,
            },
            categories: (0..NUM_CLASSES as u32)
                .map(|c| CocoCategory {
                    id: c,
                    name: class_name(ClassId(c)),
                    split: if self.split.is_novel(ClassId(c)) {
                        "novel"
                    } else {
                        "base"
                    }
                    .into(),
                })
                .collect(),
            images: Vec::new(),
            annotations: Vec::new(),
        };
        for s in [Split::Base, Split::Fewshot, Split::Test] {
            for (i, li) in self.pool(s).iter().enumerate() {
                let file_name = format!("{}_{i:05}.png", s.prefix());
                write_png(&images.join(&file_name), &li.image)?;
                doc.images.push(CocoImage {
                    id: li.id,
                    file_name,
                    width: li.image.width(),
                    height: li.image.height(),
                    split: s,
                });
                for a in &li.annotations {
                    let (w, h) = (li.image.width() as f64, li.image.height() as f64);
                    let xy = a.bbox.to_xyxy();
                    doc.annotations.push(CocoAnnotation {
                        id: doc.annotations.len() as u64,
                        image_id: li.id,
                        category_id: a.class_id.0,
                        bbox: [xy.x0 * w, xy.y0 * h, a.bbox.w * w, a.bbox.h * h],
                        bbox_cxcywh: a.bbox.to_array(),
                        area: a.bbox.area() * w * h,
                    });
                }
            }
        }
        let ann = serde_json::to_vec_pretty(&doc).map_err(|e| Error::Format {
            what: "annotations",
            detail: e.to_string(),
        })?;
        let ann_path = dir.join("annotations.json");
        fs::write(&ann_path, &ann).map_err(|e| Error::io(&ann_path, e))?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            seed: self.config.seed,
            config: self.config.clone(),
            split: self.split.clone(),
            counts: [self.base.len(), self.fewshot.len(), self.test.len()],
            annotations_sha256: hex::encode(Sha256::digest(&ann)),
        };
        let m = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let m_path = dir.join("manifest.json");
        fs::write(&m_path, m).map_err(|e| Error::io(&m_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m_path = dir.join("manifest.json");
        let manifest: Manifest = read_json(&m_path, "manifest")?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                what: "manifest",
                detail: format!("format version {} unsupported", manifest.format_version),
            });
        }
        let doc: CocoDocument = read_json(&dir.join("annotations.json"), "annotations")?;
        let mut by_image: std::collections::HashMap<u64, Vec<Annotation>> = Default::default();
        for a in &doc.annotations {
            let [cx, cy, w, h] = a.bbox_cxcywh;
            let bbox = BBox::new(cx, cy, w, h)?;
            by_image.entry(a.image_id).or_default().push(Annotation {
                class_id: ClassId(a.category_id),
                bbox,
            });
        }
        let mut ds = Self {
            config: manifest.config,
            split: manifest.split,
            base: Vec::new(),
            fewshot: Vec::new(),
            test: Vec::new(),
        };
        for im in doc.images {
            let image = read_png(&dir.join("images").join(&im.file_name))?;
            let li = LabeledImage {
                id: im.id,
                image,
                annotations: by_image.remove(&im.id).unwrap_or_default(),
            };
            match im.split {
                Split::Base => ds.base.push(li),
                Split::Fewshot => ds.fewshot.push(li),
                Split::Test => ds.test.push(li),
            }
        }
        if [ds.base.len(), ds.fewshot.len(), ds.test.len()] != manifest.counts {
            return Err(Error::Format {
                what: "dataset",
                detail: "image counts disagree with the manifest".into(),
            });
        }
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    seed: u64,
    config: ShapeWorldConfig,
    split: ClassSplit,
    counts: [usize; 3],
    annotations_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct CocoDocument {
    info: CocoInfo,
    categories: Vec<CocoCategory>,
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct CocoInfo {
    description: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: u32,
    name: String,
    split: String,
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    /// Pixel `[x, y, w, h]`.
    bbox: [f64; 4],
    /// Normalized `[cx, cy, w, h]`; authoritative on load.
    bbox_cxcywh: [f64; 4],
    area: f64,
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        what,
        detail: format!("{}: {e}", path.display()),
    })
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.rgb8().to_vec())
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                what: "png",
                detail: other.to_string(),
            },
        })
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                what: "image",
                detail: format!("{}: {other}", path.display()),
            },
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Image::from_rgb8(w, h, img.into_raw())
}

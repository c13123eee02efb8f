//! Synthetic scenes of simple shapes. Classes are shape × fill style, so
//! pairs like filled circles and filled rings are visually correlated.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Annotation, BBox, ClassId, Image, LabeledImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
    Cross,
    Ring,
}

pub const SHAPES: [Shape; 6] = [
    Shape::Circle,
    Shape::Square,
    Shape::Triangle,
    Shape::Star,
    Shape::Cross,
    Shape::Ring,
];

pub const NUM_CLASSES: usize = 12;

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
        }
    }
}

/// Class id `2·shape + filled`.
pub fn class_of(shape: Shape, filled: bool) -> ClassId {
    let s = SHAPES.iter().position(|&x| x == shape).expect("known shape");
    ClassId((2 * s + usize::from(filled)) as u32)
}

pub fn decompose(c: ClassId) -> (Shape, bool) {
    (SHAPES[c.index() / 2], c.0 % 2 == 1)
}

pub fn class_name(c: ClassId) -> String {
    let (s, filled) = decompose(c);
    format!("{}-{}", s.name(), if filled { "filled" } else { "outline" })
}

pub fn class_by_name(name: &str) -> Option<ClassId> {
    (0..NUM_CLASSES as u32).map(ClassId).find(|&c| class_name(c) == name)
}

pub fn default_novel_classes() -> Vec<ClassId> {
    vec![
        class_of(Shape::Star, false),
        class_of(Shape::Cross, true),
        class_of(Shape::Ring, true),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeWorldConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object radius range as a fraction of the image side.
    pub scale_range: (f64, f64),
    pub color_jitter: f64,
    pub noise: f64,
    pub seed: u64,
    pub base_scenes: usize,
    /// Single-object scenes per class forming the few-shot pool.
    pub pool_per_class: usize,
    pub test_scenes: usize,
    pub novel_classes: Vec<ClassId>,
}

impl Default for ShapeWorldConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            min_objects: 1,
            max_objects: 4,
            scale_range: (0.12, 0.22),
            color_jitter: 0.15,
            noise: 0.04,
            seed: 0,
            base_scenes: 2000,
            pool_per_class: 20,
            test_scenes: 300,
            novel_classes: default_novel_classes(),
        }
    }
}

impl ShapeWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.novel_classes.len() < 2 {
            return bad("at least two novel classes are required".into());
        }
        if let Some(c) = self.novel_classes.iter().find(|c| c.index() >= NUM_CLASSES) {
            return bad(format!("novel class {c} is outside the {NUM_CLASSES}-class pool"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("need 1 <= min_objects <= max_objects".into());
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return bad("scale_range must satisfy 0 < lo <= hi < 0.5".into());
        }
        if self.image_size < 16 {
            return bad("image_size too small".into());
        }
        Ok(())
    }
}

/// Independent stream for scene `index` of `split`.
pub fn scene_rng(seed: u64, split: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split << 40) | index);
    rng
}

fn point_in_polygon(u: f64, v: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn star_polygon() -> Vec<(f64, f64)> {
    (0..10)
        .map(|i| {
            let r = if i % 2 == 0 { 1.0 } else { 0.45 };
            let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

const TRIANGLE: [(f64, f64); 3] = [(0.0, -1.0), (0.95, 0.75), (-0.95, 0.75)];

fn solid(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Circle | Shape::Ring => u * u + v * v <= 1.0,
        Shape::Square => u.abs() <= 0.82 && v.abs() <= 0.82,
        Shape::Triangle => point_in_polygon(u, v, &TRIANGLE),
        Shape::Star => point_in_polygon(u, v, &star_polygon()),
        Shape::Cross => (u.abs() <= 0.34 && v.abs() <= 1.0) || (v.abs() <= 0.34 && u.abs() <= 1.0),
    }
}

/// Membership of a point in local coordinates (unit radius).
pub fn covers(shape: Shape, filled: bool, u: f64, v: f64) -> bool {
    let d = (u * u + v * v).sqrt();
    match (shape, filled) {
        (Shape::Circle, false) => (0.7..=1.0).contains(&d),
        (Shape::Ring, true) => d <= 0.3 || (0.55..=1.0).contains(&d),
        (Shape::Ring, false) => (0.8..=1.0).contains(&d) || (0.35..=0.52).contains(&d),
        (s, true) => solid(s, u, v),
        (s, false) => solid(s, u, v) && !solid(s, u / 0.6, v / 0.6),
    }
}

const PALETTE: [[f64; 3]; 6] = [
    [0.95, 0.25, 0.2],
    [0.2, 0.8, 0.3],
    [0.25, 0.45, 0.95],
    [0.95, 0.85, 0.2],
    [0.85, 0.3, 0.9],
    [0.2, 0.85, 0.9],
];

struct Placed {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

/// Renders a scene whose objects are drawn from `classes`.
pub fn generate_scene<R: Rng>(rng: &mut R, config: &ShapeWorldConfig, classes: &[ClassId], id: u64) -> LabeledImage {
    assert!(!classes.is_empty(), "scene needs at least one candidate class");
    let size = config.image_size;
    let bg: f64 = rng.random_range(0.05..0.3);
    let mut px: Vec<f64> = (0..size * size * 3)
        .map(|_| (bg + rng.random_range(-config.noise..=config.noise)).clamp(0.0, 1.0))
        .collect();
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let mut placed: Vec<Placed> = Vec::new();
    let mut annotations = Vec::new();
    for _ in 0..count {
        let class = *classes.choose(rng).expect("non-empty");
        let (shape, filled) = decompose(class);
        let (lo, hi) = config.scale_range;
        let r = rng.random_range(lo..=hi) * size as f64;
        let ri = r.ceil() as usize + 1;
        if 2 * ri >= size {
            continue;
        }
        let mut spot = None;
        for _ in 0..100 {
            let cx = rng.random_range(ri..size - ri);
            let cy = rng.random_range(ri..size - ri);
            let p = Placed {
                x0: cx - ri,
                y0: cy - ri,
                x1: cx + ri,
                y1: cy + ri,
            };
            let clear = placed
                .iter()
                .all(|q| p.x1 < q.x0 || q.x1 < p.x0 || p.y1 < q.y0 || q.y1 < p.y0);
            if clear {
                spot = Some((cx, cy, p));
                break;
            }
        }
        let Some((cx, cy, p)) = spot else { continue };
        let base = PALETTE[rng.random_range(0..PALETTE.len())];
        let color: Vec<f64> = base
            .iter()
            .map(|c| (c + rng.random_range(-config.color_jitter..=config.color_jitter)).clamp(0.35, 1.0))
            .collect();
        let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
        for y in p.y0..=p.y1 {
            for x in p.x0..=p.x1 {
                let u = (x as f64 + 0.5 - cx as f64) / r;
                let v = (y as f64 + 0.5 - cy as f64) / r;
                if covers(shape, filled, u, v) {
                    let o = (y * size + x) * 3;
                    px[o..o + 3].copy_from_slice(&color);
                    bx0 = bx0.min(x);
                    by0 = by0.min(y);
                    bx1 = bx1.max(x + 1);
                    by1 = by1.max(y + 1);
                }
            }
        }
        if bx0 == usize::MAX {
            continue;
        }
        let s = size as f64;
        annotations.push(Annotation {
            class_id: class,
            bbox: BBox {
                cx: (bx0 + bx1) as f64 / (2.0 * s),
                cy: (by0 + by1) as f64 / (2.0 * s),
                w: (bx1 - bx0) as f64 / s,
                h: (by1 - by0) as f64 / s,
            },
        });
        placed.push(p);
    }
    let bytes = px.iter().map(|v| (v * 255.0).round() as u8).collect();
    LabeledImage {
        id,
        image: Image::from_rgb8(size, size, bytes).expect("buffer sized from image_size"),
        annotations,
    }
}

//! Synthetic data, the on-disk dataset format, and episode sampling.

pub mod dataset;
pub mod sampler;
pub mod shapes;

pub use dataset::{read_png, write_png, FewShotDataset, Split};
pub use sampler::{build_finetune_set, EpisodeSampler, KShotSupportSet, Stage};
pub use shapes::{class_by_name, class_name, generate_scene, ShapeWorldConfig, NUM_CLASSES};

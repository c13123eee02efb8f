//! Few-shot object detection on synthetic shapes with a correlational
//! aggregation module that attends over several support classes at once.

pub mod cam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod matcher;
pub mod nn;
pub mod pipeline;
pub mod targetgen;
pub mod types;

pub use checkpoint::{Checkpoint, CheckpointManifest};
pub use config::RunConfig;
pub use detector::{Detector, ModelConfig};
pub use error::{Error, Result};
pub use types::{Annotation, BBox, ClassId, Detection, Episode, Image, LabeledImage, SupportExample};

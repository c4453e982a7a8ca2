//! Zero-shot point cloud segmentation with multi-modal visual data.
//!
//! The crate implements the full pipeline on top of its own reverse-mode
//! autodiff engine: toy point and image backbones, semantic-guided feature
//! enhancement, gated multi-modal fusion, semantic-visual alignment losses,
//! segmentation metrics, a deterministic synthetic scene benchmark, and a
//! reproducible trainer with binary checkpoints.

pub mod alignment;
pub mod backbones;
pub mod binio;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod semantic_space;
pub mod sgvf;
pub mod svfe;
pub mod synthscene;
pub mod tensor;
pub mod trainer;
pub mod verification;

pub use error::{Error, Result};

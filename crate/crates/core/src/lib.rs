//! Intra-scan contrastive pre-training for CT-like volumes, plus the analytics
//! that sit on top of the learned embeddings: retrieval, semantic search,
//! occlusion saliency, PCA colour maps and test-retest stability.
//!
//! Everything runs on the CPU at desk scale. Synthetic phantoms stand in for
//! real scans; see [`volume::generate_phantom`].

pub mod augment;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod objectives;
pub mod rng;
pub mod sampler;
pub mod semantics;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use grid::{Grid3, Shape3};
pub use volume::{SegmentationMask, Volume, WindowSpec};

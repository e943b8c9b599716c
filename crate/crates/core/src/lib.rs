//! Modality-erased / modality-related feature learning for mixed
//! visible-infrared retrieval, at desk scale.
//!
//! The crate is split the way the pipeline runs:
//!
//! - [`autodiff`]: a small define-by-run reverse-mode engine with a gradient
//!   reversal primitive.
//! - [`model`]: shared backbone, shared erased head, per-modality related
//!   heads and the three classifiers; checkpoint container.
//! - [`losses`]: every training objective and their weighted sum.
//! - [`synthgen`]: seeded synthetic visible/infrared feature populations.
//! - [`trainer`]: PK batch sampling, Adam with warm-up and step decay, the
//!   training loop.
//! - [`evalharness`]: gallery protocols, the modality-conditional distance
//!   rule, CMC/mAP/mINP and a brute-force oracle.
//! - [`miprobe`]: exhaustive discrete information measures, identity checks
//!   and post-hoc probes on learned embeddings.

pub mod autodiff;
pub mod evalharness;
pub mod losses;
pub mod miprobe;
pub mod model;
pub mod rng;
pub mod synthgen;
pub mod trainer;

pub use autodiff::{Tape, Tensor, Var};
pub use model::{EmbeddingRecord, MixerModel, ModelConfig};
pub use synthgen::{Dataset, GenConfig, Modality, Sample, Split};

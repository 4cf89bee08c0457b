//! Batch evaluation of how text-to-image models handle culturally iconic
//! image–text pairs.
//!
//! Recognition asks whether a model's generations resemble the reference
//! imagery at all ([`recognition`]). Realization asks how much of that
//! resemblance is patch-level copying ([`realization`]). The remaining
//! modules calibrate thresholds, validate the patch metric on synthetic
//! composites, measure prompt perturbations, and relate recognition to
//! reference-level features.

pub mod calibration;
pub mod correlation;
pub mod embedding;
pub mod error;
pub mod levels;
pub mod model;
pub mod perturbation;
pub mod pipeline;
pub mod realization;
pub mod recognition;
pub mod report;
pub mod stats;
pub mod synthetic;

pub use embedding::{cosine, max_similarity, read_embeddings, write_embeddings, EmbeddingKind, EmbeddingMatrix};
pub use error::{Error, Result};
pub use model::{Category, Manifest, Reference, Thresholds, Variant};
pub use pipeline::{run_pipeline, RunConfig, RunError};
pub use realization::{compute_crt, patch_reuse};
pub use recognition::{compute_cra, compute_crc, recognize, ReferenceBank};

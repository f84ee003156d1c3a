//! Dataset manifests, metadata vocabularies and class x metadata coverage.

mod manifest;
mod schema;
mod stats;

pub use manifest::{DatasetManifest, PatchRecord, MANIFEST_COLUMNS};
pub use schema::{Attribute, MetadataSchema, Vocabulary, UNKNOWN};
pub use stats::{coverage_matrix, summarize, CoverageMatrix, DatasetStats};

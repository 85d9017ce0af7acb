//! Discrete speech unit extraction from frame-level feature matrices.
//!
//! The pipeline fits a linear preprocessing transform (standardization, PCA,
//! whitening or ICA) on a sample of frames, clusters the transformed frames
//! with k-means under Euclidean or cosine distance, and turns the per-frame
//! cluster indices into compressed unit sequences (deduplication followed by
//! BPE). The [`analysis`] module holds the centroid and component studies.
//!
//! All fits are deterministic for a given input and seed, independent of the
//! number of worker threads.

pub mod analysis;
pub mod container;
pub mod data;
pub mod error;
pub mod kmeans;
pub mod linalg;
pub mod preprocess;
pub mod units;

pub use data::FeatureMatrix;
pub use error::{Error, Result};
pub use kmeans::{KMeansModel, Metric};
pub use preprocess::Transform;

//! Prototype-based unsupervised domain adaptation over frozen embeddings.
//!
//! Each domain is clustered with k-means and every centroid is represented
//! by its nearest real sample (a prototype). Target clusters inherit the
//! label of the closest source cluster, measured either between centroids
//! or as a debiased Sinkhorn divergence between member clouds, and queries
//! are classified by their nearest prototype.

pub mod distance;
pub mod embeddings;
pub mod error;
pub mod evaluate;
pub mod fingerprint;
pub mod kmeans;
pub mod mapping;
pub mod pipeline;
pub mod prototypes;
pub mod report;
pub mod runner;
pub mod sinkhorn;
pub mod synth;

pub use error::{Error, Result};

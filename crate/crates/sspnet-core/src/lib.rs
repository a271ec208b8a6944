//! Scale-selection pyramid detector components with a verification-first
//! bent: a toy feature extractor, context attention with hierarchical
//! heatmaps, residual scale gating, an intersection-gated top-down merge,
//! anchor clustering and supervision, attention/detection losses, weighted
//! negative sampling, AP/MR evaluation, a gradient-consistency analyzer,
//! and a synthetic-data training harness.

pub mod anchors;
pub mod backbone;
pub mod boxes;
pub mod cam;
pub mod data;
pub mod detector;
pub mod error;
pub mod grad_consistency;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod neck;
pub mod nn;
pub mod pgm;
pub mod rng;
pub mod wns;

pub use error::{Error, Result};

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

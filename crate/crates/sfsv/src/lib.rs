//! Sensitivity-aware low-rank compression of sequential networks.
//!
//! The pipeline estimates per-layer calibration statistics (input covariance
//! and a Fisher matrix of loss gradients at the layer output), whitens each
//! weight matrix with the resulting factors, truncates in the whitened space
//! where rank-k truncation is loss-optimal, and allocates ranks globally by
//! benefit-cost. Evaluation covers base losses, Sobolev (derivative-matching)
//! losses on periodic grids, and physics metrics for 2-D velocity fields.

pub mod allocation;
pub mod calibration;
pub mod compressor;
pub mod error;
pub mod fields;
pub mod linalg;
pub mod losses;
pub mod netcore;

pub use error::{Error, Result};

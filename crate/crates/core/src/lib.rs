//! Joint retrieval and part-based deformation of CAD-like source shapes
//! against partial, noisy point-cloud observations.
//!
//! The pipeline encodes a partial target, scores every database source with
//! a learned per-point residual field under many sampled full-shape
//! indicators, votes over the per-sample winners, and deforms the retrieved
//! sources part by part (center shift plus axis-aligned scaling).

pub mod autodiff;
pub mod deformation;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod nets;
pub mod occlusion;
pub mod retrieval;
pub mod rng;
pub mod shapes;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{Point3, PointCloud};

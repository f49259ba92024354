//! Multi-view neural SDF reconstruction at desk scale.
//!
//! A continuous scene field (per-view feature grids + MLP decoders) queried
//! at arbitrary 3D points, trained by differentiable volume rendering against
//! analytic CSG scenes, with Marching Cubes surface extraction and a full
//! reconstruction-evaluation suite.

pub mod autodiff;
pub mod cli;
pub mod field;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod render;
pub mod scenegen;
pub mod surface;
pub mod train;

pub use autodiff::{Tensor, TensorError};

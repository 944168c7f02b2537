//! Coarse-to-fine face reconstruction by direct optimization.
//!
//! The crate implements the full inverse-rendering stack at desk scale:
//!
//! - a linear morphable model with identity, expression and texture bases
//!   ([`model`]), plus a procedural toy model generator ([`synth`]);
//! - a weak-perspective camera ([`pose`]) and a differentiable z-buffer depth
//!   rasterizer with attribute rendering and a fixed-barycentric backward
//!   pass ([`raster`]);
//! - a shape-from-shading criterion with closed-form lighting and albedo
//!   recovery and an analytic depth gradient ([`sfs`]);
//! - optimization surrogates for the two reconstruction stages: a coarse
//!   representation fitter and a fine depth refiner ([`fit`]);
//! - depth-error metrics ([`eval`]), file formats ([`formats`]) and
//!   finite-difference gradient verification ([`gradcheck`]).
//!
//! Everything is deterministic: identical seeds produce bit-identical
//! outputs regardless of thread count.

pub mod error;
pub mod eval;
pub mod fit;
pub mod formats;
pub mod gradcheck;
pub mod model;
pub mod pose;
pub mod raster;
pub mod sfs;
pub mod synth;

pub use error::{Error, Result};

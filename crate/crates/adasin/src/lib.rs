//! Angular-margin losses on the unit hypersphere, with exact gradients,
//! a toy trainer, synthetic data generation, and verification tooling.
//!
//! The centerpiece is the adaptive sine-modulated margin loss ("adasin") and
//! the family it belongs to: plain softmax, SphereFace, CosFace, ArcFace,
//! MV-Arc-Softmax, and CurricularFace, all implemented against a shared
//! forward/backward interface in [`losses`]. [`trainer`] runs small SGD
//! experiments on data from [`data`]; [`eval`] scores verification protocols
//! and finite-difference-checks the analytical gradients; [`boundary`]
//! solves each method's decision boundary for plotting and analysis.

pub mod boundary;
pub mod cli;
pub mod data;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod textio;
pub mod trainer;

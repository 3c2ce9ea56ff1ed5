//! Submap alignment by probabilistic Procrustes mapping and joint refinement
//! of camera poses and 3D Gaussians with analytic pose gradients.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod joint;
pub mod metrics;
pub mod par;
pub mod ppm;
pub mod procrustes;
pub mod scalar;
pub mod submap;
pub mod splat;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Quat = geometry::UnitQuaternion<f64>;
pub type Pose = geometry::Se3Pose<f64>;
pub type Sim3 = geometry::Sim3Transform<f64>;
pub type Pairs = procrustes::PairedPoints<f64>;

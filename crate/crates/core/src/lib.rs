//! Part-centric heatmap triplets (HEMlets) for 3D human pose.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Tape arithmetic is fallible (shape checks), so it cannot use the operator traits.
#![allow(clippy::should_implement_trait)]

pub mod autodiff;
pub mod body;
pub mod container;
pub mod data_io;
pub mod error;
pub mod heatmap;
pub mod integral;
pub mod losses;
pub mod metrics;
pub mod skeleton;
pub mod synth;
pub mod toy;

pub use error::{Error, Result};

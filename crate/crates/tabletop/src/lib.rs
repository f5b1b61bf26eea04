//! Tabletop object recognition and orientation estimation.
//!
//! A from-scratch CNN stack (tensors, layers, RMSProp training,
//! checkpoints) plus the dataset tooling around it: mask preprocessing,
//! shift augmentation, a synthetic scene generator, PGM/CSV archives,
//! and SE(2) home-pose transforms.
//!
//! See the `examples/` directory for one runnable program per
//! capability, or the `tabletop` binary for the same operations as
//! subcommands.

pub mod dataset;
pub mod error;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

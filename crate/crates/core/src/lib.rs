//! Annihilating reflected diffusions across a flat interface: simulator, limit solvers and
//! the correlation hierarchy.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annihilation;
pub mod error;
pub mod geometry;
pub mod hierarchy;
pub mod linalg;
pub mod observable;
pub mod quadrature;
pub mod sim;
pub mod solvers;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};

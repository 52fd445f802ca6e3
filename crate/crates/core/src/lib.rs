//! Desk-scale training lab for mixing a labeled synthetic domain with an
//! unlabeled real domain: dynamic pseudo-labeling with DBSCAN and
//! reliability criteria, adaptive classifier initialization, and adversarial
//! domain-invariant feature learning with a domain balance loss.

pub mod cluster;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod rng;
pub mod synthgen;
#[cfg(any(test, feature = "oracles"))]
pub mod testing;
pub mod train;

pub use error::{Error, Result};

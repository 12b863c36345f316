//! Selberg's lower-bound sieve for irregular densities.
//!
//! The crate builds the lower-bound sieve weights for a configurable
//! multiplicative density, evaluates the sieve quadratic form both as a
//! double sum and in diagonalized form, verifies the regularity
//! assumptions the bound depends on, and applies the machinery to the
//! divisor-convolution sequence attached to a real Dirichlet character.
//! Brute-force oracles and exact-arithmetic cross-checks back every
//! computation at desk scale.

pub mod arith;
pub mod assumptions;
pub mod density;
pub mod error;
pub mod exact;
pub mod report;
pub mod selberg;
pub mod sequences;
pub mod util;

pub use error::{Error, Result};

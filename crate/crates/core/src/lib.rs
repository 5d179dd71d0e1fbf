//! Geodesic-expansion calculus on Riemannian manifolds and immersions.

#![allow(clippy::needless_range_loop)]

pub mod checks;
pub mod config;
pub mod deviation;
pub mod error;
pub mod field;
pub mod fit;
pub mod geodesic;
pub mod gauge;
pub mod geometry;
pub mod grid;
pub mod haar;
pub mod immersion;
pub mod manifold;
pub mod suite;
pub mod tensor;

pub use error::{GeoError, Result};

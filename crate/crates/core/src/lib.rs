//! Optimal control of the parametrized shallow water equations.
//!
//! A space-time finite-element solver for the full optimality system and a
//! POD-Galerkin reduced-order model with an offline/online split.

pub mod bench;
pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod operators;
pub mod pipeline;
pub mod pod;
pub mod rom;
pub mod spacetime;
pub mod sparse;
pub mod validate;

pub use error::{Error, Result};

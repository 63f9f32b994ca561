//! Numerical laboratory for fractal uncertainty estimates.
//!
//! The crate is organised by object: [`measures`] builds the atomic measures and
//! phases every other module consumes, [`cantor`] handles the discrete model,
//! [`discretization`] builds tile trees, [`regularity`] estimates the geometric
//! constants, [`dolgopyat`] evaluates the induction-on-scales quantities, [`fio`]
//! assembles oscillatory operators and [`schottky`] produces limit sets.

pub mod cantor;
pub mod cli;
pub mod discretization;
pub mod dolgopyat;
pub mod error;
pub mod fio;
pub mod linalg;
pub mod measures;
pub mod regularity;
pub mod schottky;

pub use error::{Budget, Error, Result};

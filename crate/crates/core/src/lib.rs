//! Exact p-adic computation of cyclotomic iterated sums and the p-adic
//! multi-zeta values they generate.
//!
//! The pipeline: exact arithmetic in `K = Q_p(zeta_M)` with certified
//! precision ([`field`], [`scalar`]), exact finite evaluation of the iterated
//! sum series ([`sums`]), recovery of per-class Taylor jets by p-adic
//! extrapolation ([`mps`]), regularization of the divergent series over the
//! `sigma_p` basis ([`regular`]), and the weight-by-weight Frobenius
//! constraint solver that emits the multi-zeta table ([`frobenius`]).

pub mod cache;
pub mod config;
pub mod error;
pub mod field;
pub mod frobenius;
pub mod limb;
pub mod linalg;
pub mod mps;
pub mod regular;
pub mod scalar;
pub mod sums;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use field::FieldContext;
pub use scalar::CycloScalar;
pub use sums::IterIndex;

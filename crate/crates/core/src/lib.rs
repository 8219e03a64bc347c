//! Asymptotic wave speeds of FKPP fronts on symmetric random metric trees.
//!
//! The pipeline runs from a random environment of degrees and edge lengths
//! ([`env`]) through the exit kernels of the projected skew diffusion
//! ([`kernel`]), the limit ratio of interface matrix products ([`mobius`]),
//! the Lyapunov exponent and its Legendre transform ([`lyapunov`]) to the
//! variational wave speed ([`speed`]). Monte Carlo ([`mcsim`]) and a
//! finite-difference front tracker ([`pde`]) provide independent checks.

// Negated comparisons such as `!(x > 0.0)` are used on purpose to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod env;
pub mod error;
pub mod kernel;
pub mod lyapunov;
pub mod mcsim;
pub mod mobius;
pub mod optimize;
pub mod pde;
pub mod report;
pub mod rng;
pub mod speed;
pub mod stats;

pub use env::{EnvBounds, EnvConfig, LengthLaw, TreeEnvironment};
pub use error::{Error, Result};

//! Data-driven NMPC with Gaussian-process state-space models and
//! Monte-Carlo back-off constraint tightening.
//!
//! The crate is organized bottom-up: dense linear algebra and special
//! functions ([`linalg`], [`special`], [`sobol`], [`rng`], [`stats`]),
//! single-output GP regression ([`gp`]), the multi-output state-space
//! model with exact trajectory sampling ([`statespace`]), the simulated
//! semi-batch photobioreactor ([`plant`]), the shooting NMPC ([`nmpc`]),
//! the back-off bisection ([`backoff`]), and pipeline orchestration
//! ([`pipeline`]).

pub mod backoff;
pub mod gp;
pub mod linalg;
pub mod neldermead;
pub mod nmpc;
pub mod pipeline;
pub mod plant;
pub mod rng;
pub mod sobol;
pub mod special;
pub mod statespace;
pub mod stats;

pub use linalg::Matrix;
pub use rng::RngStream;

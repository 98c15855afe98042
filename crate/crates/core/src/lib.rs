//! In-context temporal-difference learning with linear-attention transformers.
//!
//! The crate has three layers:
//!
//! * substrate: dense matrices, a pinned PRNG, weighted least squares
//!   ([`numerics`]), Markov reward processes and task generators ([`mrp`]),
//!   prompt construction ([`prompt`]);
//! * the transformer itself: masked linear/softmax attention ([`attention`]),
//!   the explicit weight constructions that make a forward pass execute TD(0),
//!   residual gradient, TD(lambda) and average-reward TD ([`constructions`]),
//!   reference iterative implementations of those algorithms ([`oracles`]),
//!   and hand-derived reverse-mode gradients ([`autodiff`]);
//! * experiments: multi-task TD pretraining ([`training`]), evaluation
//!   metrics ([`metrics`]) and the numerical verification suites ([`verify`]).

pub mod attention;
pub mod autodiff;
pub mod constructions;
pub mod error;
pub mod metrics;
pub mod mrp;
pub mod numerics;
pub mod oracles;
pub mod prompt;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::{Matrix, SeededRng};

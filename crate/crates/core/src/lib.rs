//! Decomposition-based neural solver for multi-objective combinatorial
//! optimization.
//!
//! The crate is `no_std` (with `alloc`) and covers the algorithmic side:
//!
//! - [`tensor`]: define-by-run reverse-mode differentiation and Adam.
//! - [`problems`]: MOTSP / MOCVRP / MOKP generators and step environments.
//! - [`decomposition`]: simplex-lattice weights and scalarization schemes.
//! - [`pareto`]: dominance, non-dominated archives and exact hypervolume.
//! - [`model`]: weight-conditioned attention policy with a gated-expert block.
//! - [`training`]: pairwise preference loss, REINFORCE and the training loop.
//! - [`inference`]: front construction with instance augmentation.
//!
//! File formats, persistence and the command line live in the companion
//! `moco` crate.

#![no_std]

extern crate alloc;

pub mod decomposition;
pub mod error;
pub mod inference;
pub mod math;
pub mod model;
pub mod pareto;
pub mod problems;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

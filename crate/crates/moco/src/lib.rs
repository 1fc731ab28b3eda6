//! Persistence, file formats and the `moco` command line for `moco-core`.

pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod formats;
pub mod gradcheck;

pub use error::{MocoError, Result};

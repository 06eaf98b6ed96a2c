//! Tiny recursive reasoning models: a small shared network applied over and
//! over to refine a latent state and an answer, trained with deep supervision.

pub mod ablate;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod plot;
pub mod recursion;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

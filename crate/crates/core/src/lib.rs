//! Selective subject-driven image generation on a procedural sprite world.
//!
//! The crate builds the whole stack from scratch: a reverse-mode autodiff
//! tensor engine, small neural blocks, a contrastively pretrained dual
//! encoder, a tiny pixel-space diffusion model, a query-driven subject
//! encoder that injects selected reference-image regions through parallel
//! cross-attention, staged training, and an oracle-based evaluation suite.

pub mod checkpoint;
pub mod clip;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod injection;
pub mod nn;
pub mod sprites;
pub mod pngio;
pub mod subject;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};

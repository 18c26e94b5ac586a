//! Cross-layer non-local (CNL) attention at desk scale.
//!
//! One deep query layer attends over several shallower response layers; the
//! affinity-weighted responses are projected back and added to the query.
//! This crate implements the differentiable forward/backward math of that
//! operation (and of the single-layer non-local block it generalizes),
//! declarative ResNet-style backbone specs with insertion presets, exact
//! parameter/FLOP/attention-memory accounting, and a small training harness
//! on a synthetic two-scale dataset.
//!
//! Start with the runnable examples (`cargo run --example <name>`); the `cnl`
//! binary exposes the same capabilities as subcommands.

pub mod analysis;
pub mod attention;
pub mod backbone;
pub mod cli;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

//! indlab: a numerical laboratory for the emergence of induction heads.
//!
//! The crate implements a minimal in-context-learning task, a two-layer
//! disentangled attention-only transformer with hand-rolled backprop, the
//! 19-coefficient structured weight subspace its training dynamics stay in,
//! the closed-form three-parameter gradient flow with emergence-time
//! detection and N-scaling, and a scaled-down standard transformer with an
//! interpretable weight transformation. The `indlab` binary exposes each
//! experiment as a subcommand.

pub mod cli;
pub mod data;
pub mod error;
pub mod flow;
pub mod matrix;
pub mod model;
pub mod pseudo;
pub mod reference;
pub mod seeding;
pub mod train;

pub use error::{Error, Result};

/// Lossless float formatting for CSV output: 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

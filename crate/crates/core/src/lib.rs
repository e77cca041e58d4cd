//! Budget-adaptive sparse expert execution for gated feed-forward layers.
//!
//! A dense SwiGLU-style layer is permuted into equal-width expert blocks
//! ([`moefication`]), a linear router selects experts per token by
//! cumulative softmax mass ([`routing`]), the router is distilled against
//! the all-expert output ([`training`]), and the resulting
//! sparsity/fidelity/compute trade-off is measured ([`analysis`], [`bench`]).

pub mod analysis;
pub mod bench;
pub mod bundle;
pub mod config;
pub mod error;
pub mod exec;
pub mod ffn;
pub mod moefication;
pub mod numkit;
pub mod routing;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;

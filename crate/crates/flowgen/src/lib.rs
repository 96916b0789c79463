//! Multi-flow infilling sequence-to-sequence framework at desk scale.
//!
//! The pipeline: build a vocabulary ([`vocab`]) and a statistical span
//! vocabulary ([`spans`]) from a corpus, assemble training examples with
//! fragment sampling and target noising ([`pipeline`]), train a
//! shared-parameter transformer with contextual, word-by-word, and
//! span-by-span attention flows ([`model`]), decode by step-wise `[ATTN]`
//! insertion ([`decode`]), and evaluate with ROUGE/BLEU/Distinct
//! ([`metrics`]). The [`harness`] module wires it all into runnable
//! subcommands.

pub mod corpus;
pub mod decode;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod spans;
pub mod vocab;

pub use error::{Error, Result};

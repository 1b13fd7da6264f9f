//! Two-stage speech-text alignment training testbed.
//!
//! The crate implements, end to end and in plain `f64`:
//!
//! - a dense-matrix / RNG / projection substrate ([`numerics`]),
//! - alignment objectives: hard-DTW with exact gradient and a brute-force
//!   oracle, CTC forward-backward with its own oracle, and cross-entropy
//!   ([`losses`]),
//! - a trainable modality adapter (LayerNorm -> CNN subsampler -> projection
//!   MLP) with analytic forward/backward and a cosine CTC head ([`adapter`]),
//! - a small frozen causal decoder that supplies the text-embedding table,
//!   decodes under task prompts, and reports analytic FLOPs ([`toyllm`]),
//! - a synthetic paired speech-text language with gold alignments plus a
//!   staged augment/filter/translate/synthesize pipeline ([`corpus`]),
//! - the training regimes under comparison with Adam, a FLOP ledger, and an
//!   evaluation loop ([`trainer`]),
//! - verification suites pairing every dynamic program and every backward
//!   pass with an independent oracle ([`oracle`]),
//! - a command-line front end ([`cli`]).

pub mod adapter;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod losses;
pub mod numerics;
pub mod oracle;
pub mod param;
pub mod toyllm;
pub mod trainer;

pub(crate) mod nn;

pub use error::{Error, Result};

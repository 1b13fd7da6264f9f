//! Command-line front end: corpus synthesis, training regimes, evaluation,
//! oracle suites, and 2D projection export.
//!
//! Every command resolves its configuration (file values overridden by
//! flags), echoes it to `<out>/config.echo.json` before doing any work, and
//! marks the output directory with `.incomplete` until it finishes, which
//! also locks the directory against concurrent runs. Exit codes: 0 success,
//! 1 oracle mismatch, 2 invalid flags or config, 3 I/O or format failure,
//! 4 non-finite loss.

mod commands;
mod config;

pub use commands::{run, Cli};
pub use config::OutputDir;

use crate::error::Error;

/// Map library errors onto the documented exit codes.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        Error::Io(_)
        | Error::Checkpoint(_)
        | Error::CheckpointShape { .. }
        | Error::CorpusSchema { .. }
        | Error::Pipeline(_) => 3,
        Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } => 4,
        _ => 2,
    }
}

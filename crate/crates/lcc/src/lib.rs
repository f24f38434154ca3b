//! File formats, reports and the subcommands behind the `lcc` binary.

pub mod ablate;
pub mod commands;
pub mod error;
pub mod eval;
pub mod format;
pub mod io;
pub mod verify;

pub use error::{exit, LccError, Result};

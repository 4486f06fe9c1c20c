//! File formats, the remote cue client, reports and the command-line
//! driver around `gazeward-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod mock;
pub mod remote;
pub mod report;

pub use error::{AppError, AppResult};

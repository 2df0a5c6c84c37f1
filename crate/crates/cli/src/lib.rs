//! Command-line front end for `fsod-core`: config loading, file I/O and the
//! subcommand pipelines.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod pipelines;

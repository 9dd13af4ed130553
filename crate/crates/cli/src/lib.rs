//! File formats, configuration loading and the acceptance suite for
//! `cfcredit`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod logs;
pub mod output;
pub mod policy_file;
pub mod verify;

pub use error::{CliError, Result};

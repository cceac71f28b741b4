//! Command-line pipeline: corpus simulation, training, reconstruction,
//! evaluation and the property suites.

pub mod commands;
pub mod config;
pub mod suites;

pub use config::{RawConfig, RunConfig};

use swarm_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_ARGUMENT: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Argument(_) => EXIT_ARGUMENT,
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } => EXIT_IO,
        Error::Numeric(_) => EXIT_NUMERIC,
    }
}

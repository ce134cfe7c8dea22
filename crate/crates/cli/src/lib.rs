//! Config-driven experiment runner behind the `tda` binary.

pub mod commands;
pub mod config;
pub mod report;

use tda_core::TdaError;

/// Exit status for a failed command: 3 numerical, 4 IO, 2 everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<TdaError>() {
            return if e.is_numerical() {
                3
            } else if e.is_io() {
                4
            } else {
                2
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    2
}

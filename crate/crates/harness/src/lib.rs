//! Command-line harness around `lcm-core`: configuration, synthetic data,
//! pretraining and fine-tuning drivers, cost benchmarks, the invariant
//! suite and the decoder ordering study.

pub mod bench;
pub mod config;
pub mod data;
pub mod finetune;
pub mod metrics;
pub mod pretrain;
pub mod propcheck;
pub mod study;

use lcm_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

//! Operator commands for the camouflage pipeline: dataset synthesis, model
//! training, the attack itself, evaluation and UV tooling, all driven by one
//! TOML run configuration.

pub mod commands;
pub mod config;

pub use commands::Session;
pub use config::{ConfigError, RunConfig};

/// Exit status for invalid configuration or arguments.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for failures while running a command.
pub const EXIT_RUNTIME: i32 = 3;

/// Maps an error to the documented exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<ConfigError>()) {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// One-line message for an error chain. Causes already quoted by the message
/// above them are skipped.
pub fn error_message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

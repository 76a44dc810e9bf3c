//! File formats and command implementations.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod trace;

pub use commands::{
    cmd_ablate, cmd_analyze_tokens, cmd_reweight, cmd_sweep, cmd_train, SummaryRow, TokenCount,
};
pub use config::RunConfig;
pub use trace::{parse_trace, write_trace};

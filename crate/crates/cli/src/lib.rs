//! Command-line pipelines over `interference-core`: simulate pageviews,
//! check identification, estimate counterfactual means and effects,
//! discover outcome parents, compare feature sets by held-out AUC and
//! summarize. Commands exchange CSV and JSON files in one output
//! directory, and each writes a `<command>.manifest.json` with the
//! resolved config and the digests of its inputs and outputs.

pub mod artifacts;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;

pub use cli::{Cli, Command, GlobalArgs};
pub use commands::run;
pub use config::{Resolved, RunConfig};
pub use error::{CliError, Result};

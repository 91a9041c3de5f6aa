//! Command-line front end for the `extrinsic` library.
//!
//! Every subcommand writes a CSV file whose leading `#` lines record the
//! configuration that produced it, followed by `# result.*` summary lines.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
pub mod config;

use std::io::Write;

pub use config::{parse_config, Command, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Clap(#[from] clap::Error),
    #[error(transparent)]
    Core(#[from] extrinsic::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Clap(e) => e.exit_code(),
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// Computes the CSV document for `cfg` on the current rayon pool.
pub fn render(cfg: &RunConfig) -> Result<String, CliError> {
    let table = commands::render(cfg)?;
    let mut out = format!("# extrinsic-cli {}\n", env!("CARGO_PKG_VERSION"));
    for (k, v) in cfg.metadata() {
        out.push_str(&format!("# {k}={v}\n"));
    }
    for (k, v) in &table.results {
        out.push_str(&format!("# result.{k}={v}\n"));
    }
    out.push_str(&table.header.join(","));
    out.push('\n');
    for row in &table.rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Runs `cfg` on a pool of `cfg.workers` threads and writes the CSV to
/// `cfg.out`, or to stdout.
pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    let csv = pool.install(|| render(cfg))?;
    match &cfg.out {
        Some(path) => std::fs::write(path, csv)?,
        None => std::io::stdout().lock().write_all(csv.as_bytes())?,
    }
    Ok(())
}

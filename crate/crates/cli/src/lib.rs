//! Scenario files, CSV output, parameter sweeps and the `densewlan` command.

pub mod format;
pub mod sweep;
pub mod table;
pub mod trace;

use std::path::Path;

use densewlan_core::{builtin_scenario, BuiltinName, Scenario, SimError};
use thiserror::Error;

/// Exit status for bad input: unreadable or invalid scenario, unknown names,
/// values that do not apply.
pub const EXIT_CONFIG: u8 = 2;
/// Exit status when the simulator detects a broken invariant.
pub const EXIT_INVARIANT: u8 = 3;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] format::FormatError),
    #[error(transparent)]
    Sweep(#[from] sweep::SweepError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn sim_exit(e: &SimError) -> u8 {
    match e {
        SimError::InvalidScenario(_) => EXIT_CONFIG,
        _ => EXIT_INVARIANT,
    }
}

impl Error {
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Format(_) => EXIT_CONFIG,
            Error::Sweep(sweep::SweepError::Run { source, .. }) => sim_exit(source),
            Error::Sweep(_) => EXIT_CONFIG,
            Error::Sim(e) => sim_exit(e),
            Error::Io { .. } | Error::Csv(_) => 1,
        }
    }
}

pub fn load_builtin(name: &str) -> Result<Scenario, Error> {
    let b: BuiltinName = name.parse().map_err(|e| Error::Config(format!("{e}")))?;
    Ok(builtin_scenario(b))
}

pub fn load_file(path: &Path) -> Result<Scenario, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    format::parse_scenario(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, Error> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
}

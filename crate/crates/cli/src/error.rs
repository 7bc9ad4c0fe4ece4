use std::io;
use std::path::PathBuf;

use pdmp_core::experiments::ExperimentError;
use pdmp_core::realdata::RealDataError;
use pdmp_core::simulate::SimulateError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Flags that parse but do not make sense together.
    #[error("{0}")]
    Usage(String),
    #[error("{}: file not found", path.display())]
    FileNotFound { path: PathBuf },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Domain(#[from] pdmp_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        let path = path.into();
        if source.kind() == io::ErrorKind::NotFound {
            CliError::FileNotFound { path }
        } else {
            CliError::Io { path, source }
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// Stable identifier for the stderr diagnostic.
    pub fn kind(&self) -> String {
        match self {
            CliError::Usage(_) => "UsageError".into(),
            CliError::FileNotFound { .. } => "FileNotFound".into(),
            CliError::Io { .. } => "IoError".into(),
            CliError::Json { .. } => "InvalidJson".into(),
            CliError::Csv(_) => "CsvError".into(),
            CliError::Domain(e) => domain_kind(e),
        }
    }
}

macro_rules! from_domain {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Domain(e.into())
            }
        }
    )*};
}

from_domain!(
    pdmp_core::model::ModelError,
    pdmp_core::theory::TheoryError,
    SimulateError,
    pdmp_core::estimators::EstimateError,
    ExperimentError,
    RealDataError
);

fn io_kind(e: &io::Error) -> String {
    if e.kind() == io::ErrorKind::NotFound {
        "FileNotFound".into()
    } else {
        "IoError".into()
    }
}

/// Innermost variant name of a library error, e.g. `HazardExhausted` for
/// `Simulate(HazardExhausted { .. })`.
fn domain_kind(e: &pdmp_core::Error) -> String {
    use pdmp_core::Error as E;
    match e {
        E::Simulate(SimulateError::Io(io))
        | E::Experiment(ExperimentError::Io(io))
        | E::RealData(RealDataError::Io(io)) => return io_kind(io),
        E::Simulate(SimulateError::Csv(_))
        | E::Experiment(ExperimentError::Csv(_))
        | E::RealData(RealDataError::Csv(_)) => return "CsvError".into(),
        E::Experiment(ExperimentError::Json(_)) | E::RealData(RealDataError::Json(_)) => {
            return "InvalidJson".into()
        }
        _ => {}
    }
    innermost_variant(&format!("{e:?}"))
}

/// Follows `Outer(Inner(Leaf { .. }))` in a derived `Debug` string.
fn innermost_variant(debug: &str) -> String {
    let mut rest = debug;
    loop {
        let end = rest
            .find(|c: char| !(c.is_alphanumeric() || c == '_'))
            .unwrap_or(rest.len());
        let ident = &rest[..end];
        match rest[end..].strip_prefix('(') {
            Some(inner) if inner.starts_with(|c: char| c.is_ascii_uppercase()) => rest = inner,
            _ => return ident.to_string(),
        }
    }
}

#[derive(Serialize)]
pub struct Diagnostic<'a> {
    pub kind: &'a str,
    pub message: String,
    pub exit_code: i32,
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use optodrive::asic::AsicError;
use optodrive::calibration::CalibrationError;
use optodrive::experiment::ExperimentError;
use optodrive::probe::ProbeError;
use optodrive::protocol::ProtocolError;
use optodrive::sequencer::SequenceError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("hardware fault: {0}")]
    Hardware(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Io { .. } => 2,
            CliError::Hardware(_) => 3,
        })
    }

    /// Prefix the message with where it came from.
    pub fn context(self, what: impl std::fmt::Display) -> Self {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{what}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{what}: {m}")),
            CliError::Hardware(m) => CliError::Hardware(format!("{what}: {m}")),
            io => CliError::Data(format!("{what}: {io}")),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<AsicError> for CliError {
    fn from(e: AsicError) -> Self {
        match e {
            AsicError::Faulted | AsicError::PoweredOff(_) => CliError::Hardware(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::Asic(a) => a.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<SequenceError> for CliError {
    fn from(e: SequenceError) -> Self {
        match e {
            SequenceError::Asic(a) => a.into(),
            SequenceError::Calibration(c) => c.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Sequence(s) => s.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

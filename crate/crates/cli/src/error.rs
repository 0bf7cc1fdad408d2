use crate::config::ConfigError;
use crate::ingest::IngestError;
use mnbr::estimation::FitError;
use mnbr::influence::InfluenceError;
use mnbr::numerics::NumericsError;
use mnbr::residuals::ResidualError;
use mnbr::simulation::SimulationError;
use thiserror::Error;

/// Exit status 2 for bad input, 3 when estimation fails to converge.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Usage(String),
    #[error("convergence failure: {0}")]
    Convergence(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) | CliError::Usage(_) => 2,
            CliError::Convergence(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Data(format!("config: {e}"))
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::MaxIterationsExceeded { .. } | FitError::Stalled { .. } | FitError::SingularInformation(_) => {
                CliError::Convergence(e.to_string())
            }
            FitError::InvalidOptions(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ResidualError> for CliError {
    fn from(e: ResidualError) -> Self {
        match e {
            ResidualError::NotConverged => CliError::Convergence(e.to_string()),
            ResidualError::Fit(f) => f.into(),
            ResidualError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<InfluenceError> for CliError {
    fn from(e: InfluenceError) -> Self {
        match e {
            InfluenceError::NotConverged | InfluenceError::Numerics(NumericsError::NotPositiveDefinite { .. }) => {
                CliError::Convergence(e.to_string())
            }
            InfluenceError::Fit(f) => f.into(),
            InfluenceError::InvalidArgument(_) | InfluenceError::SchemeInapplicable(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SimulationError> for CliError {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::AllReplicationsFailed { .. } => CliError::Convergence(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

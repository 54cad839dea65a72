use optfolio::compress::CompressError;
use optfolio::{MarketError, ReplicateError, SimError, UtilityError, VerifyError};
use thiserror::Error;

/// A failed command, grouped by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// 0 is success; 1 config, validation or I/O; 2 calibration; 3 verification.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Calibration(_) => 2,
            CliError::Verification(_) => 3,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
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

impl From<MarketError> for CliError {
    fn from(e: MarketError) -> Self {
        CliError::Config(format!("market: {e}"))
    }
}

impl From<CompressError> for CliError {
    fn from(e: CompressError) -> Self {
        match e {
            CompressError::Market(m) => m.into(),
            e => CliError::Config(format!("compress: {e}")),
        }
    }
}

impl From<UtilityError> for CliError {
    fn from(e: UtilityError) -> Self {
        match e {
            UtilityError::BadParameters(_) | UtilityError::Quadrature(_) => CliError::Config(format!("utility: {e}")),
            e => CliError::Calibration(e.to_string()),
        }
    }
}

impl From<ReplicateError> for CliError {
    fn from(e: ReplicateError) -> Self {
        match e {
            ReplicateError::Utility(u) => u.into(),
            ReplicateError::Market(m) => m.into(),
            ReplicateError::Compress(c) => c.into(),
            ReplicateError::Quadrature(q) => CliError::Config(format!("pde: {q}")),
            e @ ReplicateError::GrowthBoundViolated { .. } => CliError::Calibration(e.to_string()),
            e => CliError::Config(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Market(m) => m.into(),
            e @ SimError::DomainExit { .. } => CliError::Verification(e.to_string()),
            e => CliError::Config(format!("sim: {e}")),
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Sim(s) => s.into(),
            VerifyError::Replicate(r) => r.into(),
            VerifyError::Compress(c) => c.into(),
            VerifyError::Utility(u) => u.into(),
            VerifyError::Market(m) => m.into(),
            e @ VerifyError::NegativeGap(_) => CliError::Config(format!("verify: {e}")),
        }
    }
}

use thiserror::Error;

/// Errors raised by the estimation, calibration and evaluation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("degenerate slope: |theta_s| = {theta_s:e} is below threshold {threshold:e}")]
    DegenerateSlope { theta_s: f64, threshold: f64 },
    #[error("normal equations are numerically singular")]
    SingularDesign,
    #[error("utilities are not identifiable: {0}")]
    NonIdentifiable(String),
    #[error("no rank information: every compared pair is tied")]
    NoRankInformation,
}

impl CalibError {
    /// Short machine-readable tag, used as the failure flag in result tables.
    pub fn tag(&self) -> &'static str {
        match self {
            CalibError::Config(_) => "config",
            CalibError::Domain(_) => "domain",
            CalibError::Data(_) => "data",
            CalibError::DegenerateSlope { .. } => "degenerate_slope",
            CalibError::SingularDesign => "singular_design",
            CalibError::NonIdentifiable(_) => "non_identifiable",
            CalibError::NoRankInformation => "no_rank_information",
        }
    }
}

pub type Result<T, E = CalibError> = std::result::Result<T, E>;

pub(crate) fn check_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(CalibError::Config(format!(
            "{what}: expected dimension {expected}, got {got}"
        )));
    }
    Ok(())
}

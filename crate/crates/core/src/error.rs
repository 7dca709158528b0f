use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("spectral density is not normalized: (2/3)|g|_1 = {0}")]
    NotNormalized(f64),
    #[error("n_modes = {got} is below the minimum {min}")]
    TooFewModes { got: usize, min: usize },
    #[error("initial density has no finite support bound")]
    UnboundedSupport,
    #[error("dt too large: max pair rate * dt = {0:.4} exceeds 0.1")]
    DtTooLarge(f64),
    #[error("coefficient matrix loses positive semi-definiteness at {point:?} (min eigenvalue {min_eig:e})")]
    NotPsd { point: [f64; 3], min_eig: f64 },
    #[error("no convergence after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("domain too small: |u| next to the boundary is {ratio:e} of max |u|")]
    DomainTooSmall { ratio: f64 },
    #[error("compact set touches the outer boundary")]
    SetTouchesBoundary,
    #[error("CFL violation: dt = {dt:e} exceeds h^2/(6D) = {limit:e}")]
    Cfl { dt: f64, limit: f64 },
    #[error("negative density {0:e}")]
    NegativeDensity(f64),
    #[error("parameter `{0}` must be positive")]
    NonPositive(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidConfig(msg.into()))
}

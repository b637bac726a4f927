use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A domain invariant failed; the message names the invariant and index.
    #[error("{0}")]
    Invalid(String),

    #[error("feature matrix rank deficient (smallest singular value {smallest:e}, largest {largest:e})")]
    RankDeficient { smallest: f64, largest: f64 },

    #[error("enumeration cap exceeded: {count} items requested, cap is {cap}")]
    CapExceeded { count: u128, cap: u128 },

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("stationary distribution is not unique (eigenvalue {modulus} within 1e-8 of the unit eigenvalue)")]
    NonUniqueStationary { modulus: f64 },

    #[error("stationary distribution has zero mass at state-action index {index}")]
    ZeroMass { index: usize },

    #[error("certificate refused: {0}")]
    CertificateRefused(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("identity check failed: {what} (defect {defect:e} > {bound:e})")]
    IdentityViolated {
        what: &'static str,
        defect: f64,
        bound: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

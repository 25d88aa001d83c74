use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("spectral radius {rho} is not below 1 - {margin}")]
    SpectralRadius { rho: f64, margin: f64 },
    #[error("{what} did not converge (residual {residual:e} after {iters} iterations)")]
    Convergence {
        what: &'static str,
        residual: f64,
        iters: usize,
    },
    #[error("pair (A, B) appears not stabilizable: Riccati iterates diverged")]
    NotStabilizable,
    #[error("matrix is rank deficient: sigma_min = {sigma_min:e}")]
    RankDeficient { sigma_min: f64 },
    #[error("could not generate a valid system after {attempts} attempts")]
    Generation { attempts: usize },
    #[error("state norm {norm:e} exceeded the overflow guard at step {step}")]
    Divergence { norm: f64, step: usize },
    #[error("Sherman-Morrison denominator {denom:e} too small")]
    SingularUpdate { denom: f64 },
    #[error("insufficient data: need at least {needed} samples, have {have}")]
    InsufficientData { needed: usize, have: usize },
    #[error("batch has no recorded noise")]
    MissingNoise,
    #[error("backtracking shrank the stepsize below {min_eta:e}")]
    StepRejected { min_eta: f64 },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

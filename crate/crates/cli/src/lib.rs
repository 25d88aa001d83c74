//! Experiment runner behind the `deepo` binary.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiments;
pub mod output;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure{}: {source}", seed.map(|s| format!(" on seed {s}")).unwrap_or_default())]
    Numerical {
        seed: Option<u64>,
        #[source]
        source: deepo::Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn numerical(seed: u64) -> impl FnOnce(deepo::Error) -> CliError {
        move |source| CliError::Numerical {
            seed: Some(seed),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical { .. } => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<deepo::Error> for CliError {
    fn from(source: deepo::Error) -> Self {
        CliError::Numerical { seed: None, source }
    }
}

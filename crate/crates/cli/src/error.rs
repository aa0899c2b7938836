use std::io;
use std::path::PathBuf;

use csmart::data::DataError;
use csmart::design::DesignError;
use csmart::gee::GeeError;
use csmart::mean_model::MeanModelError;
use csmart::sim::SimError;
use csmart::working_cov::CovError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cli: cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("cli: cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("cli: bad config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("cli: bad artifact {path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error("cli: {0}")]
    Usage(String),
    #[error("trial-data: {0}")]
    Data(#[from] DataError),
    #[error("trial-data: dataset has {0} validation violation(s)")]
    Invalid(usize),
    #[error("smart-design: {0}")]
    Design(#[from] DesignError),
    #[error("mean-model: {0}")]
    MeanModel(#[from] MeanModelError),
    #[error("{}: {}", gee_module(.0), .0)]
    Gee(#[from] GeeError),
    #[error("sim-forge: {0}")]
    Sim(#[from] SimError),
}

fn gee_module(e: &GeeError) -> &'static str {
    match e {
        GeeError::MeanModel(_) => "mean-model",
        GeeError::Covariance(_) => "working-covariance",
        _ => "gee-engine",
    }
}

impl CliError {
    /// 1 for problems with the inputs, 2 when the numerics failed.
    pub fn exit_code(&self) -> u8 {
        let numerical = match self {
            CliError::Gee(e) => matches!(
                e,
                GeeError::RankDeficient(_)
                    | GeeError::ZeroVariance(_)
                    | GeeError::Covariance(CovError::NotPositiveDefinite { .. })
                    | GeeError::Covariance(CovError::DegenerateVariance { .. })
            ),
            CliError::Sim(e) => matches!(
                e,
                SimError::SingularUpsilon { .. }
                    | SimError::NotPositiveDefinite { .. }
                    | SimError::SingularGamma { .. }
                    | SimError::EmptyStratum { .. }
            ),
            _ => false,
        };
        if numerical {
            2
        } else {
            1
        }
    }
}

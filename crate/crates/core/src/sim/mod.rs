//! Trial generator for design II whose marginal mean and covariance under
//! every embedded cAI match a user-supplied target.

use nalgebra::DMatrix;
use thiserror::Error;

pub mod generate;
pub mod internals;
pub mod moments;
pub mod spec;
pub mod study;

pub use generate::{generate_trial, generate_trial_with_truth, Simulator};
pub use internals::{build_internals, PostInternals, PreInternals, SimInternals, SizeInternals};
pub use moments::{
    mc_conditional_moments, propensity_from_z, quadrature_conditional_moments, response_propensity,
    ConditionalEpsMoments, EpsMoments, MomentCache, MomentMethod, PreRegime,
};
pub use spec::{
    ArmPre, ByArm, ByCai, CovariateDist, CovariateLevel, CovariateSpec, PostBlock, PreResponse, ResponseModel,
    SimSpec, SizeMass, TargetStructure,
};
pub use study::{
    mc_study, replicate_seed, AnalysisMetrics, AnalysisSpec, ContrastKind, ReplicateOutcome, StudyContrast, StudyOptions,
    StudyReport,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),
    #[error("moment system is singular for a1 = {a1}, n = {n}, r = {r}")]
    SingularUpsilon { a1: i8, n: usize, r: u8 },
    #[error("{block} is not positive semi-definite (smallest eigenvalue {min_eig:.3e})")]
    NotPositiveDefinite { block: String, min_eig: f64 },
    #[error("no probability mass in stratum n = {n}, r = {r}")]
    EmptyStratum { n: usize, r: u8 },
    #[error("at least 10000 Monte Carlo draws are required, got {0}")]
    TooFewReps(usize),
    #[error("mean-offset system is singular for n = {n}")]
    SingularGamma { n: usize },
    #[error("moment cache: {0}")]
    Cache(String),
    #[error("analysis failed: {0}")]
    Analysis(String),
}

/// Square root factor `L` with `L Lᵀ = m` for a positive semi-definite `m`.
///
/// Eigenvalues slightly below zero (relative to the largest) are treated as
/// rounding and clamped; clearly negative ones are an error.
pub(crate) fn psd_factor(m: &DMatrix<f64>, block: impl FnOnce() -> String) -> Result<DMatrix<f64>, SimError> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-9 * scale {
        return Err(SimError::NotPositiveDefinite { block: block(), min_eig: min });
    }
    let mut l = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        l.column_mut(j).scale_mut(s);
    }
    Ok(l)
}

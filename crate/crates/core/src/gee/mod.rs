//! Weighted estimating-equation fitting, sandwich covariance, estimated
//! weights, finite-sample adjustments and Wald inference.

mod engine;
mod wald;
mod weights;

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TrialDataset;
use crate::design::{design_weight, EmbeddedCai};
use crate::mean_model::{MeanModelError, MeanModelSpec, ThetaEstimate};
use crate::working_cov::{estimate_alpha, AlphaEstimate, Corr, CovError, WorkingCovSpec};

pub use engine::Prepared;
pub use wald::{wald_test, Reference, WaldResult};
pub use weights::{estimate_weight_model, LogisticFit, StageTwoModel, WeightModel, WeightSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeeError {
    #[error(transparent)]
    MeanModel(#[from] MeanModelError),
    #[error(transparent)]
    Covariance(#[from] CovError),
    #[error("rank deficient: {0}")]
    RankDeficient(String),
    #[error("no cluster is consistent with embedded cAI {0}")]
    NoConsistentCluster(EmbeddedCai),
    #[error("mean model is for design {model:?} but data follow design {data:?}")]
    DesignMismatch { model: crate::design::DesignKind, data: crate::design::DesignKind },
    #[error("dataset grid differs from the mean model grid")]
    GridMismatch,
    #[error("dataset has no clusters")]
    EmptyDataset,
    #[error("weight vector has {got} entries for {want} clusters")]
    WeightLength { got: usize, want: usize },
    #[error("weights must be finite and positive")]
    BadWeight,
    #[error("weight covariate '{0}' is not a cluster-level column")]
    UnknownWeightCovariate(String),
    #[error("contrast variance is not positive ({0:e})")]
    ZeroVariance(f64),
    #[error("contrast has {got} entries, model has {want} parameters")]
    ContrastLength { got: usize, want: usize },
    #[error("confidence level must lie in (0, 1), got {0}")]
    BadLevel(f64),
}

/// Finite-sample adjustments, each independently toggleable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Adjustments {
    /// Clamp every correlation estimate at zero, then refit θ once.
    pub enforce_nonneg_corr: bool,
    /// Student t reference with `N − p` degrees of freedom.
    pub t_reference: bool,
    /// Leverage-corrected residuals in the sandwich meat.
    pub bias_correct: bool,
}

impl Adjustments {
    pub const fn all() -> Self {
        Self { enforce_nonneg_corr: true, t_reference: true, bias_correct: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppliedAdjustment {
    EnforceNonnegCorr,
    TReference,
    BiasCorrect,
    EstimatedWeightCorrection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub tolerance: f64,
    pub max_iter: usize,
    pub weights: WeightSpec,
    pub adjustments: Adjustments,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iter: 50, weights: WeightSpec::DesignKnown, adjustments: Adjustments::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    DesignKnown,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: ThetaEstimate,
    pub alpha: AlphaEstimate,
    /// `p × p` sandwich covariance of θ̂.
    pub sigma_theta: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub max_delta: f64,
    pub weight_mode: WeightMode,
    pub adjustments_applied: Vec<AppliedAdjustment>,
    pub n_clusters: usize,
    /// Degrees of freedom of the t reference, when requested.
    pub df: Option<f64>,
    /// `‖(1/N) Σ_i U_i(θ̂)‖∞` under the working covariance θ̂ solves.
    pub root_norm: f64,
    /// `1 + ‖Ȳ‖∞`, the scale of the root certificate.
    pub root_scale: f64,
    /// True when θ̂ solves the equation under the identity working covariance
    /// rather than under `alpha`.
    pub identity_v: bool,
    /// Residuals were identically zero after the first solve.
    pub exact_fit: bool,
    pub notes: Vec<String>,
}

/// Tolerance factor of the root certificate.
pub const ROOT_TOLERANCE: f64 = 1e-8;

impl FitResult {
    pub fn sigma_matrix(&self) -> DMatrix<f64> {
        let p = self.sigma_theta.len();
        DMatrix::from_fn(p, p, |i, j| self.sigma_theta[i][j])
    }

    pub fn theta_vec(&self) -> Vec<f64> {
        self.theta.to_vec()
    }

    pub fn root_certified(&self) -> bool {
        self.root_norm < ROOT_TOLERANCE * self.root_scale
    }

    pub fn reference(&self) -> Reference {
        match self.df {
            Some(df) => Reference::StudentT(df),
            None => Reference::Normal,
        }
    }

    /// Standard errors, the square roots of the diagonal of `sigma_theta`.
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.sigma_theta.len()).map(|i| self.sigma_theta[i][i].max(0.0).sqrt()).collect()
    }
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Solves the weighted estimating equation once for a fixed working covariance.
pub fn solve_theta(
    ds: &TrialDataset,
    spec: &MeanModelSpec,
    alpha: &AlphaEstimate,
    weights: &[f64],
) -> Result<ThetaEstimate, GeeError> {
    let ctx = Prepared::new(ds, spec)?;
    check_weights(weights, ctx.n_clusters())?;
    let vinv = ctx.factorize(alpha)?;
    let theta = ctx.solve(&vinv, weights)?;
    Ok(ThetaEstimate::from_vector(spec, theta.as_slice()))
}

fn check_weights(w: &[f64], n: usize) -> Result<(), GeeError> {
    if w.len() != n {
        return Err(GeeError::WeightLength { got: w.len(), want: n });
    }
    if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(GeeError::BadWeight);
    }
    Ok(())
}

/// Known-probability weights for every cluster.
pub fn design_weights(ds: &TrialDataset) -> Vec<f64> {
    ds.clusters.iter().map(|c| design_weight(c, &ds.design)).collect()
}

fn resolve_weights(ds: &TrialDataset, spec: &WeightSpec) -> Result<(Vec<f64>, Option<WeightModel>), GeeError> {
    match spec {
        WeightSpec::DesignKnown => Ok((design_weights(ds), None)),
        WeightSpec::Estimated { stage1_covariates, stage2_covariates } => {
            let wm = estimate_weight_model(ds, stage1_covariates, stage2_covariates)?;
            Ok((wm.weights.clone(), Some(wm)))
        }
    }
}

/// Outcome of the alternating θ/α iteration before any sandwich work.
struct Iterate {
    theta: DVector<f64>,
    alpha: AlphaEstimate,
    v_alpha: AlphaEstimate,
    iterations: usize,
    converged: bool,
    max_delta: f64,
    exact_fit: bool,
    identity_v: bool,
}

fn run_algorithm(
    ctx: &Prepared,
    cov_spec: &WorkingCovSpec,
    weights: &[f64],
    tolerance: f64,
    max_iter: usize,
) -> Result<Iterate, GeeError> {
    let identity = AlphaEstimate::identity(ctx.cais(), ctx.n_times());
    let vinv = ctx.factorize(&identity)?;
    let theta0 = ctx.solve(&vinv, weights)?;

    if ctx.max_abs_residual(&theta0) <= 1e-10 * ctx.root_scale() {
        let nt = ctx.n_times();
        let zero = AlphaEstimate {
            sigma2: vec![vec![0.0; nt]; ctx.cais().len()],
            rho_w: vec![Corr::Independent; ctx.cais().len()],
            rho_b: vec![Corr::Independent; ctx.cais().len()],
            ..identity.clone()
        };
        return Ok(Iterate {
            theta: theta0,
            alpha: zero,
            v_alpha: identity,
            iterations: 0,
            converged: true,
            max_delta: 0.0,
            exact_fit: true,
            identity_v: true,
        });
    }

    if !tolerance.is_finite() {
        let alpha0 = estimate_alpha(&ctx.residual_set(&theta0, weights), cov_spec)?;
        return Ok(Iterate {
            theta: theta0,
            alpha: alpha0,
            v_alpha: identity,
            iterations: 0,
            converged: true,
            max_delta: 0.0,
            exact_fit: false,
            identity_v: true,
        });
    }

    let mut theta = theta0;
    let mut last_alpha = identity;
    let mut max_delta = f64::INFINITY;
    for k in 1..=max_iter.max(1) {
        let alpha = estimate_alpha(&ctx.residual_set(&theta, weights), cov_spec)?;
        let vinv = ctx.factorize(&alpha)?;
        let next = ctx.solve(&vinv, weights)?;
        max_delta = (&next - &theta).amax();
        theta = next;
        last_alpha = alpha;
        if max_delta < tolerance {
            return Ok(Iterate {
                theta,
                alpha: last_alpha.clone(),
                v_alpha: last_alpha,
                iterations: k,
                converged: true,
                max_delta,
                exact_fit: false,
                identity_v: false,
            });
        }
    }
    Ok(Iterate {
        theta,
        alpha: last_alpha.clone(),
        v_alpha: last_alpha,
        iterations: max_iter.max(1),
        converged: false,
        max_delta,
        exact_fit: false,
        identity_v: false,
    })
}

/// Algorithm-1 fit: start from the identity working covariance and alternate
/// residuals, α̂ and θ̂ until successive θ̂ agree to `tolerance`.
pub fn fit(
    ds: &TrialDataset,
    mean_spec: &MeanModelSpec,
    cov_spec: &WorkingCovSpec,
    options: &FitOptions,
) -> Result<FitResult, GeeError> {
    let ctx = Prepared::new(ds, mean_spec)?;
    let (weights, wm) = resolve_weights(ds, &options.weights)?;
    check_weights(&weights, ctx.n_clusters())?;
    let it = run_algorithm(&ctx, cov_spec, &weights, options.tolerance, options.max_iter)?;
    finish(&ctx, mean_spec, it, &weights, wm.as_ref(), &options.adjustments)
}

/// Re-applies finite-sample adjustments to an existing fit of the same data.
pub fn finite_sample_adjust(
    ds: &TrialDataset,
    mean_spec: &MeanModelSpec,
    fit: &FitResult,
    weights: &WeightSpec,
    adjustments: &Adjustments,
) -> Result<FitResult, GeeError> {
    let ctx = Prepared::new(ds, mean_spec)?;
    let (w, wm) = resolve_weights(ds, weights)?;
    check_weights(&w, ctx.n_clusters())?;
    let v_alpha = if fit.identity_v { AlphaEstimate::identity(ctx.cais(), ctx.n_times()) } else { fit.alpha.clone() };
    let it = Iterate {
        theta: DVector::from_vec(fit.theta_vec()),
        alpha: fit.alpha.clone(),
        v_alpha,
        iterations: fit.iterations,
        converged: fit.converged,
        max_delta: fit.max_delta,
        exact_fit: fit.exact_fit,
        identity_v: fit.identity_v,
    };
    finish(&ctx, mean_spec, it, &w, wm.as_ref(), adjustments)
}

fn finish(
    ctx: &Prepared,
    mean_spec: &MeanModelSpec,
    mut it: Iterate,
    weights: &[f64],
    wm: Option<&WeightModel>,
    adj: &Adjustments,
) -> Result<FitResult, GeeError> {
    let mut applied = Vec::new();
    let mut notes = Vec::new();
    let n = ctx.n_clusters();
    let p = mean_spec.n_params();

    if adj.enforce_nonneg_corr && !it.exact_fit {
        applied.push(AppliedAdjustment::EnforceNonnegCorr);
        let (clamped, changed) = it.alpha.clamp_nonnegative();
        if changed {
            let vinv = ctx.factorize(&clamped)?;
            it.theta = ctx.solve(&vinv, weights)?;
            it.alpha = clamped.clone();
            it.v_alpha = clamped;
            it.identity_v = false;
            notes.push("negative correlation estimates clamped at zero and θ refit".into());
        }
    }
    if it.alpha.clipped {
        notes.push("raw correlation estimate outside [-1, 1] clamped".into());
    }
    if it.v_alpha.clip_active() {
        notes.push("correlations clipped to ±(1 - 1e-8) when assembling V".into());
    }
    if !it.converged {
        notes.push(format!("did not converge within the iteration limit (last change {:e})", it.max_delta));
    }

    let vinv = ctx.factorize(&it.v_alpha)?;
    let root_norm = ctx.root_norm(&vinv, &it.theta, weights);

    let sigma = if it.exact_fit {
        notes.push("residuals identically zero; sandwich covariance is zero".into());
        DMatrix::zeros(p, p)
    } else {
        if adj.bias_correct {
            applied.push(AppliedAdjustment::BiasCorrect);
        }
        let scores = ctx.scores(&vinv, &it.theta, weights, adj.bias_correct)?;
        if scores.fallbacks > 0 {
            notes.push(format!("leverage correction skipped for {} singular cluster blocks", scores.fallbacks));
        }
        let mut q = ctx.meat(&scores.u);
        if let Some(wm) = wm {
            if wm.scores.first().is_some_and(|s| s.len() > 0) {
                q = engine::project_out_scores(&q, &scores.u, &wm.scores, &ctx.order())?;
                applied.push(AppliedAdjustment::EstimatedWeightCorrection);
            }
            let fb = wm.fallback_cells();
            if !fb.is_empty() {
                notes.push(format!("weight model fell back to design probabilities for {}", fb.join(", ")));
            }
        }
        ctx.sandwich(&vinv, weights, &q)?
    };

    let df = if adj.t_reference {
        applied.push(AppliedAdjustment::TReference);
        Some((n as f64 - p as f64).max(1.0))
    } else {
        None
    };

    Ok(FitResult {
        theta: ThetaEstimate::from_vector(mean_spec, it.theta.as_slice()),
        alpha: it.alpha,
        sigma_theta: to_rows(&sigma),
        iterations: it.iterations,
        converged: it.converged,
        max_delta: it.max_delta,
        weight_mode: if wm.is_some() { WeightMode::Estimated } else { WeightMode::DesignKnown },
        adjustments_applied: applied,
        n_clusters: n,
        df,
        root_norm,
        root_scale: ctx.root_scale(),
        identity_v: it.identity_v,
        exact_fit: it.exact_fit,
        notes,
    })
}

/// Sandwich pieces of a fit, exposed for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct SandwichParts {
    pub j: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Score-projected meat; equal to `q` for known weights.
    pub q_corrected: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
}

/// Recomputes `Ĵ`, `Q̂` (raw and score-corrected) and `Σ̂` at a fitted θ̂.
pub fn sandwich_parts(
    ds: &TrialDataset,
    mean_spec: &MeanModelSpec,
    fit: &FitResult,
    weights: &WeightSpec,
    bias_correct: bool,
) -> Result<SandwichParts, GeeError> {
    let ctx = Prepared::new(ds, mean_spec)?;
    let (w, wm) = resolve_weights(ds, weights)?;
    let v_alpha = if fit.identity_v { AlphaEstimate::identity(ctx.cais(), ctx.n_times()) } else { fit.alpha.clone() };
    let vinv = ctx.factorize(&v_alpha)?;
    let theta = DVector::from_vec(fit.theta_vec());
    let scores = ctx.scores(&vinv, &theta, &w, bias_correct)?;
    let q = ctx.meat(&scores.u);
    let q_corrected = match &wm {
        Some(wm) if wm.scores.first().is_some_and(|s| s.len() > 0) => {
            engine::project_out_scores(&q, &scores.u, &wm.scores, &ctx.order())?
        }
        _ => q.clone(),
    };
    let j = ctx.bread(&vinv, &w);
    let sigma = ctx.sandwich(&vinv, &w, &q_corrected)?;
    Ok(SandwichParts { j, q, q_corrected, sigma })
}

/// Per-(cAI, time) weighted means over consistent clusters' individuals,
/// `Σ_i I_i(d) W_i Σ_j Y_ijt / Σ_i I_i(d) W_i n_i`.
pub fn weighted_cell_means(ds: &TrialDataset, weights: &[f64]) -> HashMap<(EmbeddedCai, usize), f64> {
    let kind = ds.design.kind();
    let mut out = HashMap::new();
    for d in crate::design::enumerate_cais(kind) {
        for t in 0..ds.grid.len() {
            let (mut num, mut den) = (0.0, 0.0);
            for (c, w) in ds.clusters.iter().zip(weights) {
                if crate::design::consistency_indicator(c, &d, kind) == 1 {
                    num += w * c.individuals.iter().map(|ind| ind.y[t]).sum::<f64>();
                    den += w * c.size() as f64;
                }
            }
            out.insert((d, t), num / den);
        }
    }
    out
}

//! Marginal mean models `μ_t(d, X; θ)`, their design rows and the contrast
//! vectors for the built-in estimands.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ClusterRecord, TimeGrid};
use crate::design::{enumerate_cais, DesignKind, EmbeddedCai, SmartDesign};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeanModelError {
    #[error("cAI {cai} is not embedded in design {design:?}")]
    UnknownCai { cai: EmbeddedCai, design: DesignKind },
    #[error("time {t} lies outside the grid [{first}, {last}]")]
    TimeOutOfRange { t: f64, first: f64, last: f64 },
    #[error("contrast requires two distinct cAIs, got {0} twice")]
    IdenticalCais(EmbeddedCai),
    #[error("custom basis has no quadrature enabled, AUC contrast unavailable")]
    NonIntegrableBasis,
    #[error("the {0} basis needs a knot on the time grid")]
    MissingKnot(&'static str),
    #[error("square-root basis needs nonnegative times, grid starts at {0}")]
    NegativeTime(f64),
    #[error("expected {expected} covariate values, got {got}")]
    CovariateLength { expected: usize, got: usize },
    #[error("covariate '{0}' is not a column of the dataset")]
    UnknownCovariate(String),
    #[error("custom basis needs at least one function")]
    EmptyBasis,
}

pub type BasisFn = Arc<dyn Fn(f64, &EmbeddedCai) -> f64 + Send + Sync>;

/// User-supplied basis: one function of `(t, d)` per causal parameter.
#[derive(Clone)]
pub struct CustomBasis {
    names: Vec<String>,
    funcs: Vec<BasisFn>,
    quadrature: bool,
}

impl CustomBasis {
    pub fn new(names: Vec<String>, funcs: Vec<BasisFn>) -> Result<Self, MeanModelError> {
        if funcs.is_empty() || names.len() != funcs.len() {
            return Err(MeanModelError::EmptyBasis);
        }
        Ok(Self { names, funcs, quadrature: false })
    }

    /// Enables composite Simpson quadrature for AUC contrasts.
    pub fn with_quadrature(mut self, enabled: bool) -> Self {
        self.quadrature = enabled;
        self
    }

    /// Saturated cAI means with no time dependence: `[1, a1, a2, a1·a2]`,
    /// absent second-stage slots counting as zero. Meant for single-time data.
    pub fn saturated_static() -> Self {
        let a2 = |d: &EmbeddedCai| f64::from(d.a2nr.unwrap_or(0));
        let funcs: Vec<BasisFn> = vec![
            Arc::new(|_, _| 1.0),
            Arc::new(|_, d| f64::from(d.a1)),
            Arc::new(move |_, d| a2(d)),
            Arc::new(move |_, d| f64::from(d.a1) * a2(d)),
        ];
        let names = ["intercept", "a1", "a2", "a1:a2"].map(String::from).to_vec();
        Self { names, funcs, quadrature: true }
    }
}

impl fmt::Debug for CustomBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomBasis").field("names", &self.names).field("quadrature", &self.quadrature).finish()
    }
}

#[derive(Debug, Clone)]
pub enum Basis {
    /// Piecewise linear in `t` with a knot at the second decision point.
    PiecewiseLinear,
    /// Same structure in `√t`.
    PiecewiseSqrt,
    Custom(CustomBasis),
}

impl Basis {
    fn label(&self) -> &'static str {
        match self {
            Basis::PiecewiseLinear => "piecewise-linear",
            Basis::PiecewiseSqrt => "piecewise-sqrt",
            Basis::Custom(_) => "custom",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MeanModelSpec {
    pub basis: Basis,
    pub design: SmartDesign,
    pub grid: TimeGrid,
    /// Covariates entering linearly through η, in coefficient order.
    pub covariate_terms: Vec<String>,
}

/// Where each covariate term is read from in a cluster record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateSource {
    Cluster(usize),
    Individual(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub gamma: Vec<f64>,
    pub eta: Vec<f64>,
    pub names: Vec<String>,
}

impl ThetaEstimate {
    pub fn from_vector(spec: &MeanModelSpec, theta: &[f64]) -> Self {
        let q = spec.n_causal();
        Self { gamma: theta[..q].to_vec(), eta: theta[q..].to_vec(), names: spec.parameter_names() }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.gamma.iter().chain(&self.eta).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.gamma.len() + self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastVector {
    pub c: Vec<f64>,
    pub label: String,
}

impl ContrastVector {
    pub fn dot(&self, theta: &[f64]) -> f64 {
        self.c.iter().zip(theta).map(|(a, b)| a * b).sum()
    }
}

/// Pieces of a piecewise row: intercept multiplier, first-segment term and
/// second-segment term. Integrating a row only changes these three numbers.
struct Segments {
    one: f64,
    pre: f64,
    post: f64,
}

fn causal_row(kind: DesignKind, d: &EmbeddedCai, s: Segments) -> Vec<f64> {
    let a1 = f64::from(d.a1);
    let a2nr = f64::from(d.a2nr.unwrap_or(0));
    let a2r = f64::from(d.a2r.unwrap_or(0));
    let mut row = vec![s.one, s.pre, a1 * s.pre, s.post, a1 * s.post];
    match kind {
        DesignKind::II | DesignKind::IV => {
            row.extend([a2nr * s.post, a1 * a2nr * s.post]);
        }
        DesignKind::I => {
            row.extend([a2r * s.post, a2nr * s.post, a1 * a2r * s.post, a1 * a2nr * s.post]);
        }
        DesignKind::III => {
            let on = if d.a1 == 1 { 1.0 } else { 0.0 };
            row.push(a2nr * on * s.post);
        }
    }
    row
}

fn piecewise_count(kind: DesignKind) -> usize {
    match kind {
        DesignKind::II | DesignKind::IV => 7,
        DesignKind::I => 9,
        DesignKind::III => 6,
    }
}

const SIMPSON_PANELS: usize = 1024;

impl MeanModelSpec {
    pub fn new(
        basis: Basis,
        design: SmartDesign,
        grid: TimeGrid,
        covariate_terms: Vec<String>,
    ) -> Result<Self, MeanModelError> {
        match &basis {
            Basis::PiecewiseLinear | Basis::PiecewiseSqrt if grid.knot().is_none() => {
                return Err(MeanModelError::MissingKnot(basis.label()));
            }
            Basis::PiecewiseSqrt if grid.first() < 0.0 => return Err(MeanModelError::NegativeTime(grid.first())),
            _ => {}
        }
        Ok(Self { basis, design, grid, covariate_terms })
    }

    pub fn kind(&self) -> DesignKind {
        self.design.kind()
    }

    /// Number of causal parameters γ.
    pub fn n_causal(&self) -> usize {
        match &self.basis {
            Basis::PiecewiseLinear | Basis::PiecewiseSqrt => piecewise_count(self.kind()),
            Basis::Custom(c) => c.funcs.len(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_causal() + self.covariate_terms.len()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let gamma: Vec<String> = match &self.basis {
            Basis::Custom(c) => c.names.clone(),
            _ => (0..self.n_causal()).map(|k| format!("gamma_{k}")).collect(),
        };
        gamma.into_iter().chain(self.covariate_terms.iter().map(|n| format!("eta[{n}]"))).collect()
    }

    fn check_cai(&self, d: &EmbeddedCai) -> Result<(), MeanModelError> {
        if enumerate_cais(self.kind()).contains(d) {
            Ok(())
        } else {
            Err(MeanModelError::UnknownCai { cai: *d, design: self.kind() })
        }
    }

    fn check_time(&self, t: f64) -> Result<(), MeanModelError> {
        let (first, last) = (self.grid.first(), self.grid.last());
        if t >= first && t <= last {
            Ok(())
        } else {
            Err(MeanModelError::TimeOutOfRange { t, first, last })
        }
    }

    fn transform(&self, t: f64) -> f64 {
        match self.basis {
            Basis::PiecewiseSqrt => t.sqrt(),
            _ => t,
        }
    }

    fn knot(&self) -> Result<f64, MeanModelError> {
        self.grid.knot().ok_or(MeanModelError::MissingKnot(self.basis.label()))
    }

    /// Causal part of the design row, without range checks.
    fn gamma_row(&self, d: &EmbeddedCai, t: f64) -> Vec<f64> {
        match &self.basis {
            Basis::Custom(c) => c.funcs.iter().map(|f| f(t, d)).collect(),
            _ => {
                let knot = self.grid.knot().expect("piecewise basis carries a knot");
                let pre = self.transform(t.min(knot));
                let post = if t > knot { self.transform(t) - self.transform(knot) } else { 0.0 };
                causal_row(self.kind(), d, Segments { one: 1.0, pre, post })
            }
        }
    }

    /// `∂μ/∂θ` at `(d, x, t)`; covariates `x` are ordered as `covariate_terms`.
    pub fn design_row(&self, d: &EmbeddedCai, x: &[f64], t: f64) -> Result<Vec<f64>, MeanModelError> {
        self.check_cai(d)?;
        self.check_time(t)?;
        if x.len() != self.covariate_terms.len() {
            return Err(MeanModelError::CovariateLength { expected: self.covariate_terms.len(), got: x.len() });
        }
        let mut row = self.gamma_row(d, t);
        row.extend_from_slice(x);
        Ok(row)
    }

    pub fn mu(&self, d: &EmbeddedCai, x: &[f64], t: f64, theta: &ThetaEstimate) -> Result<f64, MeanModelError> {
        let row = self.design_row(d, x, t)?;
        Ok(row.iter().zip(theta.gamma.iter().chain(&theta.eta)).map(|(a, b)| a * b).sum())
    }

    /// Resolves covariate names against a dataset's column lists.
    pub fn bind_covariates(
        &self,
        cluster_names: &[String],
        individual_names: &[String],
    ) -> Result<Vec<CovariateSource>, MeanModelError> {
        self.covariate_terms
            .iter()
            .map(|name| {
                if let Some(i) = cluster_names.iter().position(|n| n == name) {
                    Ok(CovariateSource::Cluster(i))
                } else if let Some(i) = individual_names.iter().position(|n| n == name) {
                    Ok(CovariateSource::Individual(i))
                } else {
                    Err(MeanModelError::UnknownCovariate(name.clone()))
                }
            })
            .collect()
    }

    /// Stacked `[n(T+1)] × p` design matrix, individual-major and time-minor.
    pub fn stack_design_matrix(
        &self,
        d: &EmbeddedCai,
        cluster: &ClusterRecord,
        binding: &[CovariateSource],
    ) -> Result<DMatrix<f64>, MeanModelError> {
        self.check_cai(d)?;
        let times = self.grid.times();
        let p = self.n_params();
        let q = self.n_causal();
        let rows_per = times.len();
        let gamma_rows: Vec<Vec<f64>> = times.iter().map(|&t| self.gamma_row(d, t)).collect();
        let mut m = DMatrix::zeros(cluster.size() * rows_per, p);
        for (j, ind) in cluster.individuals.iter().enumerate() {
            for (k, g) in gamma_rows.iter().enumerate() {
                let r = j * rows_per + k;
                for (c, v) in g.iter().enumerate() {
                    m[(r, c)] = *v;
                }
                for (c, src) in binding.iter().enumerate() {
                    m[(r, q + c)] = match *src {
                        CovariateSource::Cluster(i) => cluster.x_cluster[i],
                        CovariateSource::Individual(i) => ind.x[i],
                    };
                }
            }
        }
        Ok(m)
    }

    fn pair(&self, d: &EmbeddedCai, dp: &EmbeddedCai) -> Result<(), MeanModelError> {
        self.check_cai(d)?;
        self.check_cai(dp)?;
        if d == dp {
            return Err(MeanModelError::IdenticalCais(*d));
        }
        Ok(())
    }

    fn finish(&self, gamma: Vec<f64>, label: String) -> ContrastVector {
        let mut c = gamma;
        c.resize(self.n_params(), 0.0);
        ContrastVector { c, label }
    }

    fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x - y).collect()
    }

    /// Difference in mean outcome at the last grid time.
    pub fn contrast_end_of_study(&self, d: &EmbeddedCai, dp: &EmbeddedCai) -> Result<ContrastVector, MeanModelError> {
        self.pair(d, dp)?;
        let t = self.grid.last();
        let c = Self::diff(&self.gamma_row(d, t), &self.gamma_row(dp, t));
        Ok(self.finish(c, format!("end-of-study {d} vs {dp}")))
    }

    /// Difference in average slope between the knot and the last grid time.
    pub fn contrast_second_stage_slope(
        &self,
        d: &EmbeddedCai,
        dp: &EmbeddedCai,
    ) -> Result<ContrastVector, MeanModelError> {
        self.pair(d, dp)?;
        let (k, t) = (self.knot()?, self.grid.last());
        let slope = |e: &EmbeddedCai| -> Vec<f64> {
            Self::diff(&self.gamma_row(e, t), &self.gamma_row(e, k)).into_iter().map(|v| v / (t - k)).collect()
        };
        let c = Self::diff(&slope(d), &slope(dp));
        Ok(self.finish(c, format!("second-stage slope {d} vs {dp}")))
    }

    /// Difference in time-averaged area under the mean curve over the grid span.
    pub fn contrast_auc(&self, d: &EmbeddedCai, dp: &EmbeddedCai) -> Result<ContrastVector, MeanModelError> {
        self.pair(d, dp)?;
        let (t0, tt) = (self.grid.first(), self.grid.last());
        let c = match &self.basis {
            Basis::Custom(b) => {
                if !b.quadrature {
                    return Err(MeanModelError::NonIntegrableBasis);
                }
                let f = |t: f64| Self::diff(&self.gamma_row(d, t), &self.gamma_row(dp, t));
                simpson(f, t0, tt, b.funcs.len()).into_iter().map(|v| v / (tt - t0)).collect()
            }
            _ => {
                let k = self.knot()?;
                let (pre, post) = match self.basis {
                    Basis::PiecewiseSqrt => {
                        let p32 = |x: f64| x.powf(1.5);
                        (
                            2.0 / 3.0 * (p32(k) - p32(t0)) + k.sqrt() * (tt - k),
                            2.0 / 3.0 * (p32(tt) - p32(k)) - k.sqrt() * (tt - k),
                        )
                    }
                    _ => ((k * k - t0 * t0) / 2.0 + k * (tt - k), (tt - k).powi(2) / 2.0),
                };
                let integral = |e: &EmbeddedCai| causal_row(self.kind(), e, Segments { one: tt - t0, pre, post });
                Self::diff(&integral(d), &integral(dp)).into_iter().map(|v| v / (tt - t0)).collect()
            }
        };
        Ok(self.finish(c, format!("AUC {d} vs {dp}")))
    }
}

/// Composite Simpson rule applied componentwise.
fn simpson<F: Fn(f64) -> Vec<f64>>(f: F, a: f64, b: f64, dim: usize) -> Vec<f64> {
    let h = (b - a) / SIMPSON_PANELS as f64;
    let mut acc = vec![0.0; dim];
    for i in 0..=SIMPSON_PANELS {
        let w = if i == 0 || i == SIMPSON_PANELS {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        for (s, v) in acc.iter_mut().zip(f(a + h * i as f64)) {
            *s += w * v;
        }
    }
    acc.into_iter().map(|s| s * h / 3.0).collect()
}

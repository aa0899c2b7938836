//! Monte Carlo operating characteristics of the estimator on simulated trials.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generate::Simulator;
use super::SimError;
use crate::data::{TimeGrid, TrialDataset};
use crate::design::EmbeddedCai;
use crate::gee::{fit, wald_test, Adjustments, FitOptions, GeeError, WeightSpec};
use crate::mean_model::{Basis, ContrastVector, CustomBasis, MeanModelSpec};
use crate::working_cov::WorkingCovSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastKind {
    EndOfStudy,
    SecondStageSlope,
    Auc,
}

/// The study's primary contrast `f(d) - f(d')`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyContrast {
    pub kind: ContrastKind,
    pub d: EmbeddedCai,
    pub dp: EmbeddedCai,
}

impl Default for StudyContrast {
    fn default() -> Self {
        Self { kind: ContrastKind::EndOfStudy, d: EmbeddedCai::proto(1, 1), dp: EmbeddedCai::proto(-1, -1) }
    }
}

impl StudyContrast {
    fn vector(&self, ms: &MeanModelSpec) -> Result<ContrastVector, SimError> {
        let out = match self.kind {
            ContrastKind::EndOfStudy => ms.contrast_end_of_study(&self.d, &self.dp),
            ContrastKind::SecondStageSlope => ms.contrast_second_stage_slope(&self.d, &self.dp),
            ContrastKind::Auc => ms.contrast_auc(&self.d, &self.dp),
        };
        out.map_err(|e| SimError::Analysis(e.to_string()))
    }
}

/// One way of analysing every replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    pub label: String,
    pub cov: WorkingCovSpec,
    #[serde(default)]
    pub adjustments: Adjustments,
    #[serde(default)]
    pub weights: WeightSpec,
    /// Fit a saturated cAI-mean model to the last time point only.
    #[serde(default)]
    pub static_end_of_study: bool,
}

impl AnalysisSpec {
    pub fn longitudinal(label: &str, cov: WorkingCovSpec, adjustments: Adjustments) -> Self {
        Self { label: label.into(), cov, adjustments, weights: WeightSpec::DesignKnown, static_end_of_study: false }
    }

    pub fn static_comparator(label: &str, cov: WorkingCovSpec, adjustments: Adjustments) -> Self {
        Self { static_end_of_study: true, ..Self::longitudinal(label, cov, adjustments) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyOptions {
    pub replicates: usize,
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub contrast: StudyContrast,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn one() -> usize {
    1
}
fn default_level() -> f64 {
    0.95
}
fn default_tolerance() -> f64 {
    1e-8
}
fn default_max_iter() -> usize {
    50
}

impl StudyOptions {
    pub fn new(replicates: usize, seed: u64) -> Self {
        Self {
            replicates,
            seed,
            workers: 1,
            level: default_level(),
            contrast: StudyContrast::default(),
            tolerance: default_tolerance(),
            max_iter: default_max_iter(),
        }
    }
}

/// What one analysis produced on one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub estimate: f64,
    /// `None` when the contrast variance is degenerate.
    pub se: Option<f64>,
    pub covered: Option<bool>,
    pub rejected: Option<bool>,
    pub converged: bool,
    /// θ̂ passed the estimating-equation root certificate.
    pub root_certified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisMetrics {
    pub label: String,
    pub n_ok: usize,
    pub failures: usize,
    pub nonconverged: usize,
    pub mean_estimate: f64,
    pub bias: f64,
    /// `(Δ̂ - Δ) / μ2(d')`, averaged; `None` if `μ2(d') = 0`.
    pub relative_bias: Option<f64>,
    pub sd: f64,
    pub rmse: f64,
    /// `None` when no replicate had a usable standard error.
    pub coverage: Option<f64>,
    pub rejection_rate: Option<f64>,
    pub mean_se: Option<f64>,
    /// Mean SE relative to the first analysis.
    pub se_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub truth: f64,
    /// `μ2(d')`, the relative-bias denominator.
    pub reference_mean: f64,
    pub n_clusters: usize,
    pub replicates: usize,
    pub contrast: StudyContrast,
    pub metrics: Vec<AnalysisMetrics>,
    /// Indexed `[replicate][analysis]`; `None` marks a failed fit.
    pub outcomes: Vec<Vec<Option<ReplicateOutcome>>>,
    /// First error message per analysis, if any.
    pub first_errors: Vec<Option<String>>,
}

struct Prepared {
    spec: MeanModelSpec,
    contrast: ContrastVector,
    options: FitOptions,
    end_of_study: bool,
}

/// Seed of replicate `rep`, independent of how replicates are scheduled.
pub fn replicate_seed(master: u64, rep: usize) -> u64 {
    let mut rng = ChaCha20Rng::seed_from_u64(master);
    rng.set_stream(rep as u64);
    rng.next_u64()
}

/// Generates `options.replicates` trials and applies every analysis to each.
///
/// Results do not depend on `options.workers`: each replicate has its own
/// seed and outcomes are collected in replicate order.
pub fn mc_study(sim: &Simulator, analyses: &[AnalysisSpec], options: &StudyOptions) -> Result<StudyReport, SimError> {
    if options.replicates == 0 {
        return Err(SimError::Analysis("at least one replicate is required".into()));
    }
    if analyses.is_empty() {
        return Err(SimError::Analysis("no analyses requested".into()));
    }
    let spec = sim.spec();
    let terms = spec.covariate_terms();
    let long_spec = MeanModelSpec::new(Basis::PiecewiseLinear, sim.design().clone(), TimeGrid::three_point(), terms.clone())
        .map_err(|e| SimError::Analysis(e.to_string()))?;
    let truth_theta: Vec<f64> = spec.marginal_gamma().iter().copied().chain(spec.eta_in_model_order()).collect();
    let truth = options.contrast.vector(&long_spec)?.dot(&truth_theta);
    let reference_mean = spec.marginal.at(&options.contrast.dp).mu_2;

    let prepared: Vec<Prepared> = analyses
        .iter()
        .map(|a| {
            let ms = if a.static_end_of_study {
                if options.contrast.kind != ContrastKind::EndOfStudy {
                    return Err(SimError::Analysis(format!(
                        "analysis '{}': the static comparator only supports the end-of-study contrast",
                        a.label
                    )));
                }
                let grid = TimeGrid::new(vec![TimeGrid::three_point().last()], None)
                    .map_err(|e| SimError::Analysis(e.to_string()))?;
                MeanModelSpec::new(Basis::Custom(CustomBasis::saturated_static()), sim.design().clone(), grid, terms.clone())
                    .map_err(|e| SimError::Analysis(e.to_string()))?
            } else {
                long_spec.clone()
            };
            let contrast = options.contrast.vector(&ms)?;
            let fo = FitOptions {
                tolerance: options.tolerance,
                max_iter: options.max_iter,
                weights: a.weights.clone(),
                adjustments: a.adjustments,
            };
            Ok(Prepared { spec: ms, contrast, options: fo, end_of_study: a.static_end_of_study })
        })
        .collect::<Result<_, SimError>>()?;

    let run = |rep: usize| -> Vec<Result<ReplicateOutcome, String>> {
        let ds = sim.generate(replicate_seed(options.seed, rep));
        let eos = prepared.iter().any(|p| p.end_of_study).then(|| ds.end_of_study());
        analyses
            .iter()
            .zip(&prepared)
            .map(|(a, p)| {
                let data: &TrialDataset = if p.end_of_study { eos.as_ref().expect("end-of-study data") } else { &ds };
                analyse(data, a, p, truth, options.level).map_err(|e| e.to_string())
            })
            .collect()
    };
    let workers = options.workers.max(1);
    let raw: Vec<Vec<Result<ReplicateOutcome, String>>> = if workers == 1 {
        (0..options.replicates).map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| SimError::Analysis(e.to_string()))?;
        pool.install(|| (0..options.replicates).into_par_iter().map(run).collect())
    };

    let mut first_errors = vec![None; analyses.len()];
    let outcomes: Vec<Vec<Option<ReplicateOutcome>>> = raw
        .into_iter()
        .map(|row| {
            row.into_iter()
                .enumerate()
                .map(|(k, r)| match r {
                    Ok(o) => Some(o),
                    Err(e) => {
                        first_errors[k].get_or_insert(e);
                        None
                    }
                })
                .collect()
        })
        .collect();

    let mut metrics: Vec<AnalysisMetrics> = analyses
        .iter()
        .enumerate()
        .map(|(k, a)| summarize(&a.label, outcomes.iter().map(|row| row[k].as_ref()), truth, reference_mean))
        .collect();
    let base = metrics[0].mean_se;
    for m in &mut metrics {
        m.se_ratio = match (m.mean_se, base) {
            (Some(s), Some(b)) if b > 0.0 => Some(s / b),
            _ => None,
        };
    }
    Ok(StudyReport {
        truth,
        reference_mean,
        n_clusters: spec.n_clusters,
        replicates: options.replicates,
        contrast: options.contrast,
        metrics,
        outcomes,
        first_errors,
    })
}

fn analyse(ds: &TrialDataset, a: &AnalysisSpec, p: &Prepared, truth: f64, level: f64) -> Result<ReplicateOutcome, GeeError> {
    let f = fit(ds, &p.spec, &a.cov, &p.options)?;
    let estimate = p.contrast.dot(&f.theta_vec());
    match wald_test(&f, &p.contrast, level) {
        Ok(w) => Ok(ReplicateOutcome {
            estimate,
            se: Some(w.se),
            covered: Some(w.ci.0 <= truth && truth <= w.ci.1),
            rejected: Some(w.p_value < 1.0 - level),
            converged: f.converged,
            root_certified: f.root_certified(),
        }),
        Err(GeeError::ZeroVariance(_)) => {
            Ok(ReplicateOutcome {
                estimate,
                se: None,
                covered: None,
                rejected: None,
                converged: f.converged,
                root_certified: f.root_certified(),
            })
        }
        Err(e) => Err(e),
    }
}

fn summarize<'a>(
    label: &str,
    outcomes: impl Iterator<Item = Option<&'a ReplicateOutcome>>,
    truth: f64,
    reference_mean: f64,
) -> AnalysisMetrics {
    let mut ok = Vec::new();
    let mut failures = 0;
    for o in outcomes {
        match o {
            Some(o) => ok.push(*o),
            None => failures += 1,
        }
    }
    let n = ok.len() as f64;
    let mean_of = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let est: Vec<f64> = ok.iter().map(|o| o.estimate).collect();
    let mean_estimate = mean_of(&est);
    let bias = mean_estimate - truth;
    let sd = if ok.len() > 1 {
        (est.iter().map(|e| (e - mean_estimate).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let rmse = mean_of(&est.iter().map(|e| (e - truth).powi(2)).collect::<Vec<_>>()).sqrt();
    let rate = |f: fn(&ReplicateOutcome) -> Option<bool>| {
        let v: Vec<f64> = ok.iter().filter_map(f).map(|b| f64::from(u8::from(b))).collect();
        (!v.is_empty()).then(|| mean_of(&v))
    };
    let ses: Vec<f64> = ok.iter().filter_map(|o| o.se).collect();
    AnalysisMetrics {
        label: label.to_string(),
        n_ok: ok.len(),
        failures,
        nonconverged: ok.iter().filter(|o| !o.converged).count(),
        mean_estimate,
        bias,
        relative_bias: (reference_mean != 0.0).then(|| bias / reference_mean),
        sd,
        rmse,
        coverage: rate(|o| o.covered),
        rejection_rate: rate(|o| o.rejected),
        mean_se: (!ses.is_empty()).then(|| mean_of(&ses)),
        se_ratio: None,
    }
}

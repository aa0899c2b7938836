//! Target marginal and responder-conditional laws for the prototypical design.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::moments::{quadrature_conditional_moments, PreRegime};
use super::SimError;
use crate::design::EmbeddedCai;

/// A value per first-stage arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByArm<T> {
    /// `a1 = +1`.
    pub plus: T,
    /// `a1 = -1`.
    pub minus: T,
}

impl<T: Copy> ByArm<T> {
    pub const fn both(v: T) -> Self {
        Self { plus: v, minus: v }
    }

    pub fn get(&self, a1: i8) -> T {
        if a1 == 1 {
            self.plus
        } else {
            self.minus
        }
    }
}

/// A value per embedded cAI `(a1, a2NR)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByCai<T> {
    pub plus_plus: T,
    pub plus_minus: T,
    pub minus_plus: T,
    pub minus_minus: T,
}

impl<T: Copy> ByCai<T> {
    pub const fn all(v: T) -> Self {
        Self { plus_plus: v, plus_minus: v, minus_plus: v, minus_minus: v }
    }

    pub fn get(&self, a1: i8, a2nr: i8) -> T {
        match (a1 == 1, a2nr == 1) {
            (true, true) => self.plus_plus,
            (true, false) => self.plus_minus,
            (false, true) => self.minus_plus,
            (false, false) => self.minus_minus,
        }
    }

    pub fn at(&self, d: &EmbeddedCai) -> T {
        self.get(d.a1, d.a2nr.unwrap_or(1))
    }

    pub fn from_fn(f: impl Fn(i8, i8) -> T) -> Self {
        Self { plus_plus: f(1, 1), plus_minus: f(1, -1), minus_plus: f(-1, 1), minus_minus: f(-1, -1) }
    }
}

/// Pre-response moments that depend on the first-stage arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmPre {
    /// Variance of an individual's outcome at t = 1.
    pub sigma2_1: f64,
    /// Covariance of two cluster-mates at t = 1.
    pub rho_1: f64,
    /// Covariance of one individual's t = 0 and t = 1 outcomes.
    pub phi_01: f64,
    /// Covariance of cluster-mates across t = 0 and t = 1.
    pub rho_01: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreResponse {
    pub sigma2_0: f64,
    pub rho_0: f64,
    pub arm: ByArm<ArmPre>,
}

/// Mean and covariance components of the end-of-study outcome, either
/// marginally or conditional on response status.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostBlock {
    pub mu_2: f64,
    pub sigma2_2: f64,
    pub rho_2: f64,
    pub phi_02: f64,
    pub phi_12: f64,
    pub rho_02: f64,
    pub rho_12: f64,
}

impl PostBlock {
    /// The four cross-time covariances in the order `(φ02, φ12, ρ02, ρ12)`.
    pub fn cross(&self) -> [f64; 4] {
        [self.phi_02, self.phi_12, self.rho_02, self.rho_12]
    }

    fn values(&self) -> [f64; 7] {
        [self.mu_2, self.sigma2_2, self.rho_2, self.phi_02, self.phi_12, self.rho_02, self.rho_12]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateLevel {
    Cluster,
    Individual,
}

/// A mean-zero covariate distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovariateDist {
    Normal { sd: f64 },
    Uniform { half_width: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateSpec {
    pub name: String,
    pub level: CovariateLevel,
    pub dist: CovariateDist,
    /// Coefficient on the outcome at every time.
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeMass {
    pub size: usize,
    pub prob: f64,
}

/// How response is generated from the pre-response errors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseModel {
    /// Beta(p/(1-p), 1) quantile of the probit of the standardized t = 1 cluster mean.
    #[default]
    ProbitBeta,
    /// Response independent of outcomes, with probability `p_r`.
    Constant,
}

fn half() -> ByArm<f64> {
    ByArm::both(0.5)
}

fn half_scalar() -> f64 {
    0.5
}

/// Full parameterization of the generative model for design II.
///
/// Non-responder blocks are never given; they follow from the marginal and
/// responder blocks and the response probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub mu_0: f64,
    pub mu_1: ByArm<f64>,
    pub pre: PreResponse,
    pub marginal: ByCai<PostBlock>,
    /// Responders are not re-randomized, so their law depends on `a1` only.
    pub responder: ByArm<PostBlock>,
    pub p_response: ByArm<f64>,
    #[serde(default = "half_scalar")]
    pub p_a1: f64,
    #[serde(default = "half")]
    pub p_a2nr: ByArm<f64>,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    pub n_clusters: usize,
    pub cluster_sizes: Vec<SizeMass>,
    #[serde(default)]
    pub response_model: ResponseModel,
}

const ARMS: [i8; 2] = [1, -1];

impl SimSpec {
    /// Checks ranges and support; positive-definiteness is checked when the
    /// internals are built.
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidSpec(m));
        for a1 in ARMS {
            let p = self.p_response.get(a1);
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("p_response for a1 = {a1} must lie in (0, 1), got {p}"));
            }
            let q = self.p_a2nr.get(a1);
            if !(q > 0.0 && q < 1.0) {
                return bad(format!("p_a2nr for a1 = {a1} must lie in (0, 1), got {q}"));
            }
        }
        if !(self.p_a1 > 0.0 && self.p_a1 < 1.0) {
            return bad(format!("p_a1 must lie in (0, 1), got {}", self.p_a1));
        }
        if self.n_clusters == 0 {
            return bad("n_clusters must be positive".into());
        }
        if self.cluster_sizes.is_empty() {
            return bad("cluster_sizes is empty".into());
        }
        let mut total = 0.0;
        let mut seen = Vec::new();
        for m in &self.cluster_sizes {
            if m.size == 0 {
                return bad("cluster sizes must be positive integers".into());
            }
            if !(m.prob > 0.0) || !m.prob.is_finite() {
                return bad(format!("probability of size {} must be positive", m.size));
            }
            if seen.contains(&m.size) {
                return bad(format!("size {} listed twice", m.size));
            }
            seen.push(m.size);
            total += m.prob;
        }
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("cluster size probabilities sum to {total}, not 1"));
        }
        let mut names = Vec::new();
        for c in &self.covariates {
            if names.contains(&c.name) {
                return bad(format!("covariate '{}' listed twice", c.name));
            }
            names.push(c.name.clone());
            let ok = match c.dist {
                CovariateDist::Normal { sd } => sd >= 0.0 && sd.is_finite(),
                CovariateDist::Uniform { half_width } => half_width >= 0.0 && half_width.is_finite(),
            };
            if !ok || !c.eta.is_finite() {
                return bad(format!("covariate '{}' has an invalid distribution or coefficient", c.name));
            }
        }
        let finite = self.all_values().iter().all(|v| v.is_finite());
        if !finite {
            return bad("all moments must be finite".into());
        }
        if self.pre.sigma2_0 < 0.0 {
            return bad("sigma2_0 must be nonnegative".into());
        }
        for a1 in ARMS {
            if self.pre.arm.get(a1).sigma2_1 < 0.0 {
                return bad(format!("sigma2_1 for a1 = {a1} must be nonnegative"));
            }
            if self.responder.get(a1).sigma2_2 < 0.0 {
                return bad(format!("responder sigma2_2 for a1 = {a1} must be nonnegative"));
            }
            for a2 in ARMS {
                if self.marginal.get(a1, a2).sigma2_2 < 0.0 {
                    return bad(format!("sigma2_2 for ({a1},{a2}) must be nonnegative"));
                }
            }
        }
        Ok(())
    }

    fn all_values(&self) -> Vec<f64> {
        let mut v = vec![self.mu_0, self.mu_1.plus, self.mu_1.minus, self.pre.sigma2_0, self.pre.rho_0];
        for a1 in ARMS {
            let a = self.pre.arm.get(a1);
            v.extend([a.sigma2_1, a.rho_1, a.phi_01, a.rho_01]);
            v.extend(self.responder.get(a1).values());
            for a2 in ARMS {
                v.extend(self.marginal.get(a1, a2).values());
            }
        }
        v
    }

    /// Every variance and covariance is zero: outcomes equal their means.
    pub fn is_noise_free(&self) -> bool {
        let mut v = vec![self.pre.sigma2_0, self.pre.rho_0];
        for a1 in ARMS {
            let a = self.pre.arm.get(a1);
            v.extend([a.sigma2_1, a.rho_1, a.phi_01, a.rho_01]);
            v.extend(&self.responder.get(a1).values()[1..]);
            for a2 in ARMS {
                v.extend(&self.marginal.get(a1, a2).values()[1..]);
            }
        }
        v.iter().all(|&x| x == 0.0)
    }

    /// `P_{1,a1}`: the t = 0 to t = 1 autoregression coefficient.
    pub fn p1(&self, a1: i8) -> f64 {
        if self.pre.rho_0 != 0.0 {
            self.pre.arm.get(a1).rho_01 / self.pre.rho_0
        } else {
            0.0
        }
    }

    /// Mean of the non-responders' end-of-study outcome under `d`.
    pub fn nonresponder_mean(&self, a1: i8, a2nr: i8) -> f64 {
        let p = self.p_response.get(a1);
        (self.marginal.get(a1, a2nr).mu_2 - p * self.responder.get(a1).mu_2) / (1.0 - p)
    }

    /// Non-responder block under `(a1, a2nr)`, given the pre-response mean
    /// gaps `E[Y_t | R=0] - E[Y_t | R=1]` for t = 0 and t = 1.
    pub fn nonresponder_block(&self, a1: i8, a2nr: i8, gap0: f64, gap1: f64) -> PostBlock {
        let p = self.p_response.get(a1);
        let m = self.marginal.get(a1, a2nr);
        let c = self.responder.get(a1);
        let mu0 = self.nonresponder_mean(a1, a2nr);
        let gap2 = mu0 - c.mu_2;
        let mix = p * (1.0 - p);
        let solve = |marg: f64, resp: f64, gap: f64| (marg - p * resp - mix * gap) / (1.0 - p);
        PostBlock {
            mu_2: mu0,
            sigma2_2: solve(m.sigma2_2, c.sigma2_2, gap2 * gap2),
            rho_2: solve(m.rho_2, c.rho_2, gap2 * gap2),
            phi_02: solve(m.phi_02, c.phi_02, gap0 * gap2),
            phi_12: solve(m.phi_12, c.phi_12, gap1 * gap2),
            rho_02: solve(m.rho_02, c.rho_02, gap0 * gap2),
            rho_12: solve(m.rho_12, c.rho_12, gap1 * gap2),
        }
    }

    /// Sizes in the support, ascending.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.cluster_sizes.iter().map(|m| m.size).collect();
        s.sort_unstable();
        s
    }

    /// Marginal mean of the outcome under `d` at grid index `t`.
    pub fn marginal_mean(&self, d: &EmbeddedCai, t: usize) -> f64 {
        match t {
            0 => self.mu_0,
            1 => self.mu_1.get(d.a1),
            _ => self.marginal.at(d).mu_2,
        }
    }

    /// Coefficients of the piecewise-linear marginal mean model implied by
    /// the target means, in the order `γ0 … γ6`.
    pub fn marginal_gamma(&self) -> [f64; 7] {
        let (up, um) = (self.mu_1.plus, self.mu_1.minus);
        let diff = ByCai::from_fn(|a1, a2| self.marginal.get(a1, a2).mu_2 - self.mu_1.get(a1));
        let (pp, pm, mp, mm) = (diff.plus_plus, diff.plus_minus, diff.minus_plus, diff.minus_minus);
        [
            self.mu_0,
            (up + um) / 2.0 - self.mu_0,
            (up - um) / 2.0,
            (pp + pm + mp + mm) / 4.0,
            (pp + pm - mp - mm) / 4.0,
            (pp - pm + mp - mm) / 4.0,
            (pp - pm - mp + mm) / 4.0,
        ]
    }

    /// Covariate names and coefficients split by level, in spec order.
    pub fn covariate_names(&self, level: CovariateLevel) -> Vec<String> {
        self.covariates.iter().filter(|c| c.level == level).map(|c| c.name.clone()).collect()
    }

    /// True η in the order cluster-level covariates, then individual-level ones.
    pub fn eta_in_model_order(&self) -> Vec<f64> {
        let by = |l| self.covariates.iter().filter(move |c| c.level == l).map(|c| c.eta);
        by(CovariateLevel::Cluster).chain(by(CovariateLevel::Individual)).collect()
    }

    /// Model-order covariate names matching [`Self::eta_in_model_order`].
    pub fn covariate_terms(&self) -> Vec<String> {
        let mut v = self.covariate_names(CovariateLevel::Cluster);
        v.extend(self.covariate_names(CovariateLevel::Individual));
        v
    }
}

/// A compact way to state a spec: per-time standard deviations, AR(1)
/// within-person correlation and exchangeable between-person correlation.
///
/// The responder block starts from the law responders would have if the
/// marginal model were jointly Gaussian and response were pure selection on
/// the t = 1 outcomes, averaged over cluster sizes. `responder_shift` and
/// `responder_scale` then move its mean and scale its covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetStructure {
    pub mu_0: f64,
    pub mu_1: ByArm<f64>,
    pub mu_2: ByCai<f64>,
    pub sd_0: f64,
    pub sd_1: ByArm<f64>,
    pub sd_2: ByCai<f64>,
    pub within_ar1: f64,
    pub between: f64,
    /// Added to the selection-implied responder mean.
    #[serde(default = "zero_arm")]
    pub responder_shift: ByArm<f64>,
    /// Multiplies the selection-implied responder covariances.
    #[serde(default = "one")]
    pub responder_scale: f64,
    pub p_response: ByArm<f64>,
    #[serde(default = "half_scalar")]
    pub p_a1: f64,
    #[serde(default = "half")]
    pub p_a2nr: ByArm<f64>,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    pub n_clusters: usize,
    pub cluster_sizes: Vec<SizeMass>,
    #[serde(default)]
    pub response_model: ResponseModel,
}

fn zero_arm() -> ByArm<f64> {
    ByArm::both(0.0)
}

fn one() -> f64 {
    1.0
}

impl TargetStructure {
    pub fn to_spec(&self) -> Result<SimSpec, SimError> {
        let (rw, rb) = (self.within_ar1, self.between);
        let s0 = self.sd_0;
        let arm = |a1: i8| {
            let s1 = self.sd_1.get(a1);
            ArmPre { sigma2_1: s1 * s1, rho_1: s1 * s1 * rb, phi_01: s0 * s1 * rw, rho_01: s0 * s1 * rb }
        };
        let post = |a1: i8, a2: i8| {
            let s1 = self.sd_1.get(a1);
            let s2 = self.sd_2.get(a1, a2);
            PostBlock {
                mu_2: self.mu_2.get(a1, a2),
                sigma2_2: s2 * s2,
                rho_2: s2 * s2 * rb,
                phi_02: s0 * s2 * rw * rw,
                phi_12: s1 * s2 * rw,
                rho_02: s0 * s2 * rb,
                rho_12: s1 * s2 * rb,
            }
        };
        let marginal = ByCai::from_fn(post);
        let mut spec = SimSpec {
            mu_0: self.mu_0,
            mu_1: self.mu_1,
            pre: PreResponse { sigma2_0: s0 * s0, rho_0: s0 * s0 * rb, arm: ByArm { plus: arm(1), minus: arm(-1) } },
            marginal,
            responder: ByArm { plus: marginal.get(1, 1), minus: marginal.get(-1, 1) },
            p_response: self.p_response,
            p_a1: self.p_a1,
            p_a2nr: self.p_a2nr,
            covariates: self.covariates.clone(),
            n_clusters: self.n_clusters,
            cluster_sizes: self.cluster_sizes.clone(),
            response_model: self.response_model,
        };
        spec.validate()?;
        let k = self.responder_scale;
        let mut implied = [PostBlock::default(); 2];
        for (i, a1) in ARMS.into_iter().enumerate() {
            let b = selection_implied_responder(&spec, a1)?;
            implied[i] = PostBlock {
                mu_2: b.mu_2 + self.responder_shift.get(a1),
                sigma2_2: k * b.sigma2_2,
                rho_2: k * b.rho_2,
                phi_02: k * b.phi_02,
                phi_12: k * b.phi_12,
                rho_02: k * b.rho_02,
                rho_12: k * b.rho_12,
            };
        }
        spec.responder = ByArm { plus: implied[0], minus: implied[1] };
        Ok(spec)
    }
}

/// End-of-study law of responders to `a1` when the `a2NR`-averaged marginal
/// model is jointly Gaussian and response acts only through selection,
/// averaged over the cluster-size distribution.
pub fn selection_implied_responder(spec: &SimSpec, a1: i8) -> Result<PostBlock, SimError> {
    let q = spec.p_a2nr.get(a1);
    let (up, dn) = (spec.marginal.get(a1, 1), spec.marginal.get(a1, -1));
    let avg = |f: fn(&PostBlock) -> f64| q * f(&up) + (1.0 - q) * f(&dn);
    let m = PostBlock {
        mu_2: avg(|b| b.mu_2),
        sigma2_2: avg(|b| b.sigma2_2),
        rho_2: avg(|b| b.rho_2),
        phi_02: avg(|b| b.phi_02),
        phi_12: avg(|b| b.phi_12),
        rho_02: avg(|b| b.rho_02),
        rho_12: avg(|b| b.rho_12),
    };
    if spec.is_noise_free() {
        return Ok(m);
    }
    let regime = PreRegime::from_spec(spec, a1);
    let p1 = regime.p1();
    let mut own = [0.0; 4];
    let mut between = [0.0; 3];
    let mut between_mass = 0.0;
    for sm in &spec.cluster_sizes {
        let n = sm.size;
        let cm = quadrature_conditional_moments(&regime, n)?;
        let r1 = cm.get(1);
        // (D0, D1) = T (ε0, ε1) with D1 = P1 ε0 + ε1.
        let t = DMatrix::from_fn(2 * n, 2 * n, |i, j| {
            if i == j {
                1.0
            } else if i >= n && j == i - n {
                p1
            } else {
                0.0
            }
        });
        let s11 = &t * regime.joint(n) * t.transpose();
        let c_r = &t * r1.covariance(n) * t.transpose();
        let mean_r = &t * DVector::from_fn(2 * n, |i, _| if i < n { r1.eps0 } else { r1.eps1 });
        let s21 = DMatrix::from_fn(n, 2 * n, |j, c| {
            let same = j == c % n;
            match (c < n, same) {
                (true, true) => m.phi_02,
                (true, false) => m.rho_02,
                (false, true) => m.phi_12,
                (false, false) => m.rho_12,
            }
        });
        let s22 = DMatrix::from_fn(n, n, |i, j| if i == j { m.sigma2_2 } else { m.rho_2 });
        let pinv = s11
            .clone()
            .pseudo_inverse(1e-12 * s11.amax())
            .map_err(|e| SimError::InvalidSpec(format!("pre-response covariance: {e}")))?;
        let b = &s21 * pinv;
        let mean2 = &b * &mean_r;
        let cross = &b * &c_r;
        let cov22 = &b * &c_r * b.transpose() + &s22 - &b * &s11 * b.transpose();
        own[0] += sm.prob * mean2[0];
        own[1] += sm.prob * cov22[(0, 0)];
        own[2] += sm.prob * cross[(0, 0)];
        own[3] += sm.prob * cross[(0, n)];
        if n > 1 {
            between_mass += sm.prob;
            between[0] += sm.prob * cov22[(0, 1)];
            between[1] += sm.prob * cross[(0, 1)];
            between[2] += sm.prob * cross[(0, n + 1)];
        }
    }
    let bt = |k: usize, fallback: f64| if between_mass > 0.0 { between[k] / between_mass } else { fallback };
    Ok(PostBlock {
        mu_2: m.mu_2 + own[0],
        sigma2_2: own[1],
        rho_2: bt(0, m.rho_2),
        phi_02: own[2],
        phi_12: own[3],
        rho_02: bt(1, m.rho_02),
        rho_12: bt(2, m.rho_12),
    })
}

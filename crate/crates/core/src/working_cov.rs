//! Working covariance `V^d = S^{1/2} P S^{1/2}` for stacked cluster outcomes,
//! and weighted moment estimators for its components.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TimeGrid;
use crate::design::EmbeddedCai;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovError {
    #[error("working covariance for {cai} with n = {n} is not positive definite (min eigenvalue {min_eig:e}, max {max_eig:e})")]
    NotPositiveDefinite { cai: EmbeddedCai, n: usize, min_eig: f64, max_eig: f64 },
    #[error("no residuals inform {0}")]
    InsufficientData(String),
    #[error("estimated variance is zero for {cai} at time index {time}")]
    DegenerateVariance { cai: EmbeddedCai, time: usize },
    #[error("alpha has no entry for {0}")]
    UnknownCai(EmbeddedCai),
    #[error("alpha covers {have} times, grid has {want}")]
    GridMismatch { have: usize, want: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceTime {
    Heteroscedastic,
    Homoscedastic,
}

/// Whether a component varies across embedded cAIs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaiPooling {
    Heterogeneous,
    Homogeneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WithinCorr {
    #[serde(rename = "AR1")]
    Ar1,
    Exchangeable,
    Unstructured,
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BetweenCorr {
    Exchangeable,
    Unstructured,
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkingCovSpec {
    pub variance_time: VarianceTime,
    pub variance_cai: CaiPooling,
    pub within_corr: WithinCorr,
    pub between_corr: BetweenCorr,
    pub corr_cai: CaiPooling,
}

impl WorkingCovSpec {
    /// Homoscedastic, cAI-homogeneous variance with independent correlations.
    pub const fn independence() -> Self {
        Self {
            variance_time: VarianceTime::Homoscedastic,
            variance_cai: CaiPooling::Homogeneous,
            within_corr: WithinCorr::Independent,
            between_corr: BetweenCorr::Independent,
            corr_cai: CaiPooling::Homogeneous,
        }
    }

    pub fn is_independence(&self) -> bool {
        self.within_corr == WithinCorr::Independent && self.between_corr == BetweenCorr::Independent
    }
}

/// One correlation component for a single cAI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Corr {
    Independent,
    Ar1(f64),
    Exchangeable(f64),
    /// `(T+1)×(T+1)` table indexed by time.
    Unstructured(Vec<Vec<f64>>),
}

impl Corr {
    fn map(&self, f: impl Fn(f64) -> f64) -> Corr {
        match self {
            Corr::Independent => Corr::Independent,
            Corr::Ar1(r) => Corr::Ar1(f(*r)),
            Corr::Exchangeable(r) => Corr::Exchangeable(f(*r)),
            Corr::Unstructured(t) => Corr::Unstructured(t.iter().map(|row| row.iter().map(|&v| f(v)).collect()).collect()),
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            Corr::Independent => vec![],
            Corr::Ar1(r) | Corr::Exchangeable(r) => vec![*r],
            Corr::Unstructured(t) => t.iter().flatten().copied().collect(),
        }
    }

    fn off_diagonal_values(&self, within: bool) -> Vec<f64> {
        match self {
            Corr::Unstructured(t) if within => t
                .iter()
                .enumerate()
                .flat_map(|(l, row)| row.iter().enumerate().filter(move |(m, _)| *m != l).map(|(_, &v)| v))
                .collect(),
            other => other.values(),
        }
    }

    /// Within-person block entry; the diagonal is always one.
    fn within_entry(&self, l: usize, m: usize) -> f64 {
        if l == m {
            return 1.0;
        }
        match self {
            Corr::Independent => 0.0,
            Corr::Ar1(r) => ar1_power(*r, l.abs_diff(m)),
            Corr::Exchangeable(r) => *r,
            Corr::Unstructured(t) => t[l][m],
        }
    }

    fn between_entry(&self, l: usize, m: usize) -> f64 {
        match self {
            Corr::Independent => 0.0,
            Corr::Ar1(r) => ar1_power(*r, l.abs_diff(m)),
            Corr::Exchangeable(r) => *r,
            Corr::Unstructured(t) => t[l][m],
        }
    }
}

/// `r^k` computed as `±|r|^k` so magnitudes match `|r|^k` bit for bit.
fn ar1_power(r: f64, k: usize) -> f64 {
    let mag = (0..k).fold(1.0, |acc, _| acc * r.abs());
    if r < 0.0 && k % 2 == 1 {
        -mag
    } else {
        mag
    }
}

/// Working covariance parameters, one entry per cAI in `cais` order.
/// Pooled components carry the same value in every entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaEstimate {
    pub cais: Vec<EmbeddedCai>,
    /// `sigma2[d][t]`.
    pub sigma2: Vec<Vec<f64>>,
    pub rho_w: Vec<Corr>,
    pub rho_b: Vec<Corr>,
    /// Set when a raw moment estimate fell outside `[-1, 1]` and was clamped.
    pub clipped: bool,
}

/// Largest correlation magnitude used when assembling `P`.
pub const CORR_CLIP: f64 = 1.0 - 1e-8;

impl AlphaEstimate {
    /// The identity working covariance.
    pub fn identity(cais: &[EmbeddedCai], n_times: usize) -> Self {
        Self {
            cais: cais.to_vec(),
            sigma2: vec![vec![1.0; n_times]; cais.len()],
            rho_w: vec![Corr::Independent; cais.len()],
            rho_b: vec![Corr::Independent; cais.len()],
            clipped: false,
        }
    }

    pub fn index_of(&self, d: &EmbeddedCai) -> Option<usize> {
        self.cais.iter().position(|c| c == d)
    }

    /// True if assembling `V` would clip some correlation to `±CORR_CLIP`.
    pub fn clip_active(&self) -> bool {
        self.rho_w
            .iter()
            .map(|c| c.off_diagonal_values(true))
            .chain(self.rho_b.iter().map(|c| c.off_diagonal_values(false)))
            .flatten()
            .any(|v| v.abs() > CORR_CLIP)
    }

    /// Clamps every correlation parameter at zero from below.
    pub fn clamp_nonnegative(&self) -> (AlphaEstimate, bool) {
        let any_negative = self
            .rho_w
            .iter()
            .map(|c| c.off_diagonal_values(true))
            .chain(self.rho_b.iter().map(|c| c.values()))
            .flatten()
            .any(|v| v < 0.0);
        let out = AlphaEstimate {
            rho_w: self.rho_w.iter().map(|c| c.map(|v| v.max(0.0))).collect(),
            rho_b: self.rho_b.iter().map(|c| c.map(|v| v.max(0.0))).collect(),
            ..self.clone()
        };
        (out, any_negative)
    }
}

/// Residuals of one cluster under one consistent cAI.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualEntry {
    /// Index into the owning set's `cais`.
    pub cai: usize,
    pub weight: f64,
    pub n: usize,
    /// Stacked individual-major, time-minor; length `n·(T+1)`.
    pub resid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub cais: Vec<EmbeddedCai>,
    pub n_times: usize,
    pub entries: Vec<ResidualEntry>,
}

/// Assembles `V^d` for a cluster of size `n` on `grid`.
pub fn build_v(alpha: &AlphaEstimate, d: &EmbeddedCai, n: usize, grid: &TimeGrid) -> Result<DMatrix<f64>, CovError> {
    let k = alpha.index_of(d).ok_or(CovError::UnknownCai(*d))?;
    let nt = grid.len();
    if alpha.sigma2[k].len() != nt {
        return Err(CovError::GridMismatch { have: alpha.sigma2[k].len(), want: nt });
    }
    let s2 = &alpha.sigma2[k];
    let scale = |l: usize, m: usize| if l == m { s2[l] } else { (s2[l] * s2[m]).sqrt() };
    let clip = |v: f64| v.clamp(-CORR_CLIP, CORR_CLIP);
    let w = DMatrix::from_fn(nt, nt, |l, m| {
        if l == m {
            s2[l]
        } else {
            scale(l, m) * clip(alpha.rho_w[k].within_entry(l, m))
        }
    });
    let b = DMatrix::from_fn(nt, nt, |l, m| scale(l, m) * clip(alpha.rho_b[k].between_entry(l, m)));
    let dim = n * nt;
    let mut v = DMatrix::zeros(dim, dim);
    for j in 0..n {
        for i in 0..n {
            let block = if i == j { &w } else { &b };
            v.view_mut((j * nt, i * nt), (nt, nt)).copy_from(block);
        }
    }
    let eig = SymmetricEigen::new(v.clone()).eigenvalues;
    let (min_eig, max_eig) = eig.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    if !(min_eig > 1e-10 * max_eig) || !(max_eig > 0.0) {
        return Err(CovError::NotPositiveDefinite { cai: *d, n, min_eig, max_eig });
    }
    Ok(v)
}

#[derive(Clone)]
struct CorrAcc {
    num: Vec<f64>,
    den: f64,
}

impl CorrAcc {
    fn new(len: usize) -> Self {
        Self { num: vec![0.0; len], den: 0.0 }
    }

    fn add(&mut self, other: &CorrAcc) {
        for (a, b) in self.num.iter_mut().zip(&other.num) {
            *a += b;
        }
        self.den += other.den;
    }
}

/// Weighted moment estimates of the working covariance components.
pub fn estimate_alpha(res: &ResidualSet, spec: &WorkingCovSpec) -> Result<AlphaEstimate, CovError> {
    let nd = res.cais.len();
    let nt = res.n_times;
    let t_pairs = nt.saturating_sub(1);

    // Variance moments per cAI.
    let mut s_num = vec![vec![0.0; nt]; nd];
    let mut s_den = vec![0.0; nd];
    for e in &res.entries {
        for j in 0..e.n {
            for t in 0..nt {
                s_num[e.cai][t] += e.weight * e.resid[j * nt + t].powi(2);
            }
        }
        s_den[e.cai] += e.weight * e.n as f64;
    }

    let needs_within = spec.within_corr != WithinCorr::Independent && t_pairs > 0;
    let needs_between = spec.between_corr != BetweenCorr::Independent;
    let needs_per_cai = spec.variance_cai == CaiPooling::Heterogeneous || needs_within || needs_between;

    let raw: Vec<Vec<f64>> = (0..nd)
        .map(|d| {
            if s_den[d] > 0.0 {
                s_num[d].iter().map(|v| v / s_den[d]).collect()
            } else {
                vec![f64::NAN; nt]
            }
        })
        .collect();
    if needs_per_cai {
        if let Some(d) = (0..nd).find(|&d| s_den[d] == 0.0) {
            return Err(CovError::InsufficientData(format!("marginal variance of {}", res.cais[d])));
        }
    }

    let mut sigma2: Vec<Vec<f64>> = match spec.variance_cai {
        CaiPooling::Heterogeneous => raw.clone(),
        CaiPooling::Homogeneous => {
            let den: f64 = s_den.iter().sum();
            if den == 0.0 {
                return Err(CovError::InsufficientData("pooled marginal variance".into()));
            }
            let pooled: Vec<f64> = (0..nt).map(|t| s_num.iter().map(|row| row[t]).sum::<f64>() / den).collect();
            vec![pooled; nd]
        }
    };
    if spec.variance_time == VarianceTime::Homoscedastic {
        for row in &mut sigma2 {
            let m = row.iter().sum::<f64>() / nt as f64;
            row.iter_mut().for_each(|v| *v = m);
        }
    }

    if !needs_within && !needs_between {
        return Ok(AlphaEstimate {
            cais: res.cais.clone(),
            sigma2,
            rho_w: vec![zero_corr(spec.within_corr, nt); nd],
            rho_b: vec![Corr::Independent; nd],
            clipped: false,
        });
    }

    for d in 0..nd {
        if let Some(t) = raw[d].iter().position(|&v| v == 0.0) {
            return Err(CovError::DegenerateVariance { cai: res.cais[d], time: t });
        }
    }
    let inv_sd: Vec<Vec<f64>> = raw.iter().map(|row| row.iter().map(|v| 1.0 / v.sqrt()).collect()).collect();

    let w_len = match spec.within_corr {
        WithinCorr::Unstructured => nt * nt,
        _ => 1,
    };
    let b_len = match spec.between_corr {
        BetweenCorr::Unstructured => nt * nt,
        _ => 1,
    };
    let mut w_acc = vec![CorrAcc::new(w_len); nd];
    let mut b_acc = vec![CorrAcc::new(b_len); nd];

    for e in &res.entries {
        let d = e.cai;
        let z: Vec<f64> = e.resid.iter().enumerate().map(|(i, &r)| r * inv_sd[d][i % nt]).collect();
        let nf = e.n as f64;
        if needs_within {
            let acc = &mut w_acc[d];
            for j in 0..e.n {
                let zj = &z[j * nt..(j + 1) * nt];
                match spec.within_corr {
                    WithinCorr::Ar1 => acc.num[0] += e.weight * zj.windows(2).map(|p| p[0] * p[1]).sum::<f64>(),
                    WithinCorr::Exchangeable => {
                        let s: f64 = zj.iter().sum();
                        let sq: f64 = zj.iter().map(|v| v * v).sum();
                        acc.num[0] += e.weight * (s * s - sq);
                    }
                    WithinCorr::Unstructured => {
                        for l in 0..nt {
                            for m in 0..nt {
                                acc.num[l * nt + m] += e.weight * zj[l] * zj[m];
                            }
                        }
                    }
                    WithinCorr::Independent => {}
                }
            }
            acc.den += e.weight
                * nf
                * match spec.within_corr {
                    WithinCorr::Ar1 => t_pairs as f64,
                    WithinCorr::Exchangeable => (nt * t_pairs) as f64,
                    _ => 1.0,
                };
        }
        if needs_between && e.n > 1 {
            let acc = &mut b_acc[d];
            let pairs = nf * (nf - 1.0);
            match spec.between_corr {
                BetweenCorr::Exchangeable => {
                    let a: Vec<f64> = (0..e.n).map(|j| z[j * nt..(j + 1) * nt].iter().sum()).collect();
                    let s: f64 = a.iter().sum();
                    let sq: f64 = a.iter().map(|v| v * v).sum();
                    acc.num[0] += e.weight * (s * s - sq);
                    acc.den += e.weight * pairs * (nt * nt) as f64;
                }
                BetweenCorr::Unstructured => {
                    let col: Vec<f64> = (0..nt).map(|l| (0..e.n).map(|j| z[j * nt + l]).sum()).collect();
                    for l in 0..nt {
                        for m in 0..nt {
                            let same: f64 = (0..e.n).map(|j| z[j * nt + l] * z[j * nt + m]).sum();
                            acc.num[l * nt + m] += e.weight * (col[l] * col[m] - same);
                        }
                    }
                    acc.den += e.weight * pairs;
                }
                BetweenCorr::Independent => {}
            }
        }
    }

    let pool = |accs: Vec<CorrAcc>| -> Vec<CorrAcc> {
        match spec.corr_cai {
            CaiPooling::Heterogeneous => accs,
            CaiPooling::Homogeneous => {
                let mut total = CorrAcc::new(accs[0].num.len());
                for a in &accs {
                    total.add(a);
                }
                vec![total; accs.len()]
            }
        }
    };
    let w_acc = pool(w_acc);
    let b_acc = pool(b_acc);

    let mut clipped = false;
    let mut finish = |acc: &CorrAcc, what: &str, d: usize| -> Result<Vec<f64>, CovError> {
        if acc.den <= 0.0 {
            return Err(CovError::InsufficientData(format!("{what} correlation of {}", res.cais[d])));
        }
        Ok(acc
            .num
            .iter()
            .map(|v| {
                let r = v / acc.den;
                if r.abs() > 1.0 {
                    clipped = true;
                }
                r.clamp(-1.0, 1.0)
            })
            .collect())
    };

    let mut rho_w = Vec::with_capacity(nd);
    let mut rho_b = Vec::with_capacity(nd);
    for d in 0..nd {
        rho_w.push(if needs_within {
            let v = finish(&w_acc[d], "within-person", d)?;
            match spec.within_corr {
                WithinCorr::Ar1 => Corr::Ar1(v[0]),
                WithinCorr::Exchangeable => Corr::Exchangeable(v[0]),
                _ => Corr::Unstructured(
                    (0..nt).map(|l| (0..nt).map(|m| if l == m { 1.0 } else { v[l * nt + m] }).collect()).collect(),
                ),
            }
        } else {
            zero_corr(spec.within_corr, nt)
        });
        rho_b.push(if needs_between {
            let v = finish(&b_acc[d], "between-person", d)?;
            match spec.between_corr {
                BetweenCorr::Exchangeable => Corr::Exchangeable(v[0]),
                _ => Corr::Unstructured((0..nt).map(|l| v[l * nt..(l + 1) * nt].to_vec()).collect()),
            }
        } else {
            Corr::Independent
        });
    }

    Ok(AlphaEstimate { cais: res.cais.clone(), sigma2, rho_w, rho_b, clipped })
}

/// The structure's zero element, used when there are no time pairs to estimate from.
fn zero_corr(kind: WithinCorr, nt: usize) -> Corr {
    match kind {
        WithinCorr::Independent => Corr::Independent,
        WithinCorr::Ar1 => Corr::Ar1(0.0),
        WithinCorr::Exchangeable => Corr::Exchangeable(0.0),
        WithinCorr::Unstructured => {
            Corr::Unstructured((0..nt).map(|l| (0..nt).map(|m| if l == m { 1.0 } else { 0.0 }).collect()).collect())
        }
    }
}

/// Arithmetic averaging over time and/or cAI as requested by `spec`.
/// Idempotent.
pub fn pool_alpha(alpha: &AlphaEstimate, spec: &WorkingCovSpec) -> AlphaEstimate {
    let mut out = alpha.clone();
    let nd = out.cais.len();
    if spec.variance_time == VarianceTime::Homoscedastic {
        for row in &mut out.sigma2 {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            row.iter_mut().for_each(|v| *v = m);
        }
    }
    if spec.variance_cai == CaiPooling::Homogeneous && nd > 0 {
        let nt = out.sigma2[0].len();
        let mean: Vec<f64> = (0..nt).map(|t| out.sigma2.iter().map(|r| r[t]).sum::<f64>() / nd as f64).collect();
        out.sigma2 = vec![mean; nd];
    }
    if spec.corr_cai == CaiPooling::Homogeneous && nd > 0 {
        out.rho_w = vec![average_corr(&out.rho_w); nd];
        out.rho_b = vec![average_corr(&out.rho_b); nd];
    }
    out
}

fn average_corr(list: &[Corr]) -> Corr {
    let k = list.len() as f64;
    match &list[0] {
        Corr::Independent => Corr::Independent,
        Corr::Ar1(_) | Corr::Exchangeable(_) => {
            let m = list.iter().map(|c| c.values()[0]).sum::<f64>() / k;
            list[0].map(|_| m)
        }
        Corr::Unstructured(t) => {
            let nt = t.len();
            Corr::Unstructured(
                (0..nt)
                    .map(|l| {
                        (0..nt)
                            .map(|m| {
                                list.iter()
                                    .map(|c| match c {
                                        Corr::Unstructured(u) => u[l][m],
                                        _ => 0.0,
                                    })
                                    .sum::<f64>()
                                    / k
                            })
                            .collect()
                    })
                    .collect(),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{enumerate_cais, DesignKind};

    fn hetero(within: WithinCorr, between: BetweenCorr) -> WorkingCovSpec {
        WorkingCovSpec {
            variance_time: VarianceTime::Heteroscedastic,
            variance_cai: CaiPooling::Heterogeneous,
            within_corr: within,
            between_corr: between,
            corr_cai: CaiPooling::Heterogeneous,
        }
    }

    fn one_cai() -> Vec<EmbeddedCai> {
        vec![EmbeddedCai::proto(1, 1)]
    }

    #[test]
    fn homoscedastic_independent_is_scaled_identity() {
        let grid = TimeGrid::three_point();
        let mut alpha = AlphaEstimate::identity(&one_cai(), 3);
        alpha.sigma2 = vec![vec![2.5; 3]];
        let v = build_v(&alpha, &one_cai()[0], 2, &grid).unwrap();
        assert_eq!(v, DMatrix::identity(6, 6) * 2.5);
    }

    #[test]
    fn single_person_reduction() {
        let grid = TimeGrid::with_knot(vec![0.0, 1.0], 0.5).unwrap();
        let alpha = AlphaEstimate {
            cais: one_cai(),
            sigma2: vec![vec![4.0, 9.0]],
            rho_w: vec![Corr::Exchangeable(0.3)],
            rho_b: vec![Corr::Independent],
            clipped: false,
        };
        let v = build_v(&alpha, &one_cai()[0], 1, &grid).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[4.0, 0.3 * 6.0, 0.3 * 6.0, 9.0]);
        assert!((v - expected).abs().max() < 1e-15);
    }

    #[test]
    fn single_time_between_block() {
        let grid = TimeGrid::new(vec![0.0], None).unwrap();
        let alpha = AlphaEstimate {
            cais: one_cai(),
            sigma2: vec![vec![1.0]],
            rho_w: vec![Corr::Independent],
            rho_b: vec![Corr::Exchangeable(0.4)],
            clipped: false,
        };
        let v = build_v(&alpha, &one_cai()[0], 2, &grid).unwrap();
        assert_eq!(v, DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]));
    }

    #[test]
    fn inadmissible_alpha_is_rejected() {
        let grid = TimeGrid::new(vec![0.0], None).unwrap();
        let alpha = AlphaEstimate {
            cais: one_cai(),
            sigma2: vec![vec![1.0]],
            rho_w: vec![Corr::Independent],
            rho_b: vec![Corr::Exchangeable(-0.9)],
            clipped: false,
        };
        assert!(matches!(build_v(&alpha, &one_cai()[0], 3, &grid), Err(CovError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn unstructured_single_cluster_by_hand() {
        let res = ResidualSet {
            cais: one_cai(),
            n_times: 2,
            entries: vec![ResidualEntry { cai: 0, weight: 4.0, n: 1, resid: vec![1.0, 1.0] }],
        };
        let a = estimate_alpha(&res, &hetero(WithinCorr::Unstructured, BetweenCorr::Independent)).unwrap();
        assert_eq!(a.sigma2[0], vec![1.0, 1.0]);
        assert_eq!(a.rho_w[0], Corr::Unstructured(vec![vec![1.0, 1.0], vec![1.0, 1.0]]));
        assert!(!a.clipped);
    }

    #[test]
    fn exchangeable_between_by_hand() {
        let res = ResidualSet {
            cais: one_cai(),
            n_times: 1,
            entries: vec![
                ResidualEntry { cai: 0, weight: 2.0, n: 2, resid: vec![1.0, 1.0] },
                ResidualEntry { cai: 0, weight: 2.0, n: 2, resid: vec![1.0, -1.0] },
            ],
        };
        let a = estimate_alpha(&res, &hetero(WithinCorr::Independent, BetweenCorr::Exchangeable)).unwrap();
        assert_eq!(a.sigma2[0], vec![1.0]);
        assert_eq!(a.rho_b[0], Corr::Exchangeable(0.0));
    }

    #[test]
    fn independent_gives_zero_correlation_and_diagonal_v() {
        let res = ResidualSet {
            cais: one_cai(),
            n_times: 3,
            entries: vec![
                ResidualEntry { cai: 0, weight: 1.0, n: 2, resid: vec![1.0, -2.0, 0.5, 0.3, 0.1, -1.0] },
                ResidualEntry { cai: 0, weight: 3.0, n: 1, resid: vec![-1.0, 2.0, 0.5] },
            ],
        };
        let a = estimate_alpha(&res, &hetero(WithinCorr::Independent, BetweenCorr::Independent)).unwrap();
        assert_eq!(a.rho_w[0], Corr::Independent);
        assert_eq!(a.rho_b[0], Corr::Independent);
        let expected0 = (1.0 + 0.09 + 3.0) / (2.0 + 3.0);
        assert!((a.sigma2[0][0] - expected0).abs() < 1e-15);
        let v = build_v(&a, &one_cai()[0], 2, &TimeGrid::three_point()).unwrap();
        assert_eq!(v.clone(), DMatrix::from_diagonal(&v.diagonal()));
    }

    #[test]
    fn singletons_only_cannot_inform_between() {
        let res = ResidualSet {
            cais: one_cai(),
            n_times: 1,
            entries: vec![ResidualEntry { cai: 0, weight: 1.0, n: 1, resid: vec![1.0] }],
        };
        assert!(matches!(
            estimate_alpha(&res, &hetero(WithinCorr::Independent, BetweenCorr::Exchangeable)),
            Err(CovError::InsufficientData(_))
        ));
    }

    #[test]
    fn zero_variance_is_degenerate_for_correlations() {
        let res = ResidualSet {
            cais: one_cai(),
            n_times: 2,
            entries: vec![ResidualEntry { cai: 0, weight: 1.0, n: 1, resid: vec![0.0, 1.0] }],
        };
        assert!(matches!(
            estimate_alpha(&res, &hetero(WithinCorr::Ar1, BetweenCorr::Independent)),
            Err(CovError::DegenerateVariance { time: 0, .. })
        ));
    }

    #[test]
    fn time_pooling_averages() {
        let alpha = AlphaEstimate {
            cais: one_cai(),
            sigma2: vec![vec![1.0, 3.0]],
            rho_w: vec![Corr::Independent],
            rho_b: vec![Corr::Independent],
            clipped: false,
        };
        let spec = WorkingCovSpec { variance_time: VarianceTime::Homoscedastic, ..hetero(WithinCorr::Independent, BetweenCorr::Independent) };
        let pooled = pool_alpha(&alpha, &spec);
        assert_eq!(pooled.sigma2[0], vec![2.0, 2.0]);
        assert_eq!(pool_alpha(&pooled, &spec), pooled);
    }

    #[test]
    fn cai_pooling_matches_ratio_estimator_with_equal_denominators() {
        let cais = enumerate_cais(DesignKind::II);
        let mut entries = Vec::new();
        for d in 0..cais.len() {
            for k in 0..3 {
                let base = (d * 3 + k) as f64;
                entries.push(ResidualEntry {
                    cai: d,
                    weight: 2.0,
                    n: 2,
                    resid: (0..6).map(|i| ((base + i as f64) * 0.37).sin() * (1.0 + d as f64)).collect(),
                });
            }
        }
        let res = ResidualSet { cais: cais.clone(), n_times: 3, entries };
        let spec = hetero(WithinCorr::Ar1, BetweenCorr::Exchangeable);
        let homog = WorkingCovSpec { variance_cai: CaiPooling::Homogeneous, ..spec };
        let per_d = estimate_alpha(&res, &spec).unwrap();
        let ratio = estimate_alpha(&res, &homog).unwrap();
        let averaged = pool_alpha(&per_d, &homog);
        for t in 0..3 {
            assert!((ratio.sigma2[0][t] - averaged.sigma2[0][t]).abs() < 1e-12);
        }
        let corr_homog = WorkingCovSpec { corr_cai: CaiPooling::Homogeneous, ..spec };
        let a = estimate_alpha(&res, &corr_homog).unwrap();
        let b = pool_alpha(&per_d, &corr_homog);
        match (&a.rho_w[0], &b.rho_w[0]) {
            (Corr::Ar1(x), Corr::Ar1(y)) => assert!((x - y).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ar1_entries_are_powers() {
        let grid = TimeGrid::with_knot(vec![0.0, 1.0, 2.0, 3.0], 1.0).unwrap();
        let alpha = AlphaEstimate {
            cais: one_cai(),
            sigma2: vec![vec![1.0; 4]],
            rho_w: vec![Corr::Ar1(-0.6)],
            rho_b: vec![Corr::Independent],
            clipped: false,
        };
        let v = build_v(&alpha, &one_cai()[0], 1, &grid).unwrap();
        for l in 0..4 {
            for m in 0..4 {
                assert_eq!(v[(l, m)].abs(), (0..l.abs_diff(m)).fold(1.0, |acc, _| acc * 0.6));
            }
        }
    }

    #[test]
    fn clamp_nonnegative_reports_change() {
        let alpha = AlphaEstimate {
            cais: one_cai(),
            sigma2: vec![vec![1.0; 2]],
            rho_w: vec![Corr::Ar1(0.2)],
            rho_b: vec![Corr::Exchangeable(-0.1)],
            clipped: false,
        };
        let (clamped, changed) = alpha.clamp_nonnegative();
        assert!(changed);
        assert_eq!(clamped.rho_b[0], Corr::Exchangeable(0.0));
        let (again, changed) = clamped.clamp_nonnegative();
        assert!(!changed);
        assert_eq!(again, clamped);
    }
}

//! Per-cluster building blocks of the estimating equation: stacked design
//! matrices, factorized working covariances, normal equations and scores.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::data::TrialDataset;
use crate::design::{consistency_indicator, enumerate_cais, EmbeddedCai};
use crate::mean_model::MeanModelSpec;
use crate::working_cov::{build_v, AlphaEstimate, ResidualEntry, ResidualSet};

use super::GeeError;

struct Unit {
    cai: usize,
    d: DMatrix<f64>,
}

struct ClusterCtx {
    /// Position in the dataset; contributions are reduced in cluster-id order.
    orig: usize,
    n: usize,
    y: DVector<f64>,
    units: Vec<Unit>,
}

/// Dataset and mean model resolved into per-cluster matrices.
pub struct Prepared {
    cais: Vec<EmbeddedCai>,
    grid: crate::data::TimeGrid,
    p: usize,
    clusters: Vec<ClusterCtx>,
    root_scale: f64,
}

/// Cholesky factors of `V^d` keyed by (cAI index, cluster size).
pub struct VFactors {
    chol: HashMap<(usize, usize), Cholesky<f64, Dyn>>,
}

impl VFactors {
    fn get(&self, cai: usize, n: usize) -> &Cholesky<f64, Dyn> {
        &self.chol[&(cai, n)]
    }
}

pub(super) struct Scores {
    pub u: Vec<DVector<f64>>,
    pub fallbacks: usize,
}

impl Prepared {
    pub fn new(ds: &TrialDataset, spec: &MeanModelSpec) -> Result<Self, GeeError> {
        let kind = ds.design.kind();
        if spec.kind() != kind {
            return Err(GeeError::DesignMismatch { model: spec.kind(), data: kind });
        }
        if spec.grid.times() != ds.grid.times() {
            return Err(GeeError::GridMismatch);
        }
        if ds.clusters.is_empty() {
            return Err(GeeError::EmptyDataset);
        }
        let binding = spec.bind_covariates(&ds.cluster_covariates, &ds.individual_covariates)?;
        let cais = enumerate_cais(kind);
        let nt = ds.grid.len();
        let mut order: Vec<usize> = (0..ds.clusters.len()).collect();
        order.sort_by(|&a, &b| ds.clusters[a].id.cmp(&ds.clusters[b].id).then(a.cmp(&b)));
        let mut clusters = Vec::with_capacity(ds.clusters.len());
        let mut seen = vec![false; cais.len()];
        let mut ymax = 0.0f64;
        for orig in order {
            let c = &ds.clusters[orig];
            if c.individuals.iter().any(|ind| ind.y.len() != nt) {
                return Err(GeeError::GridMismatch);
            }
            let y = DVector::from_vec(c.stacked_outcomes());
            ymax = ymax.max(y.amax());
            let mut units = Vec::new();
            for (k, d) in cais.iter().enumerate() {
                if consistency_indicator(c, d, kind) == 1 {
                    seen[k] = true;
                    units.push(Unit { cai: k, d: spec.stack_design_matrix(d, c, &binding)? });
                }
            }
            clusters.push(ClusterCtx { orig, n: c.size(), y, units });
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(GeeError::NoConsistentCluster(cais[k]));
        }
        Ok(Self { cais, grid: ds.grid.clone(), p: spec.n_params(), clusters, root_scale: 1.0 + ymax })
    }

    pub fn cais(&self) -> &[EmbeddedCai] {
        &self.cais
    }

    pub fn n_times(&self) -> usize {
        self.grid.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn root_scale(&self) -> f64 {
        self.root_scale
    }

    /// Factorizes `V^d` for every (cAI, size) pair present in the data.
    pub fn factorize(&self, alpha: &AlphaEstimate) -> Result<VFactors, GeeError> {
        let needed: BTreeSet<(usize, usize)> =
            self.clusters.iter().flat_map(|c| c.units.iter().map(move |u| (u.cai, c.n))).collect();
        let mut chol = HashMap::with_capacity(needed.len());
        for (k, n) in needed {
            let v = build_v(alpha, &self.cais[k], n, &self.grid)?;
            let factor = Cholesky::new(v).ok_or_else(|| {
                GeeError::Covariance(crate::working_cov::CovError::NotPositiveDefinite {
                    cai: self.cais[k],
                    n,
                    min_eig: f64::NAN,
                    max_eig: f64::NAN,
                })
            })?;
            chol.insert((k, n), factor);
        }
        Ok(VFactors { chol })
    }

    /// `M = Σ_i Σ_d I W DᵀV⁻¹D` and `b = Σ_i Σ_d I W DᵀV⁻¹Y`.
    fn normal_system(&self, vf: &VFactors, w: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let mut m = DMatrix::zeros(self.p, self.p);
        let mut b = DVector::zeros(self.p);
        for c in &self.clusters {
            let wi = w[c.orig];
            for u in &c.units {
                let ch = vf.get(u.cai, c.n);
                let vinv_d = ch.solve(&u.d);
                m += u.d.transpose() * &vinv_d * wi;
                b += vinv_d.transpose() * &c.y * wi;
            }
        }
        (m, b)
    }

    fn checked_factor(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, GeeError> {
        let eig = SymmetricEigen::new(m.clone()).eigenvalues;
        let max = eig.amax();
        let min = eig.min();
        if !(max > 0.0) || !(min > 1e-12 * max) {
            return Err(GeeError::RankDeficient(format!(
                "weighted normal matrix has eigenvalues in [{min:e}, {max:e}]"
            )));
        }
        Cholesky::new(m.clone()).ok_or_else(|| GeeError::RankDeficient("normal matrix not positive definite".into()))
    }

    /// One weighted linear solve with a step of iterative refinement.
    pub fn solve(&self, vf: &VFactors, w: &[f64]) -> Result<DVector<f64>, GeeError> {
        let (m, b) = self.normal_system(vf, w);
        let ch = Self::checked_factor(&m)?;
        let mut theta = ch.solve(&b);
        let r = &b - &m * &theta;
        theta += ch.solve(&r);
        Ok(theta)
    }

    pub fn max_abs_residual(&self, theta: &DVector<f64>) -> f64 {
        self.clusters
            .iter()
            .flat_map(|c| c.units.iter().map(move |u| (&c.y - &u.d * theta).amax()))
            .fold(0.0, f64::max)
    }

    pub fn residual_set(&self, theta: &DVector<f64>, w: &[f64]) -> ResidualSet {
        let mut entries = Vec::new();
        for c in &self.clusters {
            let wi = w[c.orig];
            for u in &c.units {
                let e = &c.y - &u.d * theta;
                entries.push(ResidualEntry { cai: u.cai, weight: wi, n: c.n, resid: e.iter().copied().collect() });
            }
        }
        ResidualSet { cais: self.cais.clone(), n_times: self.n_times(), entries }
    }

    /// Per-cluster estimating-function contributions `U_i` in dataset order, optionally with
    /// leverage-corrected residuals `(I − H)⁻¹ e`, `H = W D M⁻¹ DᵀV⁻¹`.
    pub(super) fn scores(
        &self,
        vf: &VFactors,
        theta: &DVector<f64>,
        w: &[f64],
        bias_correct: bool,
    ) -> Result<Scores, GeeError> {
        let m_factor = if bias_correct {
            let (m, _) = self.normal_system(vf, w);
            Some(Self::checked_factor(&m)?)
        } else {
            None
        };
        let mut fallbacks = 0;
        let mut out = vec![DVector::zeros(self.p); self.clusters.len()];
        for c in &self.clusters {
            let wi = w[c.orig];
            let mut ui = DVector::zeros(self.p);
            for unit in &c.units {
                let ch = vf.get(unit.cai, c.n);
                let mut e = &c.y - &unit.d * theta;
                if let Some(mf) = &m_factor {
                    let vinv_d = ch.solve(&unit.d);
                    let h = &unit.d * mf.solve(&vinv_d.transpose()) * wi;
                    let dim = h.nrows();
                    let i_minus_h = DMatrix::identity(dim, dim) - h;
                    match i_minus_h.lu().solve(&e) {
                        Some(adj) if adj.iter().all(|v| v.is_finite()) => e = adj,
                        _ => fallbacks += 1,
                    }
                }
                ui += unit.d.transpose() * ch.solve(&e) * wi;
            }
            out[c.orig] = ui;
        }
        Ok(Scores { u: out, fallbacks })
    }

    pub fn root_norm(&self, vf: &VFactors, theta: &DVector<f64>, w: &[f64]) -> f64 {
        let scores = self.scores(vf, theta, w, false).expect("plain scores never fail");
        let mut total = DVector::zeros(self.p);
        for c in &self.clusters {
            total += &scores.u[c.orig];
        }
        (total / self.n_clusters() as f64).amax()
    }

    /// `Q̂ = (1/N) Σ U_i U_iᵀ`.
    pub fn meat(&self, u: &[DVector<f64>]) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(self.p, self.p);
        for c in &self.clusters {
            q += &u[c.orig] * u[c.orig].transpose();
        }
        q / self.n_clusters() as f64
    }

    /// `Ĵ = (1/N) Σ Σ I W DᵀV⁻¹D`.
    pub fn bread(&self, vf: &VFactors, w: &[f64]) -> DMatrix<f64> {
        self.normal_system(vf, w).0 / self.n_clusters() as f64
    }

    /// `Σ̂ = (1/N) Ĵ⁻¹ Q̂ Ĵ⁻¹`, symmetrized.
    /// Dataset positions in reduction order.
    pub fn order(&self) -> Vec<usize> {
        self.clusters.iter().map(|c| c.orig).collect()
    }

    pub fn sandwich(&self, vf: &VFactors, w: &[f64], q: &DMatrix<f64>) -> Result<DMatrix<f64>, GeeError> {
        let j = self.bread(vf, w);
        let ch = Self::checked_factor(&j)?;
        let left = ch.solve(q);
        let s = ch.solve(&left.transpose()) / self.n_clusters() as f64;
        Ok((&s + s.transpose()) * 0.5)
    }
}

/// `Q̂ − Ĉ Ŝ⁻¹ Ĉᵀ` with `Ĉ = (1/N) Σ U Sᵀ` and `Ŝ = (1/N) Σ S Sᵀ`.
pub(super) fn project_out_scores(
    q: &DMatrix<f64>,
    u: &[DVector<f64>],
    s: &[DVector<f64>],
    order: &[usize],
) -> Result<DMatrix<f64>, GeeError> {
    let n = u.len() as f64;
    let (p, k) = (q.nrows(), s[0].len());
    let mut c = DMatrix::zeros(p, k);
    let mut ss = DMatrix::zeros(k, k);
    for &i in order {
        c += &u[i] * s[i].transpose();
        ss += &s[i] * s[i].transpose();
    }
    c /= n;
    ss /= n;
    let ch = Cholesky::new(ss).ok_or_else(|| GeeError::RankDeficient("weight-model score covariance is singular".into()))?;
    let corr = &c * ch.solve(&c.transpose());
    let out = q - corr;
    Ok((&out + out.transpose()) * 0.5)
}

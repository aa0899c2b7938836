//! Moments of the pre-response errors conditional on response status.
//!
//! Response depends on `(ε0, ε1)` only through a scalar standardized cluster
//! mean, so the Monte Carlo estimator weights every draw by `g` (responders)
//! and `1 - g` (non-responders) instead of sampling `R`. A quadrature
//! evaluation of the same moments is provided as an exact reference.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use super::spec::{ResponseModel, SimSpec};
use super::SimError;

/// Environment variable naming the on-disk moment cache directory.
pub const CACHE_ENV: &str = "CSMART_MOMENT_CACHE";
pub const DEFAULT_REPS: usize = 500_000;
pub const MIN_REPS: usize = 10_000;
pub const LOW_PRECISION_REPS: usize = 100_000;

/// Pre-response covariance parameters and response probability of one arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreRegime {
    pub sigma2_0: f64,
    pub rho_0: f64,
    pub sigma2_1: f64,
    pub rho_1: f64,
    pub phi_01: f64,
    pub rho_01: f64,
    pub p_r: f64,
    pub model: ResponseModel,
}

impl PreRegime {
    pub fn from_spec(spec: &SimSpec, a1: i8) -> Self {
        let arm = spec.pre.arm.get(a1);
        Self {
            sigma2_0: spec.pre.sigma2_0,
            rho_0: spec.pre.rho_0,
            sigma2_1: arm.sigma2_1,
            rho_1: arm.rho_1,
            phi_01: arm.phi_01,
            rho_01: arm.rho_01,
            p_r: spec.p_response.get(a1),
            model: spec.response_model,
        }
    }

    pub fn p1(&self) -> f64 {
        if self.rho_0 != 0.0 {
            self.rho_01 / self.rho_0
        } else {
            0.0
        }
    }

    fn exchangeable(n: usize, var: f64, cov: f64) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| if i == j { var } else { cov })
    }

    /// `Σ0`.
    pub fn sigma0(&self, n: usize) -> DMatrix<f64> {
        Self::exchangeable(n, self.sigma2_0, self.rho_0)
    }

    /// `Σ1 = Var(Y1) - P1² Σ0 - 2 P1 (φ01 - P1 σ0²) I`.
    pub fn sigma1(&self, n: usize) -> DMatrix<f64> {
        let p1 = self.p1();
        let cross = self.phi_01 - p1 * self.sigma2_0;
        let mut m = Self::exchangeable(n, self.sigma2_1, self.rho_1) - self.sigma0(n) * (p1 * p1);
        for i in 0..n {
            m[(i, i)] -= 2.0 * p1 * cross;
        }
        m
    }

    /// Joint covariance of `(ε0, ε1)`, `2n × 2n`.
    pub fn joint(&self, n: usize) -> DMatrix<f64> {
        let p1 = self.p1();
        let cross = self.phi_01 - p1 * self.sigma2_0;
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&self.sigma0(n));
        m.view_mut((n, n), (n, n)).copy_from(&self.sigma1(n));
        for i in 0..n {
            m[(i, n + i)] = cross;
            m[(n + i, i)] = cross;
        }
        m
    }

    /// Standard deviation of the t = 1 cluster-mean error used to standardize response.
    pub fn z_scale(&self, n: usize) -> f64 {
        ((self.sigma2_1 + (n as f64 - 1.0) * self.rho_1) / n as f64).sqrt()
    }

    fn is_noise_free(&self) -> bool {
        [self.sigma2_0, self.rho_0, self.sigma2_1, self.rho_1, self.phi_01, self.rho_01].iter().all(|&v| v == 0.0)
    }

    fn key(&self, n: usize) -> String {
        let bits = |v: f64| format!("{:016x}", v.to_bits());
        format!(
            "s0={} r0={} s1={} r1={} f01={} r01={} p={} model={:?} n={n}",
            bits(self.sigma2_0),
            bits(self.rho_0),
            bits(self.sigma2_1),
            bits(self.rho_1),
            bits(self.phi_01),
            bits(self.rho_01),
            bits(self.p_r),
            self.model
        )
    }
}

/// `g(z)`: response probability given the standardized t = 1 cluster-mean error.
///
/// For `ProbitBeta` this is the Beta(β, 1) quantile `Φ(z)^{1/β}` with
/// `β = p/(1-p)`, so `E[g] = p` when `z` is standard normal.
pub fn propensity_from_z(z: f64, p_r: f64, model: ResponseModel) -> f64 {
    match model {
        ResponseModel::Constant => p_r,
        ResponseModel::ProbitBeta => {
            let u = Normal::standard().cdf(z);
            u.powf((1.0 - p_r) / p_r)
        }
    }
}

/// Response probability of a cluster with t = 1 outcomes `y1` whose
/// conditional means given covariates are `mean1`.
pub fn response_propensity(spec: &SimSpec, a1: i8, y1: &[f64], mean1: &[f64]) -> f64 {
    let regime = PreRegime::from_spec(spec, a1);
    let p = regime.p_r;
    if spec.is_noise_free() {
        return p;
    }
    let n = y1.len();
    let dev = y1.iter().zip(mean1).map(|(y, m)| y - m).sum::<f64>() / n as f64;
    propensity_from_z(dev / regime.z_scale(n), p, regime.model)
}

/// Exchangeable summaries of the law of `(ε0, ε1)` within one stratum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpsMoments {
    /// `E[ε0_j]`.
    pub eps0: f64,
    /// `E[ε1_j]`.
    pub eps1: f64,
    /// `Var(ε0_j)`.
    pub s2_0: f64,
    /// `Var(ε1_j)`.
    pub s2_1: f64,
    /// `Cov(ε0_j, ε1_j)`.
    pub s01: f64,
    /// `Cov(ε0_j, ε0_k)`, `j ≠ k`.
    pub c0: f64,
    /// `Cov(ε1_j, ε1_k)`, `j ≠ k`.
    pub c1: f64,
    /// `Cov(ε0_j, ε1_k)`, `j ≠ k`.
    pub c01: f64,
}

impl EpsMoments {
    fn to_array(self) -> [f64; 8] {
        [self.eps0, self.eps1, self.s2_0, self.s2_1, self.s01, self.c0, self.c1, self.c01]
    }

    fn from_array(v: &[f64]) -> Self {
        Self { eps0: v[0], eps1: v[1], s2_0: v[2], s2_1: v[3], s01: v[4], c0: v[5], c1: v[6], c01: v[7] }
    }

    /// Exchangeable `2n × 2n` covariance of `(ε0, ε1)`.
    pub fn covariance(&self, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(2 * n, 2 * n, |a, b| {
            let (ta, ja) = (a / n, a % n);
            let (tb, jb) = (b / n, b % n);
            let same = ja == jb;
            match (ta, tb, same) {
                (0, 0, true) => self.s2_0,
                (0, 0, false) => self.c0,
                (1, 1, true) => self.s2_1,
                (1, 1, false) => self.c1,
                (_, _, true) => self.s01,
                (_, _, false) => self.c01,
            }
        })
    }
}

/// Conditional error moments for one `(regime, n)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalEpsMoments {
    pub n: usize,
    /// Draws used; zero for quadrature.
    pub reps: usize,
    /// Indexed by `r`.
    pub by_r: [EpsMoments; 2],
    /// Monte Carlo standard errors, indexed by `r`; zero for quadrature.
    pub se: [EpsMoments; 2],
    pub unconditional: EpsMoments,
    /// Estimated `P(R = 1)`.
    pub response_rate: f64,
}

impl ConditionalEpsMoments {
    pub fn get(&self, r: u8) -> &EpsMoments {
        &self.by_r[r as usize]
    }

    pub fn is_low_precision(&self) -> bool {
        self.reps > 0 && self.reps < LOW_PRECISION_REPS
    }

    fn zero(n: usize) -> Self {
        Self { n, reps: 0, by_r: [EpsMoments::default(); 2], se: [EpsMoments::default(); 2], unconditional: EpsMoments::default(), response_rate: f64::NAN }
    }

    fn to_values(&self) -> Vec<f64> {
        let mut v = vec![self.n as f64, self.reps as f64, self.response_rate];
        for m in self.by_r.iter().chain(&self.se).chain(std::iter::once(&self.unconditional)) {
            v.extend(m.to_array());
        }
        v
    }

    fn from_values(v: &[f64]) -> Option<Self> {
        if v.len() != 3 + 5 * 8 {
            return None;
        }
        let m = |k: usize| EpsMoments::from_array(&v[3 + 8 * k..3 + 8 * (k + 1)]);
        Some(Self {
            n: v[0] as usize,
            reps: v[1] as usize,
            response_rate: v[2],
            by_r: [m(0), m(1)],
            se: [m(2), m(3)],
            unconditional: m(4),
        })
    }
}

/// Per-draw exchangeable statistics: means, then centered second moments
/// averaged over individuals (`s`) or ordered pairs (`c`).
struct DrawStats {
    m0: f64,
    m1: f64,
    raw: [f64; 6],
}

fn draw_stats(e: &[f64], n: usize, center: Option<(f64, f64)>) -> DrawStats {
    let (c0, c1) = center.unwrap_or((0.0, 0.0));
    let x: Vec<f64> = e[..n].iter().map(|v| v - c0).collect();
    let y: Vec<f64> = e[n..].iter().map(|v| v - c1).collect();
    let nf = n as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let syy: f64 = y.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let pairs = nf * (nf - 1.0);
    let pair = |tot: f64, diag: f64| if n > 1 { (tot - diag) / pairs } else { 0.0 };
    DrawStats {
        m0: e[..n].iter().sum::<f64>() / nf,
        m1: e[n..].iter().sum::<f64>() / nf,
        raw: [sxx / nf, syy / nf, sxy / nf, pair(sx * sx, sxx), pair(sy * sy, syy), pair(sx * sy, sxy)],
    }
}

struct Draws {
    rng: ChaCha20Rng,
    chol: DMatrix<f64>,
    a: DVector<f64>,
    buf: DVector<f64>,
}

impl Draws {
    fn new(regime: &PreRegime, n: usize, seed: u64) -> Result<Self, SimError> {
        let chol = super::psd_factor(&regime.joint(n), || format!("pre-response covariance (n = {n})"))?;
        let p1 = regime.p1();
        let scale = regime.z_scale(n) * n as f64;
        let a = DVector::from_fn(2 * n, |i, _| if i < n { p1 / scale } else { 1.0 / scale });
        Ok(Self { rng: ChaCha20Rng::seed_from_u64(seed), chol, a, buf: DVector::zeros(2 * n) })
    }

    /// Next `(ε, z)`.
    fn next(&mut self) -> (DVector<f64>, f64) {
        for v in self.buf.iter_mut() {
            *v = StandardNormal.sample(&mut self.rng);
        }
        let e = &self.chol * &self.buf;
        let z = self.a.dot(&e);
        (e, z)
    }
}

/// Monte Carlo estimate of the response-conditional error moments.
///
/// Deterministic given `seed`. Each stratum's moments are weighted averages
/// with weights `g(z)` or `1 - g(z)`, with pair-averaged exchangeable summaries.
pub fn mc_conditional_moments(
    regime: &PreRegime,
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<ConditionalEpsMoments, SimError> {
    if reps < MIN_REPS {
        return Err(SimError::TooFewReps(reps));
    }
    if n == 0 {
        return Err(SimError::InvalidSpec("cluster size must be positive".into()));
    }
    if regime.is_noise_free() {
        let mut out = ConditionalEpsMoments::zero(n);
        out.reps = reps;
        out.response_rate = regime.p_r;
        return Ok(out);
    }
    let weight = |z: f64, r: usize| {
        let g = propensity_from_z(z, regime.p_r, regime.model);
        if r == 1 {
            g
        } else {
            1.0 - g
        }
    };

    // First pass: weighted means and weight totals.
    let mut draws = Draws::new(regime, n, seed)?;
    let mut wsum = [0.0f64; 3];
    let mut msum = [[0.0f64; 2]; 3];
    for _ in 0..reps {
        let (e, z) = draws.next();
        let st = draw_stats(e.as_slice(), n, None);
        for (k, w) in [weight(z, 0), weight(z, 1), 1.0].into_iter().enumerate() {
            wsum[k] += w;
            msum[k][0] += w * st.m0;
            msum[k][1] += w * st.m1;
        }
    }
    for (k, &w) in wsum.iter().enumerate().take(2) {
        if !(w > 0.0) {
            return Err(SimError::EmptyStratum { n, r: k as u8 });
        }
    }
    let means: Vec<(f64, f64)> = (0..3).map(|k| (msum[k][0] / wsum[k], msum[k][1] / wsum[k])).collect();

    // Second pass over the same draws: centered second moments.
    let mut draws = Draws::new(regime, n, seed)?;
    let mut csum = [[0.0f64; 6]; 3];
    let mut stats_w: Vec<[f64; 3]> = Vec::with_capacity(reps);
    let mut stats: Vec<[DrawStats; 3]> = Vec::new();
    for _ in 0..reps {
        let (e, z) = draws.next();
        let w = [weight(z, 0), weight(z, 1), 1.0];
        let st = [
            draw_stats(e.as_slice(), n, Some(means[0])),
            draw_stats(e.as_slice(), n, Some(means[1])),
            draw_stats(e.as_slice(), n, Some(means[2])),
        ];
        for k in 0..3 {
            for (acc, v) in csum[k].iter_mut().zip(st[k].raw) {
                *acc += w[k] * v;
            }
        }
        stats_w.push(w);
        stats.push(st);
    }
    let moments: Vec<EpsMoments> = (0..3)
        .map(|k| {
            let c: Vec<f64> = csum[k].iter().map(|v| v / wsum[k]).collect();
            EpsMoments {
                eps0: means[k].0,
                eps1: means[k].1,
                s2_0: c[0],
                s2_1: c[1],
                s01: c[2],
                c0: c[3],
                c1: c[4],
                c01: c[5],
            }
        })
        .collect();

    // Influence-function standard errors of the ratio estimators.
    let mut var = [[0.0f64; 8]; 2];
    for (w, st) in stats_w.iter().zip(&stats) {
        for k in 0..2 {
            let m = moments[k].to_array();
            let s = &st[k];
            let vals = [s.m0, s.m1, s.raw[0], s.raw[1], s.raw[2], s.raw[3], s.raw[4], s.raw[5]];
            for i in 0..8 {
                let dev = w[k] * (vals[i] - m[i]);
                var[k][i] += dev * dev;
            }
        }
    }
    let se: Vec<EpsMoments> = (0..2)
        .map(|k| {
            let v: Vec<f64> = var[k].iter().map(|x| x.sqrt() / wsum[k]).collect();
            EpsMoments::from_array(&v)
        })
        .collect();

    Ok(ConditionalEpsMoments {
        n,
        reps,
        by_r: [moments[0], moments[1]],
        se: [se[0], se[1]],
        unconditional: moments[2],
        response_rate: wsum[1] / reps as f64,
    })
}

const QUAD_HALF_WIDTH: f64 = 12.0;
const QUAD_PANELS: usize = 8000;

/// Exact conditional moments by one-dimensional quadrature over the
/// standardized cluster mean. Used as a reference for the Monte Carlo estimator.
pub fn quadrature_conditional_moments(regime: &PreRegime, n: usize) -> Result<ConditionalEpsMoments, SimError> {
    if regime.is_noise_free() {
        let mut out = ConditionalEpsMoments::zero(n);
        out.response_rate = regime.p_r;
        return Ok(out);
    }
    let s = regime.joint(n);
    let p1 = regime.p1();
    let scale = regime.z_scale(n) * n as f64;
    let a = DVector::from_fn(2 * n, |i, _| if i < n { p1 / scale } else { 1.0 / scale });
    let tau2 = (a.transpose() * &s * &a)[(0, 0)];
    if !(tau2 > 0.0) {
        return Err(SimError::InvalidSpec("response score has zero variance".into()));
    }
    let tau = tau2.sqrt();
    let b = &s * &a;

    // E[h(z)] for z ~ N(0, τ²) via composite Simpson on the standardized scale.
    let h = 2.0 * QUAD_HALF_WIDTH / QUAD_PANELS as f64;
    let mut acc = [[0.0f64; 3]; 2];
    for i in 0..=QUAD_PANELS {
        let u = -QUAD_HALF_WIDTH + i as f64 * h;
        let coef = if i == 0 || i == QUAD_PANELS {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let dens = (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let z = tau * u;
        let g = propensity_from_z(z, regime.p_r, regime.model);
        for (r, w) in [(0usize, 1.0 - g), (1, g)] {
            let base = coef * dens * w * h / 3.0;
            acc[r][0] += base;
            acc[r][1] += base * z;
            acc[r][2] += base * z * z;
        }
    }
    let mut by_r = [EpsMoments::default(); 2];
    for r in 0..2 {
        let pr = acc[r][0];
        let ez = acc[r][1] / pr;
        let vz = acc[r][2] / pr - ez * ez;
        let mean = &b * (ez / tau2);
        let cov = &s - &b * b.transpose() * (1.0 / tau2) + &b * b.transpose() * (vz / (tau2 * tau2));
        by_r[r] = summarize(&mean, &cov, n);
    }
    let uncond = summarize(&DVector::zeros(2 * n), &s, n);
    Ok(ConditionalEpsMoments {
        n,
        reps: 0,
        by_r,
        se: [EpsMoments::default(); 2],
        unconditional: uncond,
        response_rate: acc[1][0],
    })
}

/// Pair-averaged exchangeable summaries of a `2n`-dimensional mean and covariance.
fn summarize(mean: &DVector<f64>, cov: &DMatrix<f64>, n: usize) -> EpsMoments {
    let nf = n as f64;
    let avg = |f: &dyn Fn(usize) -> f64| (0..n).map(f).sum::<f64>() / nf;
    let pavg = |f: &dyn Fn(usize, usize) -> f64| {
        if n < 2 {
            return 0.0;
        }
        let mut s = 0.0;
        for j in 0..n {
            for k in 0..n {
                if j != k {
                    s += f(j, k);
                }
            }
        }
        s / (nf * (nf - 1.0))
    };
    EpsMoments {
        eps0: avg(&|j| mean[j]),
        eps1: avg(&|j| mean[n + j]),
        s2_0: avg(&|j| cov[(j, j)]),
        s2_1: avg(&|j| cov[(n + j, n + j)]),
        s01: avg(&|j| cov[(j, n + j)]),
        c0: pavg(&|j, k| cov[(j, k)]),
        c1: pavg(&|j, k| cov[(n + j, n + k)]),
        c01: pavg(&|j, k| cov[(j, n + k)]),
    }
}

/// How conditional moments are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum MomentMethod {
    MonteCarlo { reps: usize, seed: u64 },
    Quadrature,
}

impl Default for MomentMethod {
    fn default() -> Self {
        MomentMethod::MonteCarlo { reps: DEFAULT_REPS, seed: 0x5eed_c5a7 }
    }
}

/// Content-addressed store of computed moments.
///
/// Entries live in memory for the life of the process and, when a directory
/// is configured, as `<sha256>.bin` blobs listed in `manifest.tsv`.
#[derive(Debug, Clone, Default)]
pub struct MomentCache {
    dir: Option<PathBuf>,
}

fn memory() -> &'static Mutex<HashMap<String, ConditionalEpsMoments>> {
    static MEM: OnceLock<Mutex<HashMap<String, ConditionalEpsMoments>>> = OnceLock::new();
    MEM.get_or_init(|| Mutex::new(HashMap::new()))
}

impl MomentCache {
    /// Disk cache at `$CSMART_MOMENT_CACHE` when set, memory only otherwise.
    pub fn from_env() -> Self {
        Self { dir: std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from) }
    }

    pub fn at(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    pub fn memory_only() -> Self {
        Self { dir: None }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn key(regime: &PreRegime, n: usize, method: &MomentMethod) -> (String, String) {
        let desc = format!("v1 {:?} {}", method, regime.key(n));
        let hash = hex::encode(Sha256::digest(desc.as_bytes()));
        (hash, desc)
    }

    pub fn get_or_compute(
        &self,
        regime: &PreRegime,
        n: usize,
        method: &MomentMethod,
    ) -> Result<ConditionalEpsMoments, SimError> {
        let (hash, desc) = Self::key(regime, n, method);
        if let Some(m) = memory().lock().expect("moment cache lock").get(&hash) {
            return Ok(m.clone());
        }
        if let Some(m) = self.load(&hash) {
            memory().lock().expect("moment cache lock").insert(hash, m.clone());
            return Ok(m);
        }
        let m = match *method {
            // Response ignores the errors, so the strata share the exact unconditional law.
            _ if regime.model == ResponseModel::Constant => quadrature_conditional_moments(regime, n)?,
            MomentMethod::MonteCarlo { reps, seed } => mc_conditional_moments(regime, n, reps, seed)?,
            MomentMethod::Quadrature => quadrature_conditional_moments(regime, n)?,
        };
        self.store(&hash, &desc, &m)?;
        memory().lock().expect("moment cache lock").insert(hash, m.clone());
        Ok(m)
    }

    fn load(&self, hash: &str) -> Option<ConditionalEpsMoments> {
        let bytes = fs::read(self.dir.as_ref()?.join(format!("{hash}.bin"))).ok()?;
        if bytes.len() % 8 != 0 {
            return None;
        }
        let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        ConditionalEpsMoments::from_values(&vals)
    }

    fn store(&self, hash: &str, desc: &str, m: &ConditionalEpsMoments) -> Result<(), SimError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let io = |e: std::io::Error| SimError::Cache(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        let bytes: Vec<u8> = m.to_values().iter().flat_map(|v| v.to_le_bytes()).collect();
        let tmp = dir.join(format!("{hash}.bin.tmp{}", std::process::id()));
        fs::write(&tmp, &bytes).map_err(io)?;
        fs::rename(&tmp, dir.join(format!("{hash}.bin"))).map_err(io)?;
        let mut manifest =
            fs::OpenOptions::new().create(true).append(true).open(dir.join("manifest.tsv")).map_err(io)?;
        writeln!(manifest, "{hash}\t{desc}").map_err(io)?;
        Ok(())
    }
}

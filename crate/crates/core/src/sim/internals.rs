//! Derived quantities of the generative model: regression coefficients of the
//! end-of-study outcome on the pre-response errors, residual covariances and
//! mean offsets, per first-stage arm, cluster size and response stratum.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use serde::Serialize;

use super::moments::{ConditionalEpsMoments, EpsMoments, MomentCache, MomentMethod, PreRegime};
use super::spec::{PostBlock, SimSpec};
use super::{psd_factor, SimError};

const ARMS: [i8; 2] = [1, -1];

pub(crate) fn arm_index(a1: i8) -> usize {
    if a1 == 1 {
        0
    } else {
        1
    }
}

pub(crate) fn cai_index(a1: i8, a2: i8) -> usize {
    2 * arm_index(a1) + arm_index(a2)
}

/// Pre-response law for one `(a1, n)`.
#[derive(Debug, Clone, Serialize)]
pub struct PreInternals {
    pub a1: i8,
    pub n: usize,
    pub regime: PreRegime,
    pub p1: f64,
    pub moments: ConditionalEpsMoments,
    /// Factor of the joint covariance of `(ε0, ε1)`.
    #[serde(skip)]
    pub factor: DMatrix<f64>,
}

/// End-of-study law for one `(a1, a2NR, n, r)` stratum.
#[derive(Debug, Clone, Serialize)]
pub struct PostInternals {
    pub a1: i8,
    /// `None` for responders.
    pub a2nr: Option<i8>,
    pub n: usize,
    pub r: u8,
    pub target: PostBlock,
    #[serde(skip)]
    pub upsilon: Matrix4<f64>,
    /// `(p2, p3, p4, p5)`.
    pub p: [f64; 4],
    /// Max-norm residual of the coefficient system.
    pub residual: f64,
    pub zeta: f64,
    pub zeta_prime: f64,
    /// Diagonal and off-diagonal of `Σ2`.
    pub sigma2_diag: f64,
    pub sigma2_off: f64,
    #[serde(skip)]
    pub factor: DMatrix<f64>,
    /// Conditional mean of the regression part of `Y2` given the stratum.
    pub v: f64,
}

/// Everything needed to draw clusters of size `n`.
#[derive(Debug, Clone, Serialize)]
pub struct SizeInternals {
    pub n: usize,
    /// Indexed by arm (`+1`, `-1`).
    pub pre: [PreInternals; 2],
    pub responder: [PostInternals; 2],
    /// Canonical cAI order.
    pub nonresponder: [PostInternals; 4],
    /// `(γ0, …, γ6, λ1, λ2)` of the generative model.
    pub offsets: [f64; 9],
}

impl SizeInternals {
    pub fn pre(&self, a1: i8) -> &PreInternals {
        &self.pre[arm_index(a1)]
    }

    pub fn post(&self, a1: i8, a2nr: i8, r: u8) -> &PostInternals {
        if r == 1 {
            &self.responder[arm_index(a1)]
        } else {
            &self.nonresponder[cai_index(a1, a2nr)]
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimInternals {
    pub spec: SimSpec,
    pub method: MomentMethod,
    pub sizes: Vec<SizeInternals>,
}

impl SimInternals {
    pub fn size(&self, n: usize) -> Option<&SizeInternals> {
        self.sizes.iter().find(|s| s.n == n)
    }

    /// Any Monte Carlo moment table below the recommended precision.
    pub fn is_low_precision(&self) -> bool {
        self.sizes.iter().flat_map(|s| &s.pre).any(|p| p.moments.is_low_precision())
    }
}

/// Validates `spec` and derives the internals for every size in its support.
pub fn build_internals(spec: &SimSpec, method: &MomentMethod, cache: &MomentCache) -> Result<SimInternals, SimError> {
    spec.validate()?;
    let sizes = spec.sizes().into_iter().map(|n| build_size(spec, n, method, cache)).collect::<Result<_, _>>()?;
    Ok(SimInternals { spec: spec.clone(), method: *method, sizes })
}

fn build_pre(spec: &SimSpec, a1: i8, n: usize, method: &MomentMethod, cache: &MomentCache) -> Result<PreInternals, SimError> {
    let regime = PreRegime::from_spec(spec, a1);
    let factor = psd_factor(&regime.joint(n), || format!("pre-response covariance for a1 = {a1}, n = {n}"))?;
    let moments = cache.get_or_compute(&regime, n, method)?;
    Ok(PreInternals { a1, n, p1: regime.p1(), regime, moments, factor })
}

pub fn build_size(spec: &SimSpec, n: usize, method: &MomentMethod, cache: &MomentCache) -> Result<SizeInternals, SimError> {
    let pre = [build_pre(spec, 1, n, method, cache)?, build_pre(spec, -1, n, method, cache)?];
    let responder = [
        build_post(spec.responder.get(1), &pre[0], None, 1)?,
        build_post(spec.responder.get(-1), &pre[1], None, 1)?,
    ];
    let mut nonresponder = Vec::with_capacity(4);
    for a1 in ARMS {
        let pi = &pre[arm_index(a1)];
        let (m0, m1) = (pi.moments.get(0), pi.moments.get(1));
        let gap0 = m0.eps0 - m1.eps0;
        let gap1 = pi.p1 * gap0 + (m0.eps1 - m1.eps1);
        for a2 in ARMS {
            let block = spec.nonresponder_block(a1, a2, gap0, gap1);
            nonresponder.push(build_post(block, pi, Some(a2), 0)?);
        }
    }
    let nonresponder: [PostInternals; 4] = nonresponder.try_into().expect("four cAIs");
    let offsets = solve_offsets(spec, n, &responder, &nonresponder)?;
    Ok(SizeInternals { n, pre, responder, nonresponder, offsets })
}

/// `Υ`: covariances of `(ε0_j, Y1_j, ε0_k, Y1_k)` deviations with the
/// regressors `(ε0_j, mean ε0, P1 ε0_j + ε1_j, mean ε1)`, `k ≠ j`.
pub fn upsilon(m: &EpsMoments, p1: f64, n: usize) -> Matrix4<f64> {
    let nf = n as f64;
    let (w, o) = (1.0 / nf, (nf - 1.0) / nf);
    let (s0, s1, s01, c0, c1, c01) = (m.s2_0, m.s2_1, m.s01, m.c0, m.c1, m.c01);
    let y1_own = p1 * s0 + s01;
    let y1_other = p1 * c0 + c01;
    let mean0 = s0 * w + o * c0;
    let mean01 = s01 * w + o * c01;
    let y1_mean0 = y1_own * w + o * y1_other;
    let y1_mean1 = (p1 * s01 + s1) * w + o * (p1 * c01 + c1);
    Matrix4::new(
        s0, mean0, y1_own, mean01,
        y1_own, y1_mean0, p1 * p1 * s0 + 2.0 * p1 * s01 + s1, y1_mean1,
        c0, mean0, y1_other, mean01,
        y1_other, y1_mean0, p1 * p1 * c0 + 2.0 * p1 * c01 + c1, y1_mean1,
    )
}

/// Solves for `(p2, p3, p4, p5)`. Singletons have no cluster-mean terms and
/// no between-person rows, leaving a 2×2 system.
fn solve_p(ups: &Matrix4<f64>, target: &[f64; 4], n: usize) -> Option<([f64; 4], f64)> {
    let rel = |v: &DVector<f64>| v.amax().max(1.0);
    if n == 1 {
        let a = DMatrix::from_row_slice(2, 2, &[ups[(0, 0)], ups[(0, 2)], ups[(1, 0)], ups[(1, 2)]]);
        let b = DVector::from_row_slice(&[target[0], target[1]]);
        let x = a.clone().svd(true, true).solve(&b, 1e-12 * a.amax().max(f64::MIN_POSITIVE)).ok()?;
        let res = (&a * &x - &b).amax();
        return (res <= 1e-8 * rel(&b)).then_some(([x[0], 0.0, x[1], 0.0], res));
    }
    let a = DMatrix::from_iterator(4, 4, ups.iter().copied());
    let b = DVector::from_row_slice(target);
    let x = a.clone().svd(true, true).solve(&b, 1e-12 * a.amax().max(f64::MIN_POSITIVE)).ok()?;
    let res = (&a * &x - &b).amax();
    (res <= 1e-8 * rel(&b)).then_some(([x[0], x[1], x[2], x[3]], res))
}

/// Conditional covariance of the regression part of `Y2`, as
/// `(ζ, ζ′)` = (same person, different persons).
pub fn zeta(m: &EpsMoments, p: &[f64; 4], p1: f64, n: usize) -> (f64, f64) {
    let l = regression_matrix(p, p1, n);
    let mm = &l * m.covariance(n) * l.transpose();
    let off = if n > 1 { mm[(0, 1)] } else { 0.0 };
    (mm[(0, 0)], off)
}

/// `[A B]` with `A = (p2 + p4 P1) I + (p3/n) J` and `B = p4 I + (p5/n) J`.
pub(crate) fn regression_matrix(p: &[f64; 4], p1: f64, n: usize) -> DMatrix<f64> {
    let nf = n as f64;
    let (p2, p3, p4, p5) = (p[0], p[1], p[2], p[3]);
    DMatrix::from_fn(n, 2 * n, |j, c| {
        let (t, k) = (c / n, c % n);
        let own = if j == k { 1.0 } else { 0.0 };
        if t == 0 {
            (p2 + p4 * p1) * own + p3 / nf
        } else {
            p4 * own + p5 / nf
        }
    })
}

fn build_post(target: PostBlock, pre: &PreInternals, a2nr: Option<i8>, r: u8) -> Result<PostInternals, SimError> {
    let (a1, n) = (pre.a1, pre.n);
    let m = pre.moments.get(r);
    let ups = upsilon(m, pre.p1, n);
    let (p, residual) = solve_p(&ups, &target.cross(), n).ok_or(SimError::SingularUpsilon { a1, n, r })?;
    let (z, zp) = zeta(m, &p, pre.p1, n);
    let diag = target.sigma2_2 - z;
    let off = if n > 1 { target.rho_2 - zp } else { 0.0 };
    let sigma2 = DMatrix::from_fn(n, n, |i, j| if i == j { diag } else { off });
    let label = || match a2nr {
        Some(a2) => format!("end-of-study residual covariance for ({a1},{a2}), non-responders, n = {n}"),
        None => format!("end-of-study residual covariance for a1 = {a1}, responders, n = {n}"),
    };
    let factor = psd_factor(&sigma2, label)?;
    let v = (p[0] + p[1] + p[2] * pre.p1) * m.eps0 + (p[2] + p[3]) * m.eps1;
    Ok(PostInternals {
        a1,
        a2nr,
        n,
        r,
        target,
        upsilon: ups,
        p,
        residual,
        zeta: z,
        zeta_prime: zp,
        sigma2_diag: diag,
        sigma2_off: off,
        factor,
        v,
    })
}

/// Solves the 9×9 system for `(γ0, …, γ6, λ1, λ2)` so that stratum means,
/// after the regression offsets `v`, hit their targets.
fn solve_offsets(
    spec: &SimSpec,
    n: usize,
    responder: &[PostInternals; 2],
    nonresponder: &[PostInternals; 4],
) -> Result<[f64; 9], SimError> {
    let mut a = DMatrix::<f64>::zeros(9, 9);
    let mut b = DVector::<f64>::zeros(9);
    a[(0, 0)] = 1.0;
    b[0] = spec.mu_0;
    for (i, a1) in ARMS.into_iter().enumerate() {
        let s = f64::from(a1);
        a.set_row(1 + i, &nalgebra::RowDVector::from_row_slice(&[1.0, 1.0, s, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        b[1 + i] = spec.mu_1.get(a1);
    }
    let stage_two = |s: f64| [1.0, 1.0, s, 1.0, s];
    for (i, a1) in ARMS.into_iter().enumerate() {
        let s = f64::from(a1);
        let p = spec.p_response.get(a1);
        let mut row = stage_two(s).to_vec();
        row.extend([0.0, 0.0, 1.0 - p, (1.0 - p) * s]);
        a.set_row(3 + i, &nalgebra::RowDVector::from_vec(row));
        b[3 + i] = responder[i].target.mu_2 - responder[i].v;
    }
    for (i, a1) in ARMS.into_iter().enumerate() {
        let s = f64::from(a1);
        let p = spec.p_response.get(a1);
        for (k, a2) in ARMS.into_iter().enumerate() {
            let t = f64::from(a2);
            let mut row = stage_two(s).to_vec();
            row.extend([t / (1.0 - p), s * t / (1.0 - p), -p, -p * s]);
            let idx = 5 + 2 * i + k;
            a.set_row(idx, &nalgebra::RowDVector::from_vec(row));
            let post = &nonresponder[cai_index(a1, a2)];
            b[idx] = post.target.mu_2 - post.v;
        }
    }
    let x = a.lu().solve(&b).ok_or(SimError::SingularGamma { n })?;
    let mut out = [0.0; 9];
    out.copy_from_slice(x.as_slice());
    Ok(out)
}

impl PostInternals {
    /// Regression coefficients as the 4-vector `(p2, p3, p4, p5)`.
    pub fn p_vector(&self) -> Vector4<f64> {
        Vector4::from_row_slice(&self.p)
    }
}

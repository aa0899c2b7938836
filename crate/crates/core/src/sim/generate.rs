//! Drawing whole trials from a validated spec.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use super::internals::{build_internals, regression_matrix, SimInternals};
use super::moments::{propensity_from_z, MomentCache, MomentMethod};
use super::spec::{CovariateDist, CovariateLevel, CovariateSpec, SimSpec};
use super::SimError;
use crate::data::{ClusterRecord, Individual, TimeGrid, TrialDataset};
use crate::design::{DesignKind, EmbeddedCai, SmartDesign, StageTwoCell};

/// A spec with its internals, ready to generate trials.
#[derive(Debug, Clone)]
pub struct Simulator {
    internals: SimInternals,
    design: SmartDesign,
    size_cdf: Vec<(usize, f64)>,
}

impl Simulator {
    pub fn new(spec: &SimSpec, method: &MomentMethod, cache: &MomentCache) -> Result<Self, SimError> {
        let internals = build_internals(spec, method, cache)?;
        let design = SmartDesign::new(
            DesignKind::II,
            spec.p_a1,
            &[
                (StageTwoCell { a1: 1, r: Some(0) }, spec.p_a2nr.plus),
                (StageTwoCell { a1: -1, r: Some(0) }, spec.p_a2nr.minus),
            ],
        )
        .map_err(|e| SimError::InvalidSpec(e.to_string()))?;
        let mut acc = 0.0;
        let size_cdf = spec
            .cluster_sizes
            .iter()
            .map(|m| {
                acc += m.prob;
                (m.size, acc)
            })
            .collect();
        Ok(Self { internals, design, size_cdf })
    }

    pub fn spec(&self) -> &SimSpec {
        &self.internals.spec
    }

    pub fn internals(&self) -> &SimInternals {
        &self.internals
    }

    pub fn design(&self) -> &SmartDesign {
        &self.design
    }

    /// One trial of `spec.n_clusters` clusters. Deterministic given `seed`.
    pub fn generate(&self, seed: u64) -> TrialDataset {
        self.generate_with_truth(seed).0
    }

    /// Like [`Self::generate`], also returning each cluster's latent embedded
    /// cAI: its first-stage arm and the second-stage arm it would receive on
    /// non-response, drawn for responders too.
    pub fn generate_with_truth(&self, seed: u64) -> (TrialDataset, Vec<EmbeddedCai>) {
        self.generate_clusters(seed, self.spec().n_clusters)
    }

    pub fn generate_clusters(&self, seed: u64, n_clusters: usize) -> (TrialDataset, Vec<EmbeddedCai>) {
        let spec = self.spec();
        let mut clusters = Vec::with_capacity(n_clusters);
        let mut truth = Vec::with_capacity(n_clusters);
        for i in 0..n_clusters {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (c, d) = self.draw_cluster(&mut rng, i);
            clusters.push(c);
            truth.push(d);
        }
        let ds = TrialDataset {
            design: self.design.clone(),
            grid: TimeGrid::three_point(),
            clusters,
            cluster_covariates: spec.covariate_names(CovariateLevel::Cluster),
            individual_covariates: spec.covariate_names(CovariateLevel::Individual),
        };
        (ds, truth)
    }

    fn draw_cluster(&self, rng: &mut ChaCha20Rng, index: usize) -> (ClusterRecord, EmbeddedCai) {
        let spec = self.spec();
        let a1: i8 = if rng.random::<f64>() < spec.p_a1 { 1 } else { -1 };
        let a2: i8 = if rng.random::<f64>() < spec.p_a2nr.get(a1) { 1 } else { -1 };
        let u: f64 = rng.random();
        let n = self.size_cdf.iter().find(|(_, c)| u < *c).unwrap_or(self.size_cdf.last().expect("sizes")).0;

        let cluster_covs: Vec<&CovariateSpec> =
            spec.covariates.iter().filter(|c| c.level == CovariateLevel::Cluster).collect();
        let indiv_covs: Vec<&CovariateSpec> =
            spec.covariates.iter().filter(|c| c.level == CovariateLevel::Individual).collect();
        let x_cluster: Vec<f64> = cluster_covs.iter().map(|c| draw_covariate(rng, c.dist)).collect();
        let x_indiv: Vec<Vec<f64>> =
            (0..n).map(|_| indiv_covs.iter().map(|c| draw_covariate(rng, c.dist)).collect()).collect();
        let shift_cluster: f64 = cluster_covs.iter().zip(&x_cluster).map(|(c, x)| c.eta * x).sum();
        let eta_x: Vec<f64> = x_indiv
            .iter()
            .map(|xi| shift_cluster + indiv_covs.iter().zip(xi).map(|(c, x)| c.eta * x).sum::<f64>())
            .collect();

        let si = self.internals.size(n).expect("size in support");
        let pre = si.pre(a1);
        let e = &pre.factor * standard_normals(rng, 2 * n);
        let dev1: Vec<f64> = (0..n).map(|j| pre.p1 * e[j] + e[n + j]).collect();

        let p = spec.p_response.get(a1);
        let scale = pre.regime.z_scale(n);
        let g = if spec.is_noise_free() || !(scale > 0.0) {
            p
        } else {
            propensity_from_z(dev1.iter().sum::<f64>() / n as f64 / scale, p, pre.regime.model)
        };
        let r: u8 = u8::from(rng.random::<f64>() < g);

        let post = si.post(a1, a2, r);
        let e2 = &post.factor * standard_normals(rng, n);
        let reg = regression_matrix(&post.p, pre.p1, n) * &e;
        let o = &si.offsets;
        let s = f64::from(a1);
        let mu1 = o[0] + o[1] + o[2] * s;
        let mu2 = mu1 + o[3] + o[4] * s;
        let stage_two = if r == 1 {
            (o[7] + o[8] * s) * (1.0 - p)
        } else {
            (o[5] + o[6] * s) * f64::from(a2) / (1.0 - p) - (o[7] + o[8] * s) * p
        };

        let individuals = (0..n)
            .map(|j| Individual {
                id: format!("{}", j + 1),
                x: x_indiv[j].clone(),
                y: vec![
                    eta_x[j] + o[0] + e[j],
                    eta_x[j] + mu1 + dev1[j],
                    eta_x[j] + mu2 + stage_two + reg[j] + e2[j],
                ],
            })
            .collect();
        let record = ClusterRecord {
            id: format!("c{:05}", index + 1),
            a1,
            r,
            a2nr: (r == 0).then_some(a2),
            a2r: None,
            x_cluster,
            individuals,
        };
        (record, EmbeddedCai::proto(a1, a2))
    }
}

fn standard_normals(rng: &mut ChaCha20Rng, k: usize) -> DVector<f64> {
    DVector::from_fn(k, |_, _| rng.sample(StandardNormal))
}

fn draw_covariate(rng: &mut ChaCha20Rng, dist: CovariateDist) -> f64 {
    match dist {
        CovariateDist::Normal { sd } => sd * rng.sample::<f64, _>(StandardNormal),
        CovariateDist::Uniform { half_width } => half_width * (2.0 * rng.random::<f64>() - 1.0),
    }
}

/// Builds internals with the default moment method and the environment cache,
/// then draws one trial.
pub fn generate_trial(spec: &SimSpec, seed: u64) -> Result<TrialDataset, SimError> {
    Ok(generate_trial_with_truth(spec, seed)?.0)
}

pub fn generate_trial_with_truth(spec: &SimSpec, seed: u64) -> Result<(TrialDataset, Vec<EmbeddedCai>), SimError> {
    let sim = Simulator::new(spec, &MomentMethod::default(), &MomentCache::from_env())?;
    Ok(sim.generate_with_truth(seed))
}

//! Randomization-probability models fit by maximum likelihood, and the
//! estimated inverse-probability weights they imply.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::design::{observed_a2, Pathway, StageTwoCell};

use super::GeeError;

/// How cluster weights are obtained.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSpec {
    /// Inverse of the known randomization probabilities.
    #[default]
    DesignKnown,
    /// Logistic models for each randomization, with cluster-level covariates.
    Estimated {
        #[serde(default)]
        stage1_covariates: Vec<String>,
        #[serde(default)]
        stage2_covariates: Vec<String>,
    },
}

/// One fitted binary probability model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    /// Set when the MLE does not exist and design probabilities were used.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTwoModel {
    pub cell: StageTwoCell,
    pub fit: LogisticFit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightModel {
    pub stage1: LogisticFit,
    pub stage2: Vec<StageTwoModel>,
    /// `Ŵ_i` per cluster, in dataset order.
    pub weights: Vec<f64>,
    /// Per-cluster score contributions `S_{π,i}`; cells that fell back are excluded.
    pub scores: Vec<DVector<f64>>,
}

impl WeightModel {
    /// `‖Σ_i S_{π,i}‖∞`.
    pub fn score_sum_norm(&self) -> f64 {
        let dim = self.scores.first().map_or(0, |s| s.len());
        let mut total = DVector::zeros(dim);
        for s in &self.scores {
            total += s;
        }
        total.amax()
    }

    pub fn fallback_cells(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.stage1.fallback {
            out.push("stage 1".to_string());
        }
        out.extend(self.stage2.iter().filter(|m| m.fit.fallback).map(|m| m.cell.to_string()));
        out
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

const MAX_NEWTON: usize = 100;
const SEPARATION_LINK: f64 = 30.0;

/// Logistic MLE by Newton's method; `None` when the MLE does not exist
/// (separation, a missing arm or a singular information matrix).
fn logistic_mle(x: &DMatrix<f64>, y: &[f64]) -> Option<DVector<f64>> {
    let n = x.nrows();
    if n == 0 || y.iter().all(|&v| v == 1.0) || y.iter().all(|&v| v == 0.0) {
        return None;
    }
    let q = x.ncols();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let mut beta = DVector::zeros(q);
    beta[0] = (ybar / (1.0 - ybar)).ln();
    for _ in 0..MAX_NEWTON {
        let eta = x * &beta;
        if eta.amax() > SEPARATION_LINK {
            return None;
        }
        let p: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let mut info = DMatrix::zeros(q, q);
        let mut score = DVector::zeros(q);
        for i in 0..n {
            let xi = x.row(i).transpose();
            let w = p[i] * (1.0 - p[i]);
            info += &xi * xi.transpose() * w;
            score += &xi * (y[i] - p[i]);
        }
        let step = info.cholesky()?.solve(&score);
        beta += &step;
        if step.amax() < 1e-12 {
            return Some(beta);
        }
    }
    None
}

fn covariate_columns(ds: &TrialDataset, names: &[String]) -> Result<Vec<usize>, GeeError> {
    names
        .iter()
        .map(|n| {
            ds.cluster_covariates
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| GeeError::UnknownWeightCovariate(n.clone()))
        })
        .collect()
}

fn design_row(x: &[f64], cols: &[usize]) -> Vec<f64> {
    std::iter::once(1.0).chain(cols.iter().map(|&c| x[c])).collect()
}

fn stage_fit(
    rows: &[Vec<f64>],
    y: &[f64],
    design_prob: f64,
) -> (LogisticFit, Vec<f64>) {
    let q = rows.first().map_or(1, Vec::len);
    let x = DMatrix::from_fn(rows.len(), q, |i, j| rows[i][j]);
    match logistic_mle(&x, y) {
        Some(beta) => {
            let p = rows.iter().map(|r| sigmoid(r.iter().zip(beta.iter()).map(|(a, b)| a * b).sum())).collect();
            (LogisticFit { coefficients: beta.iter().copied().collect(), fallback: false }, p)
        }
        None => {
            let mut coefficients = vec![0.0; q];
            coefficients[0] = (design_prob / (1.0 - design_prob)).ln();
            (LogisticFit { coefficients, fallback: true }, vec![design_prob; rows.len()])
        }
    }
}

/// Fits the stage-1 model over all clusters and one stage-2 model per
/// randomization cell, then forms `Ŵ_i = 1/(p̂_1 p̂_2)` and the score vectors.
pub fn estimate_weight_model(
    ds: &TrialDataset,
    stage1_covariates: &[String],
    stage2_covariates: &[String],
) -> Result<WeightModel, GeeError> {
    let kind = ds.design.kind();
    let c1 = covariate_columns(ds, stage1_covariates)?;
    let c2 = covariate_columns(ds, stage2_covariates)?;
    let n = ds.n_clusters();

    let rows1: Vec<Vec<f64>> = ds.clusters.iter().map(|c| design_row(&c.x_cluster, &c1)).collect();
    let y1: Vec<f64> = ds.clusters.iter().map(|c| if c.a1 == 1 { 1.0 } else { 0.0 }).collect();
    let (stage1, p1) = stage_fit(&rows1, &y1, ds.design.p_a1());

    let mut prob = vec![1.0; n];
    let mut score_blocks: Vec<Vec<DVector<f64>>> = vec![Vec::new(); n];
    for i in 0..n {
        prob[i] = if y1[i] == 1.0 { p1[i] } else { 1.0 - p1[i] };
        if !stage1.fallback {
            score_blocks[i].push(DVector::from_vec(rows1[i].iter().map(|v| v * (y1[i] - p1[i])).collect()));
        }
    }

    let mut stage2 = Vec::new();
    for (cell, design_p) in ds.design.stage_two_probs() {
        let members: Vec<usize> = (0..n)
            .filter(|&i| {
                let c = &ds.clusters[i];
                kind.cell_for(c.a1(), c.r()) == Some(cell)
            })
            .collect();
        let rows: Vec<Vec<f64>> = members.iter().map(|&i| design_row(&ds.clusters[i].x_cluster, &c2)).collect();
        let y: Vec<f64> = members
            .iter()
            .map(|&i| if observed_a2(&ds.clusters[i], kind) == Some(1) { 1.0 } else { 0.0 })
            .collect();
        let (fit, p2) = stage_fit(&rows, &y, design_p);
        let q2 = c2.len() + 1;
        let mut in_cell = vec![None; n];
        for (k, &i) in members.iter().enumerate() {
            prob[i] *= if y[k] == 1.0 { p2[k] } else { 1.0 - p2[k] };
            in_cell[i] = Some(k);
        }
        if !fit.fallback {
            for i in 0..n {
                score_blocks[i].push(match in_cell[i] {
                    Some(k) => DVector::from_vec(rows[k].iter().map(|v| v * (y[k] - p2[k])).collect()),
                    None => DVector::zeros(q2),
                });
            }
        }
        stage2.push(StageTwoModel { cell, fit });
    }

    let scores = score_blocks
        .into_iter()
        .map(|blocks| {
            let flat: Vec<f64> = blocks.iter().flat_map(|b| b.iter().copied()).collect();
            DVector::from_vec(flat)
        })
        .collect();
    Ok(WeightModel { stage1, stage2, weights: prob.iter().map(|p| 1.0 / p).collect(), scores })
}

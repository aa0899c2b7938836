//! Univariate Wald inference for linear contrasts of θ.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::mean_model::ContrastVector;

use super::{FitResult, GeeError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Reference {
    Normal,
    StudentT(f64),
}

impl Reference {
    fn upper_tail(&self, x: f64) -> f64 {
        match *self {
            Reference::Normal => Normal::standard().sf(x),
            Reference::StudentT(df) => StudentsT::new(0.0, 1.0, df).expect("df > 0").sf(x),
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        match *self {
            Reference::Normal => Normal::standard().inverse_cdf(p),
            Reference::StudentT(df) => StudentsT::new(0.0, 1.0, df).expect("df > 0").inverse_cdf(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldResult {
    pub label: String,
    pub estimate: f64,
    pub se: f64,
    pub statistic: f64,
    pub df: Option<f64>,
    pub p_value: f64,
    pub ci: (f64, f64),
    pub level: f64,
}

/// Tests `H0: cᵀθ = 0` with `se = √(cᵀΣ̂c)`; `Σ̂` already carries the `1/N`.
pub fn wald_test(fit: &FitResult, c: &ContrastVector, level: f64) -> Result<WaldResult, GeeError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(GeeError::BadLevel(level));
    }
    let theta = fit.theta_vec();
    if c.c.len() != theta.len() {
        return Err(GeeError::ContrastLength { got: c.c.len(), want: theta.len() });
    }
    // Work with c / max|c| so the statistic does not depend on the scale of c.
    let scale = c.c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(GeeError::ZeroVariance(0.0));
    }
    let unit: Vec<f64> = c.c.iter().map(|v| v / scale).collect();
    let sigma = &fit.sigma_theta;
    let mut var = 0.0;
    let mut magnitude = 0.0;
    for (i, ci) in unit.iter().enumerate() {
        for (j, cj) in unit.iter().enumerate() {
            var += ci * sigma[i][j] * cj;
            magnitude += (ci * sigma[i][j] * cj).abs();
        }
    }
    if !(var > 1e-14 * magnitude) || !(var > 0.0) {
        return Err(GeeError::ZeroVariance(var * scale * scale));
    }
    let unit_estimate: f64 = unit.iter().zip(&theta).map(|(a, b)| a * b).sum();
    let unit_se = var.sqrt();
    let statistic = unit_estimate / unit_se;
    let estimate = c.dot(&theta);
    let se = unit_se * scale;
    let reference = fit.reference();
    let p_value = (2.0 * reference.upper_tail(statistic.abs())).min(1.0);
    let q = reference.quantile(0.5 + level / 2.0);
    Ok(WaldResult {
        label: c.label.clone(),
        estimate,
        se,
        statistic,
        df: fit.df,
        p_value,
        ci: (estimate - q * se, estimate + q * se),
        level,
    })
}

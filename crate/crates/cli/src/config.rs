//! Run configuration files, their resolution and digests.

use std::collections::BTreeMap;
use std::path::Path;

use csmart::data::{Schema, TimeGrid};
use csmart::design::{DesignKind, EmbeddedCai, SmartDesign, StageTwoCell};
use csmart::gee::{Adjustments, WeightSpec};
use csmart::mean_model::{Basis, MeanModelSpec};
use csmart::sim::{AnalysisSpec, ContrastKind, MomentMethod, SimSpec, StudyContrast, TargetStructure};
use csmart::working_cov::WorkingCovSpec;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<(T, Vec<u8>), CliError> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::Config { path: path.to_path_buf(), message: "not valid UTF-8".into() })?;
    let value = toml::from_str(&text)
        .map_err(|e| CliError::Config { path: path.to_path_buf(), message: e.to_string() })?;
    Ok((value, bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Everything a run depends on. Its digest is the run's `config_hash`.
#[derive(Debug, Serialize)]
pub struct Resolved<'a, T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub config: &'a T,
    /// Digests of input files, keyed by role.
    pub inputs: BTreeMap<&'a str, String>,
}

impl<'a, T: Serialize> Resolved<'a, T> {
    pub fn new(command: &'a str, config: &'a T) -> Self {
        Self { tool: "csmart", version: VERSION, command, config, inputs: BTreeMap::new() }
    }

    pub fn input(mut self, role: &'a str, bytes: &[u8]) -> Self {
        self.inputs.insert(role, sha256_hex(bytes));
        self
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellProb {
    pub a1: i8,
    /// Omitted for design IV, where the cell does not depend on response.
    #[serde(default)]
    pub r: Option<u8>,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub kind: DesignKind,
    #[serde(default = "half")]
    pub p_a1: f64,
    /// `P(A2 = +1)` per randomization cell; unlisted cells default to 1/2.
    #[serde(default)]
    pub p_a2: Vec<CellProb>,
}

impl DesignConfig {
    pub fn build(&self) -> Result<SmartDesign, CliError> {
        let cells = self.kind.randomization_cells();
        for c in &self.p_a2 {
            if !cells.contains(&StageTwoCell { a1: c.a1, r: c.r }) {
                return Err(CliError::Usage(format!(
                    "design {:?} has no randomization cell a1 = {}, r = {:?}",
                    self.kind, c.a1, c.r
                )));
            }
        }
        let probs: Vec<(StageTwoCell, f64)> = cells
            .into_iter()
            .map(|cell| {
                let p = self.p_a2.iter().find(|c| c.a1 == cell.a1 && c.r == cell.r).map_or(0.5, |c| c.p);
                (cell, p)
            })
            .collect();
        Ok(SmartDesign::new(self.kind, self.p_a1, &probs)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub times: Vec<f64>,
    #[serde(default)]
    pub knot: Option<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { times: vec![0.0, 1.0, 2.0], knot: Some(1.0) }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<TimeGrid, CliError> {
        Ok(TimeGrid::new(self.times.clone(), self.knot)?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    #[default]
    PiecewiseLinear,
    PiecewiseSqrt,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub basis: BasisKind,
    /// Covariate columns entering the mean linearly, in coefficient order.
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    pub tolerance: f64,
    pub max_iter: usize,
    pub level: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iter: 50, level: 0.95 }
    }
}

/// Configuration shared by `fit` and `validate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub design: DesignConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub schema: Schema,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "WorkingCovSpec::independence")]
    pub covariance: WorkingCovSpec,
    #[serde(default)]
    pub weights: WeightSpec,
    #[serde(default)]
    pub adjustments: Adjustments,
    #[serde(default)]
    pub fit: FitSettings,
}

impl FitConfig {
    pub fn mean_model(&self) -> Result<MeanModelSpec, CliError> {
        let basis = match self.model.basis {
            BasisKind::PiecewiseLinear => Basis::PiecewiseLinear,
            BasisKind::PiecewiseSqrt => Basis::PiecewiseSqrt,
        };
        Ok(MeanModelSpec::new(basis, self.design.build()?, self.grid.build()?, self.model.covariates.clone())?)
    }
}

/// A simulation spec file: either the compact target form or a full spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecFile {
    #[serde(default)]
    pub target: Option<TargetStructure>,
    #[serde(default)]
    pub spec: Option<SimSpec>,
    #[serde(default)]
    pub moments: MomentMethod,
}

impl SpecFile {
    pub fn resolve(&self, path: &Path) -> Result<SimSpec, CliError> {
        match (&self.target, &self.spec) {
            (Some(t), None) => Ok(t.to_spec()?),
            (None, Some(s)) => {
                s.validate()?;
                Ok(s.clone())
            }
            _ => Err(CliError::Config {
                path: path.to_path_buf(),
                message: "give exactly one of [target] or [spec]".into(),
            }),
        }
    }
}

pub fn parse_cai(text: &str) -> Result<EmbeddedCai, CliError> {
    Ok(EmbeddedCai::parse(text)?)
}

fn cai_plus() -> String {
    "(1,1)".into()
}

fn cai_minus() -> String {
    "(-1,-1)".into()
}

fn end_of_study() -> ContrastKind {
    ContrastKind::EndOfStudy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastConfig {
    #[serde(default = "end_of_study")]
    pub kind: ContrastKind,
    #[serde(default = "cai_plus")]
    pub d: String,
    #[serde(default = "cai_minus")]
    pub dp: String,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self { kind: end_of_study(), d: cai_plus(), dp: cai_minus() }
    }
}

impl ContrastConfig {
    pub fn build(&self) -> Result<StudyContrast, CliError> {
        Ok(StudyContrast { kind: self.kind, d: parse_cai(&self.d)?, dp: parse_cai(&self.dp)? })
    }
}

fn thousand() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default = "thousand")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    /// Trial sizes to study; empty means the spec's own `n_clusters`.
    #[serde(default)]
    pub n_clusters: Vec<usize>,
    #[serde(default)]
    pub contrast: ContrastConfig,
    pub analysis: Vec<AnalysisSpec>,
    #[serde(default)]
    pub fit: FitSettings,
}

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use csmart::design::{enumerate_cais, EmbeddedCai};
use csmart::gee::{wald_test, WaldResult};
use csmart::mean_model::ContrastVector;
use serde::Serialize;

use crate::config::{parse_cai, read_bytes, Resolved};
use crate::error::CliError;
use crate::fit::FitArtifact;
use crate::output::{fixed, json, num, OutDir, Report, Tsv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    EndOfStudy,
    SecondStageSlope,
    Auc,
    Custom,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContrastRequest {
    pub estimand: Estimand,
    pub pairs: Vec<String>,
    pub all_pairs: bool,
    pub custom: Option<Vec<f64>>,
    pub level: Option<f64>,
}

#[derive(Serialize)]
struct ContrastArtifact<'a> {
    tool_version: &'static str,
    config_hash: String,
    fit_config_hash: &'a str,
    level: f64,
    results: &'a [WaldResult],
}

/// Splits `"(1,1),(-1,-1)"`, `"(1,1)/(-1,-1)"` or `"(1,1) (-1,-1)"`.
pub fn parse_pair(text: &str) -> Result<(EmbeddedCai, EmbeddedCai), CliError> {
    let bad = || CliError::Usage(format!("cannot read cAI pair {text:?}; write it as \"(1,1),(-1,-1)\""));
    let close = text.find(')').ok_or_else(bad)?;
    let (left, right) = text.split_at(close + 1);
    let right = right.trim_start_matches(|c: char| c == ',' || c == '/' || c.is_whitespace());
    if right.is_empty() {
        return Err(bad());
    }
    Ok((parse_cai(left)?, parse_cai(right)?))
}

fn vectors(a: &FitArtifact, req: &ContrastRequest) -> Result<Vec<ContrastVector>, CliError> {
    let spec = a.config.mean_model()?;
    if req.estimand == Estimand::Custom {
        let c = req.custom.clone().ok_or_else(|| CliError::Usage("--estimand custom needs --c".into()))?;
        if !req.pairs.is_empty() || req.all_pairs {
            return Err(CliError::Usage("--pair and --all-pairs do not apply to a custom contrast".into()));
        }
        return Ok(vec![ContrastVector { c, label: "custom".into() }]);
    }
    if req.custom.is_some() {
        return Err(CliError::Usage("--c requires --estimand custom".into()));
    }
    let mut pairs = Vec::new();
    if req.all_pairs {
        let cais = enumerate_cais(spec.kind());
        for (i, d) in cais.iter().enumerate() {
            for dp in &cais[i + 1..] {
                pairs.push((*d, *dp));
            }
        }
    }
    for p in &req.pairs {
        pairs.push(parse_pair(p)?);
    }
    if pairs.is_empty() {
        return Err(CliError::Usage("give at least one --pair or --all-pairs".into()));
    }
    pairs
        .iter()
        .map(|(d, dp)| {
            let v = match req.estimand {
                Estimand::EndOfStudy => spec.contrast_end_of_study(d, dp),
                Estimand::SecondStageSlope => spec.contrast_second_stage_slope(d, dp),
                Estimand::Auc => spec.contrast_auc(d, dp),
                Estimand::Custom => unreachable!("handled above"),
            };
            Ok(v?)
        })
        .collect()
}

pub fn run(fit_path: &Path, req: &ContrastRequest, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let artifact = FitArtifact::load(fit_path)?;
    let level = req.level.unwrap_or(artifact.config.fit.level);
    let fit_bytes = read_bytes(fit_path)?;
    let config_hash = Resolved::new("contrast", req).input("fit", &fit_bytes).hash();
    let results: Vec<WaldResult> = vectors(&artifact, req)?
        .iter()
        .map(|c| wald_test(&artifact.fit, c, level))
        .collect::<Result<_, _>>()?;

    let mut tsv = Tsv::new(&["contrast", "estimate", "se", "statistic", "df", "p_value", "ci_lower", "ci_upper", "level"]);
    for w in &results {
        tsv.row(&[
            w.label.clone(),
            num(w.estimate),
            num(w.se),
            num(w.statistic),
            w.df.map_or_else(|| "Inf".to_string(), num),
            num(w.p_value),
            num(w.ci.0),
            num(w.ci.1),
            num(w.level),
        ]);
    }

    let mut r = Report::header("contrast", &config_hash);
    r.kv("fit_config_hash", &artifact.config_hash);
    r.kv("estimand", &format!("{:?}", req.estimand));
    r.kv(
        "reference",
        &match artifact.fit.df {
            Some(df) => format!("Student t, df = {}", fixed(df, 2)),
            None => "standard normal".into(),
        },
    );
    r.section("contrasts");
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|w| {
            vec![
                w.label.clone(),
                fixed(w.estimate, 4),
                fixed(w.se, 4),
                fixed(w.statistic, 3),
                format!("[{}, {}]", fixed(w.ci.0, 4), fixed(w.ci.1, 4)),
                fixed(w.p_value, 4),
            ]
        })
        .collect();
    r.table(&["contrast", "estimate", "se", "stat", &format!("{}% ci", fixed(level * 100.0, 1)), "p"], &rows);

    let doc = ContrastArtifact {
        tool_version: crate::config::VERSION,
        config_hash: config_hash.clone(),
        fit_config_hash: &artifact.config_hash,
        level,
        results: &results,
    };
    let mut dir = OutDir::create(out)?;
    dir.write("contrasts.tsv", &tsv.into_bytes())?;
    dir.write("contrasts.json", &json(&doc))?;
    dir.write("contrast_report.txt", &r.into_bytes())?;
    Ok(dir.written().to_vec())
}

use std::path::{Path, PathBuf};

use csmart::sim::{mc_study, Simulator, StudyOptions, StudyReport};
use serde::Serialize;

use crate::config::{load_toml, Resolved, SpecFile, StudyConfig};
use crate::error::CliError;
use crate::output::{fixed, json, num, opt, OutDir, Report, Tsv};
use crate::simulate::moment_cache;

#[derive(Debug, Default, Clone, Copy)]
pub struct Overrides {
    pub replicates: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

#[derive(Serialize)]
struct StudyRun<'a> {
    spec: &'a SpecFile,
    study: &'a StudyConfig,
}

#[derive(Serialize)]
struct StudyArtifact<'a> {
    tool_version: &'static str,
    config_hash: &'a str,
    reports: &'a [StudyReport],
}

pub fn run(
    spec_path: &Path,
    config_path: &Path,
    overrides: Overrides,
    cache_dir: Option<&Path>,
    out: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let (file, _): (SpecFile, _) = load_toml(spec_path)?;
    let (mut study, _): (StudyConfig, _) = load_toml(config_path)?;
    if let Some(r) = overrides.replicates {
        study.replicates = r;
    }
    if let Some(s) = overrides.seed {
        study.seed = s;
    }
    if study.analysis.is_empty() {
        return Err(CliError::Config { path: config_path.to_path_buf(), message: "no [[analysis]] entries".into() });
    }
    let spec = file.resolve(spec_path)?;
    let sizes = if study.n_clusters.is_empty() { vec![spec.n_clusters] } else { study.n_clusters.clone() };
    // Workers only change scheduling, so they stay out of the hash.
    let config_hash = Resolved::new("mc-study", &StudyRun { spec: &file, study: &study }).hash();
    let options = StudyOptions {
        replicates: study.replicates,
        seed: study.seed,
        workers: overrides.workers.unwrap_or(1).max(1),
        level: study.fit.level,
        contrast: study.contrast.build()?,
        tolerance: study.fit.tolerance,
        max_iter: study.fit.max_iter,
    };
    let cache = moment_cache(cache_dir);
    let mut reports = Vec::with_capacity(sizes.len());
    for &n in &sizes {
        let mut s = spec.clone();
        s.n_clusters = n;
        let sim = Simulator::new(&s, &file.moments, &cache)?;
        reports.push(mc_study(&sim, &study.analysis, &options)?);
    }

    let mut metrics = Tsv::new(&[
        "n_clusters",
        "analysis",
        "n_ok",
        "failures",
        "nonconverged",
        "truth",
        "mean_estimate",
        "bias",
        "relative_bias",
        "sd",
        "rmse",
        "coverage",
        "rejection_rate",
        "mean_se",
        "se_ratio",
    ]);
    let mut plot = Tsv::new(&["n_clusters", "replicate", "analysis", "estimate", "se", "covered", "rejected", "converged"]);
    let flag = |b: Option<bool>| b.map_or_else(|| "NA".to_string(), |v| u8::from(v).to_string());
    for rep in &reports {
        for m in &rep.metrics {
            metrics.row(&[
                rep.n_clusters.to_string(),
                m.label.clone(),
                m.n_ok.to_string(),
                m.failures.to_string(),
                m.nonconverged.to_string(),
                num(rep.truth),
                num(m.mean_estimate),
                num(m.bias),
                opt(m.relative_bias),
                num(m.sd),
                num(m.rmse),
                opt(m.coverage),
                opt(m.rejection_rate),
                opt(m.mean_se),
                opt(m.se_ratio),
            ]);
        }
        for (k, row) in rep.outcomes.iter().enumerate() {
            for (a, o) in row.iter().enumerate() {
                let label = rep.metrics[a].label.clone();
                let cells = match o {
                    Some(o) => vec![
                        num(o.estimate),
                        opt(o.se),
                        flag(o.covered),
                        flag(o.rejected),
                        u8::from(o.converged).to_string(),
                    ],
                    None => vec!["NA".into(), "NA".into(), "NA".into(), "NA".into(), "0".into()],
                };
                let mut full = vec![rep.n_clusters.to_string(), k.to_string(), label];
                full.extend(cells);
                plot.row(&full);
            }
        }
    }

    let mut r = Report::header("mc-study", &config_hash);
    r.kv("replicates", &study.replicates.to_string());
    r.kv("seed", &study.seed.to_string());
    r.kv(
        "contrast",
        &format!("{:?} {} vs {}", options.contrast.kind, options.contrast.d, options.contrast.dp),
    );
    for rep in &reports {
        r.section(&format!("N = {}", rep.n_clusters));
        r.kv("truth", &fixed(rep.truth, 6));
        let rows: Vec<Vec<String>> = rep
            .metrics
            .iter()
            .map(|m| {
                let pct = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| fixed(x, 4));
                vec![
                    m.label.clone(),
                    m.n_ok.to_string(),
                    m.failures.to_string(),
                    fixed(m.bias, 4),
                    pct(m.relative_bias),
                    fixed(m.rmse, 4),
                    pct(m.coverage),
                    pct(m.rejection_rate),
                    pct(m.mean_se),
                ]
            })
            .collect();
        r.table(&["analysis", "ok", "failed", "bias", "rel_bias", "rmse", "coverage", "reject", "mean_se"], &rows);
        for (m, e) in rep.metrics.iter().zip(&rep.first_errors) {
            if let Some(e) = e {
                r.line(&format!("first failure for {}: {e}", m.label));
            }
        }
    }

    let doc = StudyArtifact { tool_version: crate::config::VERSION, config_hash: &config_hash, reports: &reports };
    let mut dir = OutDir::create(out)?;
    dir.write("metrics.tsv", &metrics.into_bytes())?;
    dir.write("plot_data.tsv", &plot.into_bytes())?;
    dir.write("study.json", &json(&doc))?;
    dir.write("study_report.txt", &r.into_bytes())?;
    Ok(dir.written().to_vec())
}

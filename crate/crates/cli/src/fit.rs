use std::path::{Path, PathBuf};

use csmart::data::{parse_long_table, validate, TrialDataset};
use csmart::design::enumerate_cais;
use csmart::gee::{fit, wald_test, FitOptions, FitResult};
use csmart::mean_model::{ContrastVector, MeanModelSpec};
use csmart::working_cov::Corr;
use serde::{Deserialize, Serialize};

use crate::config::{load_toml, read_bytes, sha256_hex, FitConfig, Resolved};
use crate::error::CliError;
use crate::output::{fixed, json, num, OutDir, Report, Tsv};

/// Points per trajectory in `trajectories.tsv`.
const DENSE_POINTS: usize = 41;

/// Everything `contrast` needs to reuse a fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitArtifact {
    pub tool_version: String,
    pub config_hash: String,
    pub data_sha256: String,
    pub config: FitConfig,
    pub parameter_names: Vec<String>,
    pub fit: FitResult,
}

impl FitArtifact {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = read_bytes(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Artifact { path: path.to_path_buf(), message: e.to_string() })
    }
}

/// Reads and checks a dataset. Violations are printed to stderr.
pub fn load_dataset(data: &Path, cfg: &FitConfig) -> Result<(TrialDataset, Vec<u8>, Vec<String>), CliError> {
    let bytes = read_bytes(data)?;
    let ds = parse_long_table(bytes.as_slice(), &cfg.schema, &cfg.design.build()?, &cfg.grid.build()?)?;
    let report = validate(&ds);
    for v in &report.violations {
        eprintln!("violation: cluster {}: {:?}: {}", v.cluster_id, v.kind, v.detail);
    }
    if !report.is_empty() {
        return Err(CliError::Invalid(report.violations.len()));
    }
    Ok((ds, bytes, report.warnings))
}

pub fn run(data: &Path, config: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let (cfg, _): (FitConfig, _) = load_toml(config)?;
    let (ds, data_bytes, warnings) = load_dataset(data, &cfg)?;
    let spec = cfg.mean_model()?;
    let config_hash = Resolved::new("fit", &cfg).input("data", &data_bytes).hash();
    let options = FitOptions {
        tolerance: cfg.fit.tolerance,
        max_iter: cfg.fit.max_iter,
        weights: cfg.weights.clone(),
        adjustments: cfg.adjustments,
    };
    let result = fit(&ds, &spec, &cfg.covariance, &options)?;

    let names = spec.parameter_names();
    let artifact = FitArtifact {
        tool_version: crate::config::VERSION.to_string(),
        config_hash: config_hash.clone(),
        data_sha256: sha256_hex(&data_bytes),
        config: cfg.clone(),
        parameter_names: names.clone(),
        fit: result,
    };
    let mut dir = OutDir::create(out)?;
    dir.write("fit.json", &json(&artifact))?;
    dir.write("theta.tsv", &theta_table(&artifact)?.into_bytes())?;
    dir.write("alpha.tsv", &alpha_table(&artifact.fit).into_bytes())?;
    dir.write("trajectories.tsv", &trajectories(&spec, &artifact.fit, cfg.fit.level)?.into_bytes())?;
    dir.write("fit_report.txt", &report(&artifact, &ds, &warnings)?)?;
    Ok(dir.written().to_vec())
}

struct ThetaRow {
    name: String,
    estimate: f64,
    se: f64,
    statistic: f64,
    ci: (f64, f64),
    p_value: f64,
}

fn theta_rows(a: &FitArtifact) -> Result<Vec<ThetaRow>, CliError> {
    let p = a.parameter_names.len();
    let se = a.fit.standard_errors();
    let theta = a.fit.theta_vec();
    (0..p)
        .map(|k| {
            let mut c = vec![0.0; p];
            c[k] = 1.0;
            let name = a.parameter_names[k].clone();
            // A parameter with zero sandwich variance still gets its estimate reported.
            match wald_test(&a.fit, &ContrastVector { c, label: name.clone() }, a.config.fit.level) {
                Ok(w) => Ok(ThetaRow {
                    name,
                    estimate: w.estimate,
                    se: w.se,
                    statistic: w.statistic,
                    ci: w.ci,
                    p_value: w.p_value,
                }),
                Err(csmart::gee::GeeError::ZeroVariance(_)) => Ok(ThetaRow {
                    name,
                    estimate: theta[k],
                    se: se[k],
                    statistic: f64::NAN,
                    ci: (f64::NAN, f64::NAN),
                    p_value: f64::NAN,
                }),
                Err(e) => Err(e.into()),
            }
        })
        .collect()
}

fn theta_table(a: &FitArtifact) -> Result<Tsv, CliError> {
    let mut t = Tsv::new(&["parameter", "estimate", "se", "statistic", "ci_lower", "ci_upper", "p_value"]);
    for r in theta_rows(a)? {
        t.row(&[r.name, num(r.estimate), num(r.se), num(r.statistic), num(r.ci.0), num(r.ci.1), num(r.p_value)]);
    }
    Ok(t)
}

fn corr_text(c: &Corr) -> (String, String) {
    match c {
        Corr::Independent => ("independent".into(), "0".into()),
        Corr::Ar1(r) => ("ar1".into(), num(*r)),
        Corr::Exchangeable(r) => ("exchangeable".into(), num(*r)),
        Corr::Unstructured(m) => {
            let cells: Vec<String> = m.iter().map(|row| row.iter().map(|v| num(*v)).collect::<Vec<_>>().join(",")).collect();
            ("unstructured".into(), cells.join(";"))
        }
    }
}

fn corr_short(c: &Corr) -> String {
    match c {
        Corr::Independent => "independent".into(),
        Corr::Ar1(r) => format!("ar1 {}", fixed(*r, 4)),
        Corr::Exchangeable(r) => format!("exchangeable {}", fixed(*r, 4)),
        Corr::Unstructured(_) => "unstructured (see alpha.tsv)".into(),
    }
}

fn alpha_table(f: &FitResult) -> Tsv {
    let mut t = Tsv::new(&["cai", "component", "structure", "index", "value"]);
    for (k, d) in f.alpha.cais.iter().enumerate() {
        for (s, v) in f.alpha.sigma2[k].iter().enumerate() {
            t.row(&[d.to_string(), "sigma2".into(), "variance".into(), s.to_string(), num(*v)]);
        }
        for (component, corr) in [("rho_within", &f.alpha.rho_w[k]), ("rho_between", &f.alpha.rho_b[k])] {
            let (structure, value) = corr_text(corr);
            t.row(&[d.to_string(), component.into(), structure, "NA".into(), value]);
        }
    }
    t
}

fn quadratic_form(m: &[Vec<f64>], v: &[f64]) -> f64 {
    m.iter().zip(v).map(|(row, vi)| vi * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()).sum()
}

fn trajectories(spec: &MeanModelSpec, f: &FitResult, level: f64) -> Result<Tsv, CliError> {
    let mut t = Tsv::new(&["cai", "time", "mean", "se", "ci_lower", "ci_upper"]);
    let q = f.reference().quantile(0.5 + level / 2.0);
    let x0 = vec![0.0; spec.covariate_terms.len()];
    let (first, last) = (spec.grid.first(), spec.grid.last());
    for d in enumerate_cais(spec.kind()) {
        for k in 0..DENSE_POINTS {
            let time = if k + 1 == DENSE_POINTS {
                last
            } else {
                first + (last - first) * k as f64 / (DENSE_POINTS - 1) as f64
            };
            let row = spec.design_row(&d, &x0, time)?;
            let mean = spec.mu(&d, &x0, time, &f.theta)?;
            let se = quadratic_form(&f.sigma_theta, &row).max(0.0).sqrt();
            t.row(&[d.to_string(), num(time), num(mean), num(se), num(mean - q * se), num(mean + q * se)]);
        }
    }
    Ok(t)
}

fn report(a: &FitArtifact, ds: &TrialDataset, warnings: &[String]) -> Result<Vec<u8>, CliError> {
    let f = &a.fit;
    let cfg = &a.config;
    let mut r = Report::header("fit", &a.config_hash);
    r.kv("data_sha256", &a.data_sha256);
    r.kv("design", &format!("{:?}", cfg.design.kind));
    let times: Vec<String> = cfg.grid.times.iter().map(|t| num(*t)).collect();
    let knot = cfg.grid.knot.map_or_else(|| "none".to_string(), num);
    r.kv("grid", &format!("{} (knot {knot})", times.join(", ")));
    r.kv("basis", &format!("{:?}", cfg.model.basis));
    r.kv("clusters", &ds.n_clusters().to_string());
    r.kv("individuals", &ds.clusters.iter().map(|c| c.size()).sum::<usize>().to_string());
    r.kv("weights", &format!("{:?}", f.weight_mode));
    r.kv(
        "reference",
        &match f.df {
            Some(df) => format!("Student t, df = {}", fixed(df, 2)),
            None => "standard normal".into(),
        },
    );

    r.section("convergence");
    r.kv("converged", &f.converged.to_string());
    r.kv("iterations", &f.iterations.to_string());
    r.kv("max_delta", &format!("{:.3e}", f.max_delta));
    r.kv("root_norm", &format!("{:.3e}", f.root_norm));
    r.kv("root_certified", &f.root_certified().to_string());
    r.kv("identity_working_covariance", &f.identity_v.to_string());
    r.kv("exact_fit", &f.exact_fit.to_string());
    r.kv("correlation_clipped", &f.alpha.clipped.to_string());
    let applied: Vec<String> = f.adjustments_applied.iter().map(|x| format!("{x:?}")).collect();
    r.kv("adjustments", &if applied.is_empty() { "none".to_string() } else { applied.join(", ") });

    r.section("theta");
    let level_pct = format!("{}%", fixed(cfg.fit.level * 100.0, 1));
    let rows: Vec<Vec<String>> = theta_rows(a)?
        .into_iter()
        .map(|t| {
            vec![
                t.name,
                fixed(t.estimate, 4),
                fixed(t.se, 4),
                fixed(t.statistic, 3),
                format!("[{}, {}]", fixed(t.ci.0, 4), fixed(t.ci.1, 4)),
                fixed(t.p_value, 4),
            ]
        })
        .collect();
    r.table(&["parameter", "estimate", "se", "stat", &format!("{level_pct} ci"), "p"], &rows);

    r.section("working covariance");
    let rows: Vec<Vec<String>> = f
        .alpha
        .cais
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let s2: Vec<String> = f.alpha.sigma2[k].iter().map(|v| fixed(*v, 4)).collect();
            vec![d.to_string(), s2.join(" "), corr_short(&f.alpha.rho_w[k]), corr_short(&f.alpha.rho_b[k])]
        })
        .collect();
    r.table(&["cai", "sigma2 by time", "within", "between"], &rows);

    if !f.notes.is_empty() || !warnings.is_empty() {
        r.section("notes");
        for n in f.notes.iter().chain(warnings) {
            r.line(&format!("- {n}"));
        }
    }
    Ok(r.into_bytes())
}

use std::path::{Path, PathBuf};

use csmart::data::{write_long_table, Schema};
use csmart::design::enumerate_cais;
use csmart::sim::{CovariateLevel, MomentCache, Simulator};
use serde::Serialize;

use crate::config::{load_toml, Resolved, SpecFile};
use crate::error::CliError;
use crate::output::{fixed, num, OutDir, Report, Tsv};

#[derive(Debug, Serialize)]
struct SimulateRun<'a> {
    spec: &'a SpecFile,
    seed: u64,
    n_clusters: usize,
}

pub fn moment_cache(dir: Option<&Path>) -> MomentCache {
    match dir {
        Some(d) => MomentCache::at(d),
        None => MomentCache::from_env(),
    }
}

pub fn run(
    spec_path: &Path,
    seed: u64,
    clusters: Option<usize>,
    cache_dir: Option<&Path>,
    out: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let (file, _): (SpecFile, _) = load_toml(spec_path)?;
    let spec = file.resolve(spec_path)?;
    let n = clusters.unwrap_or(spec.n_clusters);
    if n == 0 {
        return Err(CliError::Usage("--clusters must be positive".into()));
    }
    let config_hash = Resolved::new("simulate", &SimulateRun { spec: &file, seed, n_clusters: n }).hash();
    let sim = Simulator::new(&spec, &file.moments, &moment_cache(cache_dir))?;
    let (ds, truth) = sim.generate_clusters(seed, n);

    let schema = Schema {
        cluster_covariates: spec.covariate_names(CovariateLevel::Cluster),
        individual_covariates: spec.covariate_names(CovariateLevel::Individual),
        ..Schema::default()
    };
    let mut csv = Vec::new();
    write_long_table(&ds, &schema, &mut csv)?;

    let mut tsv = Tsv::new(&["cai", "time", "mean"]);
    for d in enumerate_cais(ds.design.kind()) {
        for (k, &t) in ds.grid.times().iter().enumerate() {
            tsv.row(&[d.to_string(), num(t), num(spec.marginal_mean(&d, k))]);
        }
    }

    let mut r = Report::header("simulate", &config_hash);
    r.kv("seed", &seed.to_string());
    r.kv("clusters", &n.to_string());
    r.kv("individuals", &ds.clusters.iter().map(|c| c.size()).sum::<usize>().to_string());
    let responders = ds.clusters.iter().filter(|c| c.r == 1).count();
    r.kv("responder_fraction", &fixed(responders as f64 / n as f64, 4));
    r.section("clusters by first-stage arm and response");
    let rows: Vec<Vec<String>> = [(1i8, 1u8), (1, 0), (-1, 1), (-1, 0)]
        .iter()
        .map(|&(a1, resp)| {
            let count = ds.clusters.iter().filter(|c| c.a1 == a1 && c.r == resp).count();
            vec![a1.to_string(), resp.to_string(), count.to_string()]
        })
        .collect();
    r.table(&["a1", "r", "clusters"], &rows);
    r.section("clusters consistent with each embedded cai");
    let rows: Vec<Vec<String>> = enumerate_cais(ds.design.kind())
        .iter()
        .map(|d| {
            let count = truth.iter().filter(|t| *t == d).count();
            vec![d.to_string(), count.to_string()]
        })
        .collect();
    r.table(&["latent cai", "clusters"], &rows);

    let mut dir = OutDir::create(out)?;
    dir.write("data.csv", &csv)?;
    dir.write("truth.tsv", &tsv.into_bytes())?;
    dir.write("simulate_report.txt", &r.into_bytes())?;
    Ok(dir.written().to_vec())
}

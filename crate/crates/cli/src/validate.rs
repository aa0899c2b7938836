use std::path::Path;

use csmart::data::{parse_long_table, validate, ValidationReport};

use crate::config::{load_toml, read_bytes, FitConfig};
use crate::error::CliError;

/// Checks a data file against a fit config. Prints findings to stdout.
pub fn run(data: &Path, config: &Path) -> Result<ValidationReport, CliError> {
    let (cfg, _): (FitConfig, _) = load_toml(config)?;
    let bytes = read_bytes(data)?;
    let ds = parse_long_table(bytes.as_slice(), &cfg.schema, &cfg.design.build()?, &cfg.grid.build()?)?;
    let report = validate(&ds);
    println!("clusters: {}", ds.n_clusters());
    println!("violations: {}", report.violations.len());
    for v in &report.violations {
        println!("  cluster {}: {:?}: {}", v.cluster_id, v.kind, v.detail);
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
    if report.is_empty() {
        Ok(report)
    } else {
        Err(CliError::Invalid(report.violations.len()))
    }
}

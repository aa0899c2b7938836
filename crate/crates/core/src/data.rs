//! Observed-data model for a clustered SMART with repeated measures, plus
//! long-format ingestion and validation.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{consistency_indicator, enumerate_cais, DesignKind, Pathway, SmartDesign};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("time grid must contain at least one point")]
    EmptyGrid,
    #[error("time grid must be strictly increasing (t[{index}] = {value})")]
    NonIncreasingTimes { index: usize, value: f64 },
    #[error("knot {knot} must lie in [{first}, {last})")]
    KnotOutOfRange { knot: f64, first: f64, last: f64 },
    #[error("missing column '{0}' in header")]
    MissingColumn(String),
    #[error("missing outcome for cluster {cluster}, individual {individual}, time {time}")]
    MissingCell { cluster: String, individual: String, time: f64 },
    #[error("inconsistent cluster {cluster}: {reason}")]
    InconsistentCluster { cluster: String, reason: String },
    #[error("time {value} (line {line}) is not on the grid")]
    UnknownTime { value: String, line: usize },
    #[error("bad code '{value}' in column '{column}' (line {line})")]
    BadTreatmentCode { column: String, value: String, line: usize },
    #[error("cannot parse number '{value}' in column '{column}' (line {line})")]
    BadNumber { column: String, value: String, line: usize },
    #[error("duplicate row for cluster {cluster}, individual {individual}, time {time}")]
    DuplicateRow { cluster: String, individual: String, time: f64 },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered measurement times `t_0 < ... < t_T`, optionally with a knot
/// `t* ∈ [t_0, t_T)` at the second decision point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
    knot: Option<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>, knot: Option<f64>) -> Result<Self, DataError> {
        if times.is_empty() {
            return Err(DataError::EmptyGrid);
        }
        for (i, w) in times.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(DataError::NonIncreasingTimes { index: i + 1, value: w[1] });
            }
        }
        if let Some(k) = knot {
            let (first, last) = (times[0], times[times.len() - 1]);
            if !(k >= first && k < last) {
                return Err(DataError::KnotOutOfRange { knot: k, first, last });
            }
        }
        Ok(Self { times, knot })
    }

    pub fn with_knot(times: Vec<f64>, knot: f64) -> Result<Self, DataError> {
        Self::new(times, Some(knot))
    }

    /// The three-point grid `t = 0, 1, 2` with knot at 1.
    pub fn three_point() -> Self {
        Self { times: vec![0.0, 1.0, 2.0], knot: Some(1.0) }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of measurement occasions, `T + 1`.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.times[0]
    }

    pub fn last(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn knot(&self) -> Option<f64> {
        self.knot
    }

    /// Index `s` with `t_s <= t* < t_{s+1}`.
    pub fn knot_index(&self) -> Option<usize> {
        let k = self.knot?;
        self.times.windows(2).position(|w| w[0] <= k && k < w[1])
    }

    /// Exact lookup of a time on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&x| x == t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: String,
    pub x: Vec<f64>,
    /// Outcomes at every grid time.
    pub y: Vec<f64>,
}

/// One cluster's baseline covariates, treatment/response history and outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub id: String,
    pub a1: i8,
    pub r: u8,
    /// Second-stage arm for non-responders; the unconditional second arm in design IV.
    pub a2nr: Option<i8>,
    /// Second-stage arm for responders (design I only).
    pub a2r: Option<i8>,
    pub x_cluster: Vec<f64>,
    pub individuals: Vec<Individual>,
}

impl ClusterRecord {
    pub fn size(&self) -> usize {
        self.individuals.len()
    }

    /// Outcomes stacked individual-major, time-minor.
    pub fn stacked_outcomes(&self) -> Vec<f64> {
        self.individuals.iter().flat_map(|ind| ind.y.iter().copied()).collect()
    }

    /// Design-consistency of the recorded second-stage slots.
    pub fn design_consistency(&self, kind: DesignKind) -> Result<(), String> {
        let (a1, r) = (self.a1, self.r);
        match kind {
            DesignKind::II => {
                if self.a2nr.is_some() != (r == 0) {
                    return Err(format!("a2nr must be present iff r = 0 (r = {r})"));
                }
                if self.a2r.is_some() {
                    return Err("a2r is never recorded in design II".into());
                }
            }
            DesignKind::III => {
                if self.a2nr.is_some() != (r == 0 && a1 == 1) {
                    return Err(format!("a2nr must be present iff r = 0 and a1 = +1 (a1 = {a1}, r = {r})"));
                }
                if self.a2r.is_some() {
                    return Err("a2r is never recorded in design III".into());
                }
            }
            DesignKind::IV => {
                if self.a2nr.is_none() {
                    return Err("design IV requires a second-stage arm in a2nr".into());
                }
                if self.a2r.is_some() {
                    return Err("a2r is never recorded in design IV".into());
                }
            }
            DesignKind::I => {
                if self.a2nr.is_some() != (r == 0) {
                    return Err(format!("a2nr must be present iff r = 0 (r = {r})"));
                }
                if self.a2r.is_some() != (r == 1) {
                    return Err(format!("a2r must be present iff r = 1 (r = {r})"));
                }
            }
        }
        Ok(())
    }
}

impl Pathway for ClusterRecord {
    fn a1(&self) -> i8 {
        self.a1
    }
    fn r(&self) -> u8 {
        self.r
    }
    fn a2nr(&self) -> Option<i8> {
        self.a2nr
    }
    fn a2r(&self) -> Option<i8> {
        self.a2r
    }
}

/// A complete cSMART dataset. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDataset {
    pub design: SmartDesign,
    pub grid: TimeGrid,
    pub clusters: Vec<ClusterRecord>,
    pub cluster_covariates: Vec<String>,
    pub individual_covariates: Vec<String>,
}

impl TrialDataset {
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Restricts every outcome vector to the last grid time.
    pub fn end_of_study(&self) -> TrialDataset {
        let last = self.grid.len() - 1;
        let grid = TimeGrid::new(vec![self.grid.last()], None).expect("single point grid");
        let clusters = self
            .clusters
            .iter()
            .map(|c| ClusterRecord {
                individuals: c
                    .individuals
                    .iter()
                    .map(|ind| Individual { id: ind.id.clone(), x: ind.x.clone(), y: vec![ind.y[last]] })
                    .collect(),
                ..c.clone()
            })
            .collect();
        TrialDataset { grid, clusters, ..self.clone() }
    }
}

/// Codes accepted for a binary column. Values not listed are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryCodes {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

impl BinaryCodes {
    fn lookup(&self, value: &str) -> Option<bool> {
        if self.positive.iter().any(|c| c == value) {
            Some(true)
        } else if self.negative.iter().any(|c| c == value) {
            Some(false)
        } else {
            None
        }
    }
}

/// Column-name and code mapping for long-format tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schema {
    pub cluster_id: String,
    pub individual_id: String,
    pub time: String,
    pub y: String,
    pub a1: String,
    pub r: String,
    pub a2nr: String,
    /// Responder second-stage column; only read for design I.
    pub a2r: Option<String>,
    pub cluster_covariates: Vec<String>,
    pub individual_covariates: Vec<String>,
    /// `','` or `'\t'`.
    pub delimiter: char,
    /// Maps to `+1` / `-1`.
    pub treatment_codes: BinaryCodes,
    /// Maps to `1` / `0`.
    pub response_codes: BinaryCodes,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            cluster_id: "cluster_id".into(),
            individual_id: "individual_id".into(),
            time: "time".into(),
            y: "y".into(),
            a1: "a1".into(),
            r: "r".into(),
            a2nr: "a2nr".into(),
            a2r: None,
            cluster_covariates: Vec::new(),
            individual_covariates: Vec::new(),
            delimiter: ',',
            treatment_codes: BinaryCodes { positive: vec!["1".into(), "+1".into()], negative: vec!["-1".into()] },
            response_codes: BinaryCodes { positive: vec!["1".into()], negative: vec!["0".into()] },
        }
    }
}

fn is_absent(s: &str) -> bool {
    s.is_empty() || s == "NA"
}

struct RowCols {
    cluster: usize,
    individual: usize,
    time: usize,
    y: usize,
    a1: usize,
    r: usize,
    a2nr: usize,
    a2r: Option<usize>,
    xc: Vec<usize>,
    xi: Vec<usize>,
}

#[derive(Default)]
struct ClusterAcc {
    a1: i8,
    r: u8,
    a2nr: Option<i8>,
    a2r: Option<i8>,
    x: Vec<f64>,
    order: Vec<String>,
    individuals: HashMap<String, (Vec<f64>, Vec<Option<f64>>)>,
}

/// Parses a delimited long table (one row per cluster × individual × time).
pub fn parse_long_table<R: Read>(
    source: R,
    schema: &Schema,
    design: &SmartDesign,
    grid: &TimeGrid,
) -> Result<TrialDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let kind = design.kind();
    let cols = RowCols {
        cluster: col(&schema.cluster_id)?,
        individual: col(&schema.individual_id)?,
        time: col(&schema.time)?,
        y: col(&schema.y)?,
        a1: col(&schema.a1)?,
        r: if kind == DesignKind::IV { col(&schema.r).unwrap_or(usize::MAX) } else { col(&schema.r)? },
        a2nr: col(&schema.a2nr)?,
        a2r: match (&schema.a2r, kind) {
            (Some(name), _) => Some(col(name)?),
            (None, DesignKind::I) => return Err(DataError::MissingColumn("a2r".into())),
            (None, _) => None,
        },
        xc: schema.cluster_covariates.iter().map(|c| col(c)).collect::<Result<_, _>>()?,
        xi: schema.individual_covariates.iter().map(|c| col(c)).collect::<Result<_, _>>()?,
    };

    let mut order: Vec<String> = Vec::new();
    let mut acc: HashMap<String, ClusterAcc> = HashMap::new();

    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = row_idx + 2;
        let field = |i: usize| record.get(i).unwrap_or("");
        let number = |i: usize, name: &str| -> Result<f64, DataError> {
            field(i).parse::<f64>().map_err(|_| DataError::BadNumber {
                column: name.to_string(),
                value: field(i).to_string(),
                line,
            })
        };
        let arm = |i: usize, name: &str| -> Result<Option<i8>, DataError> {
            let v = field(i);
            if is_absent(v) {
                return Ok(None);
            }
            match schema.treatment_codes.lookup(v) {
                Some(true) => Ok(Some(1)),
                Some(false) => Ok(Some(-1)),
                None => Err(DataError::BadTreatmentCode { column: name.into(), value: v.into(), line }),
            }
        };

        let cid = field(cols.cluster).to_string();
        let iid = field(cols.individual).to_string();
        let time_str = field(cols.time);
        let t = number(cols.time, &schema.time)?;
        let ti = grid.index_of(t).ok_or_else(|| DataError::UnknownTime { value: time_str.into(), line })?;
        let a1 = arm(cols.a1, &schema.a1)?.ok_or_else(|| DataError::BadTreatmentCode {
            column: schema.a1.clone(),
            value: field(cols.a1).into(),
            line,
        })?;
        let r = if cols.r == usize::MAX || (kind == DesignKind::IV && is_absent(field(cols.r))) {
            0
        } else {
            match schema.response_codes.lookup(field(cols.r)) {
                Some(true) => 1,
                Some(false) => 0,
                None => {
                    return Err(DataError::BadTreatmentCode {
                        column: schema.r.clone(),
                        value: field(cols.r).into(),
                        line,
                    })
                }
            }
        };
        let a2nr = arm(cols.a2nr, &schema.a2nr)?;
        let a2r = match cols.a2r {
            Some(i) => arm(i, schema.a2r.as_deref().unwrap_or("a2r"))?,
            None => None,
        };
        let xc = cols
            .xc
            .iter()
            .zip(&schema.cluster_covariates)
            .map(|(&i, n)| number(i, n))
            .collect::<Result<Vec<_>, _>>()?;
        let xi = cols
            .xi
            .iter()
            .zip(&schema.individual_covariates)
            .map(|(&i, n)| number(i, n))
            .collect::<Result<Vec<_>, _>>()?;
        let y_raw = field(cols.y);
        let y = if is_absent(y_raw) {
            return Err(DataError::MissingCell { cluster: cid, individual: iid, time: t });
        } else {
            number(cols.y, &schema.y)?
        };

        let inconsistent = |reason: String| DataError::InconsistentCluster { cluster: cid.clone(), reason };
        let entry = match acc.get_mut(&cid) {
            Some(e) => {
                if e.a1 != a1 || e.r != r || e.a2nr != a2nr || e.a2r != a2r {
                    return Err(inconsistent(format!("treatment/response disagree across rows (line {line})")));
                }
                if e.x != xc {
                    return Err(inconsistent(format!("cluster covariates disagree across rows (line {line})")));
                }
                e
            }
            None => {
                order.push(cid.clone());
                acc.entry(cid.clone()).or_insert(ClusterAcc { a1, r, a2nr, a2r, x: xc, ..Default::default() })
            }
        };
        let ind = match entry.individuals.get_mut(&iid) {
            Some(ind) => {
                if ind.0 != xi {
                    return Err(inconsistent(format!("individual {iid} covariates disagree (line {line})")));
                }
                ind
            }
            None => {
                entry.order.push(iid.clone());
                entry.individuals.entry(iid.clone()).or_insert((xi, vec![None; grid.len()]))
            }
        };
        if ind.1[ti].is_some() {
            return Err(DataError::DuplicateRow { cluster: cid, individual: iid, time: t });
        }
        ind.1[ti] = Some(y);
    }

    let mut clusters = Vec::with_capacity(order.len());
    for cid in order {
        let mut a = acc.remove(&cid).expect("cluster accumulated");
        let mut individuals = Vec::with_capacity(a.order.len());
        for iid in &a.order {
            let (x, ys) = a.individuals.remove(iid).expect("individual accumulated");
            let mut y = Vec::with_capacity(ys.len());
            for (k, v) in ys.into_iter().enumerate() {
                y.push(v.ok_or_else(|| DataError::MissingCell {
                    cluster: cid.clone(),
                    individual: iid.clone(),
                    time: grid.times()[k],
                })?);
            }
            individuals.push(Individual { id: iid.clone(), x, y });
        }
        let record = ClusterRecord {
            id: cid.clone(),
            a1: a.a1,
            r: a.r,
            a2nr: a.a2nr,
            a2r: a.a2r,
            x_cluster: std::mem::take(&mut a.x),
            individuals,
        };
        record
            .design_consistency(kind)
            .map_err(|reason| DataError::InconsistentCluster { cluster: cid.clone(), reason })?;
        clusters.push(record);
    }

    Ok(TrialDataset {
        design: design.clone(),
        grid: grid.clone(),
        clusters,
        cluster_covariates: schema.cluster_covariates.clone(),
        individual_covariates: schema.individual_covariates.clone(),
    })
}

/// Writes `ds` in long format using the column names of `schema`.
/// Treatment arms are written as `1` / `-1`, response as `1` / `0`,
/// absent slots as `NA`.
pub fn write_long_table<W: Write>(ds: &TrialDataset, schema: &Schema, sink: W) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new().delimiter(schema.delimiter as u8).from_writer(sink);
    let mut header = vec![
        schema.cluster_id.clone(),
        schema.individual_id.clone(),
        schema.time.clone(),
        schema.y.clone(),
        schema.a1.clone(),
        schema.r.clone(),
        schema.a2nr.clone(),
    ];
    if let Some(a2r) = &schema.a2r {
        header.push(a2r.clone());
    }
    header.extend(schema.cluster_covariates.iter().cloned());
    header.extend(schema.individual_covariates.iter().cloned());
    w.write_record(&header)?;
    let arm = |v: Option<i8>| v.map_or_else(|| "NA".to_string(), |a| a.to_string());
    for c in &ds.clusters {
        for ind in &c.individuals {
            for (k, &t) in ds.grid.times().iter().enumerate() {
                let mut row = vec![
                    c.id.clone(),
                    ind.id.clone(),
                    format_float(t),
                    format_float(ind.y[k]),
                    c.a1.to_string(),
                    c.r.to_string(),
                    arm(c.a2nr),
                ];
                if schema.a2r.is_some() {
                    row.push(arm(c.a2r));
                }
                row.extend(c.x_cluster.iter().map(|&v| format_float(v)));
                row.extend(ind.x.iter().map(|&v| format_float(v)));
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViolationKind {
    MissingCell,
    DesignConsistency,
    BadTreatmentCode,
    CovariateSchema,
    EmptyCluster,
    DuplicateId,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub cluster_id: String,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Non-fatal findings, e.g. an embedded cAI with no consistent cluster.
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

/// Checks every dataset invariant; never fails.
pub fn validate(ds: &TrialDataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let kind = ds.design.kind();
    let expected_len = ds.grid.len();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let push = |report: &mut ValidationReport, c: &ClusterRecord, kind: ViolationKind, detail: String| {
        report.violations.push(Violation { cluster_id: c.id.clone(), kind, detail });
    };
    for c in &ds.clusters {
        *seen.entry(c.id.as_str()).or_default() += 1;
        if c.a1 != 1 && c.a1 != -1 {
            push(&mut report, c, ViolationKind::BadTreatmentCode, format!("a1 = {}", c.a1));
        }
        if c.r > 1 {
            push(&mut report, c, ViolationKind::BadTreatmentCode, format!("r = {}", c.r));
        }
        for (slot, v) in [("a2nr", c.a2nr), ("a2r", c.a2r)] {
            if let Some(v) = v {
                if v != 1 && v != -1 {
                    push(&mut report, c, ViolationKind::BadTreatmentCode, format!("{slot} = {v}"));
                }
            }
        }
        if let Err(reason) = c.design_consistency(kind) {
            push(&mut report, c, ViolationKind::DesignConsistency, reason);
        }
        if c.individuals.is_empty() {
            push(&mut report, c, ViolationKind::EmptyCluster, "cluster has no individuals".into());
        }
        if c.x_cluster.len() != ds.cluster_covariates.len() {
            push(
                &mut report,
                c,
                ViolationKind::CovariateSchema,
                format!("{} cluster covariates, schema declares {}", c.x_cluster.len(), ds.cluster_covariates.len()),
            );
        }
        if c.x_cluster.iter().any(|v| !v.is_finite()) {
            push(&mut report, c, ViolationKind::NonFinite, "non-finite cluster covariate".into());
        }
        let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
        for ind in &c.individuals {
            *ids.entry(ind.id.as_str()).or_default() += 1;
            if ind.y.len() != expected_len {
                push(
                    &mut report,
                    c,
                    ViolationKind::MissingCell,
                    format!("individual {} has {} outcomes, grid has {}", ind.id, ind.y.len(), expected_len),
                );
            }
            if ind.y.iter().chain(&ind.x).any(|v| !v.is_finite()) {
                push(&mut report, c, ViolationKind::NonFinite, format!("individual {} has non-finite values", ind.id));
            }
            if ind.x.len() != ds.individual_covariates.len() {
                push(
                    &mut report,
                    c,
                    ViolationKind::CovariateSchema,
                    format!("individual {} has {} covariates", ind.id, ind.x.len()),
                );
            }
        }
        for (id, k) in ids {
            if k > 1 {
                push(&mut report, c, ViolationKind::DuplicateId, format!("individual {id} appears {k} times"));
            }
        }
    }
    for (id, k) in seen {
        if k > 1 {
            report.violations.push(Violation {
                cluster_id: id.to_string(),
                kind: ViolationKind::DuplicateId,
                detail: format!("cluster appears {k} times"),
            });
        }
    }
    for d in enumerate_cais(kind) {
        if !ds.clusters.iter().any(|c| consistency_indicator(c, &d, kind) == 1) {
            report.warnings.push(format!("no cluster is consistent with embedded cAI {d}"));
        }
    }
    report
}

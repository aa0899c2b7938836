//! Randomization structures of two-stage SMARTs, their embedded adaptive
//! interventions, consistency indicators and inverse-probability weights.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("randomization probability for {cell} must lie strictly in (0, 1), got {value}")]
    Positivity { cell: String, value: f64 },
    #[error("missing second-stage probability for cell {0}")]
    MissingCell(String),
    #[error("design {kind:?} does not randomize cell {cell}")]
    UnexpectedCell { kind: DesignKind, cell: String },
    #[error("cannot parse embedded intervention '{0}'")]
    BadCai(String),
}

/// The four two-stage SMART layouts.
///
/// * `I`: responders and non-responders are both re-randomized.
/// * `II`: the prototypical design; only non-responders are re-randomized.
/// * `III`: only non-responders to `a1 = +1` are re-randomized.
/// * `IV`: every cluster is re-randomized, with no embedded tailoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DesignKind {
    #[serde(rename = "I")]
    I,
    #[serde(rename = "II")]
    II,
    #[serde(rename = "III")]
    III,
    #[serde(rename = "IV")]
    IV,
}

impl DesignKind {
    /// Whether clusters with first-stage arm `a1` and response `r` receive a
    /// second randomization.
    pub fn randomizes(self, a1: i8, r: u8) -> bool {
        match self {
            DesignKind::I | DesignKind::IV => true,
            DesignKind::II => r == 0,
            DesignKind::III => a1 == 1 && r == 0,
        }
    }

    /// Second-stage randomization cells in canonical order. Design IV ignores
    /// response, so its cells carry `r = None`.
    pub fn randomization_cells(self) -> Vec<StageTwoCell> {
        match self {
            DesignKind::I => [(1, 1), (1, 0), (-1, 1), (-1, 0)]
                .into_iter()
                .map(|(a1, r)| StageTwoCell { a1, r: Some(r) })
                .collect(),
            DesignKind::II => vec![
                StageTwoCell { a1: 1, r: Some(0) },
                StageTwoCell { a1: -1, r: Some(0) },
            ],
            DesignKind::III => vec![StageTwoCell { a1: 1, r: Some(0) }],
            DesignKind::IV => vec![StageTwoCell { a1: 1, r: None }, StageTwoCell { a1: -1, r: None }],
        }
    }

    pub fn cell_for(self, a1: i8, r: u8) -> Option<StageTwoCell> {
        if !self.randomizes(a1, r) {
            return None;
        }
        Some(match self {
            DesignKind::IV => StageTwoCell { a1, r: None },
            _ => StageTwoCell { a1, r: Some(r) },
        })
    }
}

/// A second-stage randomization cell `(a1, r)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StageTwoCell {
    pub a1: i8,
    pub r: Option<u8>,
}

impl fmt::Display for StageTwoCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.r {
            Some(r) => write!(f, "(a1={}, r={})", self.a1, r),
            None => write!(f, "(a1={})", self.a1),
        }
    }
}

/// A SMART randomization structure with its assignment probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmartDesign {
    kind: DesignKind,
    p_a1: f64,
    /// P(A2 = +1 | cell), aligned with `kind.randomization_cells()`.
    p_a2: Vec<f64>,
}

impl SmartDesign {
    pub fn new(
        kind: DesignKind,
        p_a1: f64,
        p_a2: &[(StageTwoCell, f64)],
    ) -> Result<Self, DesignError> {
        check_prob("A1", p_a1)?;
        for (cell, _) in p_a2 {
            if !kind.randomization_cells().contains(cell) {
                return Err(DesignError::UnexpectedCell { kind, cell: cell.to_string() });
            }
        }
        let mut probs = Vec::new();
        for cell in kind.randomization_cells() {
            let p = p_a2
                .iter()
                .find(|(c, _)| *c == cell)
                .map(|(_, p)| *p)
                .ok_or_else(|| DesignError::MissingCell(cell.to_string()))?;
            check_prob(&cell.to_string(), p)?;
            probs.push(p);
        }
        Ok(Self { kind, p_a1, p_a2: probs })
    }

    /// All randomizations fair (probability 1/2).
    pub fn balanced(kind: DesignKind) -> Self {
        let n = kind.randomization_cells().len();
        Self { kind, p_a1: 0.5, p_a2: vec![0.5; n] }
    }

    pub fn kind(&self) -> DesignKind {
        self.kind
    }

    pub fn p_a1(&self) -> f64 {
        self.p_a1
    }

    /// Probability of first-stage arm `a1`.
    pub fn prob_a1(&self, a1: i8) -> f64 {
        if a1 == 1 {
            self.p_a1
        } else {
            1.0 - self.p_a1
        }
    }

    /// P(A2 = +1) in `cell`, or `None` if the cell is not randomized.
    pub fn p_a2(&self, cell: StageTwoCell) -> Option<f64> {
        self.kind
            .randomization_cells()
            .iter()
            .position(|c| *c == cell)
            .map(|i| self.p_a2[i])
    }

    pub fn stage_two_probs(&self) -> Vec<(StageTwoCell, f64)> {
        self.kind.randomization_cells().into_iter().zip(self.p_a2.iter().copied()).collect()
    }

    /// Probability of observing second-stage arm `a2` given `(a1, r)`.
    pub fn prob_a2(&self, a1: i8, r: u8, a2: i8) -> Option<f64> {
        let cell = self.kind.cell_for(a1, r)?;
        let p = self.p_a2(cell)?;
        Some(if a2 == 1 { p } else { 1.0 - p })
    }
}

fn check_prob(cell: &str, p: f64) -> Result<(), DesignError> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(DesignError::Positivity { cell: cell.to_string(), value: p })
    }
}

/// An embedded clustered adaptive intervention `(a1, a2R, a2NR)`.
///
/// Design IV carries its unconditional second-stage arm in the `a2nr` slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbeddedCai {
    pub a1: i8,
    pub a2r: Option<i8>,
    pub a2nr: Option<i8>,
}

impl EmbeddedCai {
    pub const fn new(a1: i8, a2r: Option<i8>, a2nr: Option<i8>) -> Self {
        Self { a1, a2r, a2nr }
    }

    /// Prototypical-design shorthand `(a1, a2NR)`.
    pub const fn proto(a1: i8, a2nr: i8) -> Self {
        Self { a1, a2r: None, a2nr: Some(a2nr) }
    }

    /// Parses `"(1,-1)"`, `"1,-1"` or `"(1,.,-1)"`; `.` or `·` marks an absent slot.
    /// Two entries are read as `(a1, a2NR)`, three as `(a1, a2R, a2NR)`.
    pub fn parse(text: &str) -> Result<Self, DesignError> {
        let bad = || DesignError::BadCai(text.to_string());
        let inner = text.trim().trim_start_matches('(').trim_end_matches(')');
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        let slot = |s: &str| -> Result<Option<i8>, DesignError> {
            match s {
                "." | "·" | "" => Ok(None),
                "1" | "+1" => Ok(Some(1)),
                "-1" | "−1" => Ok(Some(-1)),
                _ => Err(bad()),
            }
        };
        let a1 = slot(parts.first().copied().ok_or_else(bad)?)?.ok_or_else(bad)?;
        match parts.len() {
            1 => Ok(Self::new(a1, None, None)),
            2 => Ok(Self::new(a1, None, slot(parts[1])?)),
            3 => Ok(Self::new(a1, slot(parts[1])?, slot(parts[2])?)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for EmbeddedCai {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |v: Option<i8>| v.map_or_else(|| "·".to_string(), |x| x.to_string());
        match self.a2r {
            Some(_) => write!(f, "({},{},{})", self.a1, s(self.a2r), s(self.a2nr)),
            None => write!(f, "({},{})", self.a1, s(self.a2nr)),
        }
    }
}

/// Treatment/response history of one cluster, as needed for indicators and weights.
pub trait Pathway {
    fn a1(&self) -> i8;
    fn r(&self) -> u8;
    fn a2nr(&self) -> Option<i8>;
    fn a2r(&self) -> Option<i8>;
}

/// The embedded cAIs of `kind` in canonical order: lexicographic on
/// `(a1, a2R, a2NR)` with `+1` before `-1`.
pub fn enumerate_cais(kind: DesignKind) -> Vec<EmbeddedCai> {
    const ARMS: [i8; 2] = [1, -1];
    let mut out = Vec::new();
    for a1 in ARMS {
        match kind {
            DesignKind::I => {
                for a2r in ARMS {
                    for a2nr in ARMS {
                        out.push(EmbeddedCai::new(a1, Some(a2r), Some(a2nr)));
                    }
                }
            }
            DesignKind::II | DesignKind::IV => {
                for a2nr in ARMS {
                    out.push(EmbeddedCai::proto(a1, a2nr));
                }
            }
            DesignKind::III => {
                if a1 == 1 {
                    for a2nr in ARMS {
                        out.push(EmbeddedCai::proto(a1, a2nr));
                    }
                } else {
                    out.push(EmbeddedCai::new(a1, None, None));
                }
            }
        }
    }
    out
}

/// 1 iff the cluster's observed `(a1, r, a2)` could have arisen under `d`.
pub fn consistency_indicator<P: Pathway + ?Sized>(cluster: &P, d: &EmbeddedCai, kind: DesignKind) -> u8 {
    if cluster.a1() != d.a1 {
        return 0;
    }
    let ok = match kind {
        DesignKind::I => {
            if cluster.r() == 1 {
                cluster.a2r() == d.a2r
            } else {
                cluster.a2nr() == d.a2nr
            }
        }
        DesignKind::II => cluster.r() == 1 || cluster.a2nr() == d.a2nr,
        DesignKind::III => cluster.a1() == -1 || cluster.r() == 1 || cluster.a2nr() == d.a2nr,
        DesignKind::IV => cluster.a2nr() == d.a2nr,
    };
    u8::from(ok)
}

/// The second-stage arm actually received, if that stage was randomized.
pub fn observed_a2<P: Pathway + ?Sized>(cluster: &P, kind: DesignKind) -> Option<i8> {
    if !kind.randomizes(cluster.a1(), cluster.r()) {
        return None;
    }
    match kind {
        DesignKind::I if cluster.r() == 1 => cluster.a2r(),
        _ => cluster.a2nr(),
    }
}

/// Inverse joint randomization probability of the observed pathway.
/// Stages without a randomization contribute a factor of one.
pub fn design_weight<P: Pathway + ?Sized>(cluster: &P, design: &SmartDesign) -> f64 {
    let mut prob = design.prob_a1(cluster.a1());
    if let Some(a2) = observed_a2(cluster, design.kind()) {
        prob *= design
            .prob_a2(cluster.a1(), cluster.r(), a2)
            .expect("randomized cell has a probability");
    }
    1.0 / prob
}

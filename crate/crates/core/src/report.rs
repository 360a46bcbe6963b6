//! Stratified cohort counts and comparison against a reference table.
//!
//! Every classified patient is a case; a case is hospitalized when its
//! status is [`MatchStatus::Matched`]. Percentages are kept as exact tenths
//! of a percent, rounded half away from zero.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use serde::Deserialize;
use thiserror::Error;

use crate::model::{Demographics, MatchOutcome, MatchStatus, Sex};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("percentage of zero cases is undefined")]
    ZeroDenominator,
    #[error("age bins must be non-empty and strictly ascending, got {0:?}")]
    InvalidBins(Vec<u32>),
    #[error("reference stratum {0:?} is not present in the cohort")]
    StratumMismatch(String),
    #[error("reference stratum {stratum:?} states {stated}% but its counts give {computed}%")]
    DataInconsistency { stratum: String, stated: String, computed: Percent },
    #[error("reference table: {0}")]
    Reference(String),
}

/// A percentage with one decimal, stored as tenths of a percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Percent(pub i64);

impl Percent {
    pub fn tenths(self) -> i64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 10.0
    }

    /// Nearest tenth, half away from zero.
    pub fn from_f64(value: f64) -> Percent {
        Percent((value * 10.0).round() as i64)
    }
}

impl std::ops::Sub for Percent {
    type Output = Percent;

    fn sub(self, rhs: Percent) -> Percent {
        Percent(self.0 - rhs.0)
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{}", abs / 10, abs % 10)
    }
}

/// `100 * hospitalized / cases` at one decimal, half away from zero.
pub fn percent_hospitalized(hospitalized: u64, cases: u64) -> Result<Percent, ReportError> {
    if cases == 0 {
        return Err(ReportError::ZeroDenominator);
    }
    let (h, c) = (u128::from(hospitalized), u128::from(cases));
    // floor((1000 h + c/2) / c) == round-half-up of 1000 h / c for h, c >= 0
    Ok(Percent(((2000 * h + c) / (2 * c)) as i64))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgeBins {
    boundaries: Vec<u32>,
}

impl Default for AgeBins {
    fn default() -> Self {
        AgeBins { boundaries: vec![18, 50, 65] }
    }
}

impl AgeBins {
    pub fn new(boundaries: Vec<u32>) -> Result<Self, ReportError> {
        if boundaries.is_empty() || boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ReportError::InvalidBins(boundaries));
        }
        Ok(AgeBins { boundaries })
    }

    pub fn boundaries(&self) -> &[u32] {
        &self.boundaries
    }

    /// Slot 0 is below the first bound, slots 1..=n the bins, n+1 unknown.
    fn slot(&self, age: Option<u32>) -> usize {
        match age {
            None => self.boundaries.len() + 1,
            Some(a) => self.boundaries.partition_point(|&b| b <= a),
        }
    }

    fn slot_label(&self, slot: usize) -> String {
        let n = self.boundaries.len();
        match slot {
            0 => format!("<{}", self.boundaries[0]),
            s if s == n => format!("{}+", self.boundaries[n - 1]),
            s if s < n => format!("{}-{}", self.boundaries[s - 1], self.boundaries[s] - 1),
            _ => "unknown".to_string(),
        }
    }

    /// Labels of the regular bins, e.g. `18-49`, `50-64`, `65+`.
    pub fn labels(&self) -> Vec<String> {
        (1..=self.boundaries.len()).map(|s| self.slot_label(s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortRow {
    pub stratum: String,
    pub cases: u64,
    pub hospitalized: u64,
    /// Absent when there are no cases.
    pub percent: Option<Percent>,
}

impl CohortRow {
    fn new(stratum: String, cases: u64, hospitalized: u64) -> Self {
        CohortRow { stratum, cases, hospitalized, percent: percent_hospitalized(hospitalized, cases).ok() }
    }
}

const SEXES: usize = 3;

fn sex_index(sex: Sex) -> usize {
    Sex::ALL.iter().position(|&s| s == sex).expect("listed")
}

/// Mergeable (cases, hospitalized) tallies per age slot and sex.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortCounts {
    bins: AgeBins,
    cells: Vec<[(u64, u64); SEXES]>,
}

impl CohortCounts {
    pub fn new(bins: AgeBins) -> Self {
        let slots = bins.boundaries.len() + 2;
        CohortCounts { bins, cells: vec![[(0, 0); SEXES]; slots] }
    }

    /// Patients missing from `demographics` are tallied as unknown age, sex U.
    pub fn add(&mut self, outcome: &MatchOutcome, demographics: &BTreeMap<String, Demographics>) {
        let demo = demographics.get(&outcome.patient_id);
        let slot = self.bins.slot(demo.map(|d| d.age));
        let sex = sex_index(demo.map_or(Sex::U, |d| d.sex));
        let cell = &mut self.cells[slot][sex];
        cell.0 += 1;
        cell.1 += u64::from(outcome.status == MatchStatus::Matched);
    }

    pub fn merge(mut self, other: &CohortCounts) -> CohortCounts {
        assert_eq!(self.bins, other.bins, "cannot merge counts over different bins");
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            for (x, y) in a.iter_mut().zip(b) {
                x.0 += y.0;
                x.1 += y.1;
            }
        }
        self
    }

    fn slot_total(&self, slot: usize) -> (u64, u64) {
        self.cells[slot].iter().fold((0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1))
    }

    /// Age rows, then `all`; with `stratify_sex`, one `age:sex` row per
    /// reported age stratum and sex followed by `all:sex` marginals. The
    /// below-first-bin and unknown strata are reported only when non-empty.
    pub fn rows(&self, stratify_sex: bool) -> Vec<CohortRow> {
        let n = self.bins.boundaries.len();
        let slots: Vec<usize> = (0..n + 2)
            .filter(|&s| (1..=n).contains(&s) || self.slot_total(s).0 > 0)
            .collect();

        let mut rows = Vec::new();
        let mut all = (0, 0);
        for &s in &slots {
            let (c, h) = self.slot_total(s);
            all = (all.0 + c, all.1 + h);
            rows.push(CohortRow::new(self.bins.slot_label(s), c, h));
        }
        rows.push(CohortRow::new("all".into(), all.0, all.1));

        if stratify_sex {
            let mut marginal = [(0u64, 0u64); SEXES];
            for &s in &slots {
                for (i, sex) in Sex::ALL.iter().enumerate() {
                    let (c, h) = self.cells[s][i];
                    marginal[i] = (marginal[i].0 + c, marginal[i].1 + h);
                    rows.push(CohortRow::new(format!("{}:{}", self.bins.slot_label(s), sex.as_str()), c, h));
                }
            }
            for (i, sex) in Sex::ALL.iter().enumerate() {
                rows.push(CohortRow::new(format!("all:{}", sex.as_str()), marginal[i].0, marginal[i].1));
            }
        }
        rows
    }
}

pub fn aggregate_cohort<'a, I>(
    outcomes: I,
    demographics: &BTreeMap<String, Demographics>,
    bins: &AgeBins,
    stratify_sex: bool,
) -> Vec<CohortRow>
where
    I: IntoIterator<Item = &'a MatchOutcome>,
{
    let mut counts = CohortCounts::new(bins.clone());
    for o in outcomes {
        counts.add(o, demographics);
    }
    counts.rows(stratify_sex)
}

fn fmt_opt(p: Option<Percent>) -> String {
    p.map(|p| p.to_string()).unwrap_or_default()
}

pub fn cohort_to_csv(rows: &[CohortRow]) -> String {
    let mut s = String::from("stratum,cases,hospitalized,percent\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.stratum, r.cases, r.hospitalized, fmt_opt(r.percent));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReferenceRow {
    pub stratum: String,
    pub cases: u64,
    pub hospitalized: u64,
    /// Printed percentage, checked against the counts when present.
    #[serde(default)]
    pub percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReferenceTable {
    pub rows: Vec<ReferenceRow>,
}

impl ReferenceTable {
    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        serde_json::from_str(text).map_err(|e| ReportError::Reference(e.to_string()))
    }

    /// Treats the reference counts as a cohort of their own.
    pub fn as_cohort(&self) -> Result<Vec<CohortRow>, ReportError> {
        self.rows
            .iter()
            .map(|r| {
                Ok(CohortRow {
                    stratum: r.stratum.clone(),
                    cases: r.cases,
                    hospitalized: r.hospitalized,
                    percent: Some(percent_hospitalized(r.hospitalized, r.cases)?),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonRow {
    pub stratum: String,
    pub reference_cases: u64,
    pub reference_hospitalized: u64,
    pub reference_percent: Percent,
    pub observed_cases: u64,
    pub observed_hospitalized: u64,
    pub observed_percent: Option<Percent>,
    /// Observed minus reference, on the rounded percentages.
    pub difference_points: Option<Percent>,
}

/// One row per reference stratum, in reference order.
pub fn compare_reference(cohort: &[CohortRow], reference: &ReferenceTable) -> Result<Vec<ComparisonRow>, ReportError> {
    reference
        .rows
        .iter()
        .map(|r| {
            let reference_percent = percent_hospitalized(r.hospitalized, r.cases)?;
            if let Some(stated) = r.percent {
                if Percent::from_f64(stated) != reference_percent {
                    return Err(ReportError::DataInconsistency {
                        stratum: r.stratum.clone(),
                        stated: stated.to_string(),
                        computed: reference_percent,
                    });
                }
            }
            let observed = cohort
                .iter()
                .find(|c| c.stratum == r.stratum)
                .ok_or_else(|| ReportError::StratumMismatch(r.stratum.clone()))?;
            Ok(ComparisonRow {
                stratum: r.stratum.clone(),
                reference_cases: r.cases,
                reference_hospitalized: r.hospitalized,
                reference_percent,
                observed_cases: observed.cases,
                observed_hospitalized: observed.hospitalized,
                observed_percent: observed.percent,
                difference_points: observed.percent.map(|p| p - reference_percent),
            })
        })
        .collect()
}

pub fn comparison_to_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("stratum,ref_cases,ref_hosp,ref_pct,obs_cases,obs_hosp,obs_pct,diff_points\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.stratum,
            r.reference_cases,
            r.reference_hospitalized,
            r.reference_percent,
            r.observed_cases,
            r.observed_hospitalized,
            fmt_opt(r.observed_percent),
            fmt_opt(r.difference_points),
        );
    }
    s
}

//! Offset distributions of chosen pairs and match counts over a grid of
//! primary-horizon endpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::engine::classify_patient;
use crate::ingest::PatientBundle;
use crate::model::{MatchOutcome, MatchStatus};
use crate::parallel::WorkerPool;
use crate::rules::{Horizon, RuleSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HistogramMode {
    /// Only patients whose final status is Matched.
    #[default]
    MatchedOnly,
    /// Every patient with a chosen pair, including failed validation.
    AnyChosenPair,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OffsetHistogram {
    pub counts: BTreeMap<i32, u64>,
    pub total: u64,
}

impl OffsetHistogram {
    /// Share of the total whose offset lies in `h`; `None` when empty.
    pub fn fraction_within(&self, h: Horizon) -> Option<f64> {
        if self.total == 0 {
            return None;
        }
        let inside: u64 = self.counts.range(h.lo..=h.hi).map(|(_, c)| c).sum();
        Some(inside as f64 / self.total as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("offset,count\n");
        for (offset, count) in &self.counts {
            let _ = writeln!(s, "{offset},{count}");
        }
        s
    }
}

pub fn offset_histogram<'a, I>(outcomes: I, mode: HistogramMode) -> OffsetHistogram
where
    I: IntoIterator<Item = &'a MatchOutcome>,
{
    let mut hist = OffsetHistogram::default();
    for o in outcomes {
        let counted = match mode {
            HistogramMode::MatchedOnly => o.status == MatchStatus::Matched,
            HistogramMode::AnyChosenPair => o.status.has_pair(),
        };
        if let (true, Some(offset)) = (counted, o.offset) {
            *hist.counts.entry(offset).or_default() += 1;
            hist.total += 1;
        }
    }
    hist
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepCell {
    pub lo: i32,
    pub hi: i32,
    /// Patients with at least one in-window (anchor, admission) pair.
    pub candidates_patients: u64,
    pub matched_patients: u64,
}

/// Incremental sweep: feed bundles in any order, in any number of chunks.
pub struct HorizonSweep {
    cells: Vec<RuleSet>,
    counts: Vec<(u64, u64)>,
}

impl HorizonSweep {
    /// Every `(lo, hi)` combination with `lo <= hi`, `lo` major, duplicates dropped.
    pub fn new(rs: &RuleSet, lo_values: &[i32], hi_values: &[i32]) -> Self {
        let mut horizons: Vec<Horizon> = Vec::new();
        for &lo in lo_values {
            for &hi in hi_values {
                let h = Horizon { lo, hi };
                if lo <= hi && !horizons.contains(&h) {
                    horizons.push(h);
                }
            }
        }
        let cells: Vec<RuleSet> = horizons.into_iter().map(|h| rs.with_primary_horizon(h)).collect();
        let counts = vec![(0, 0); cells.len()];
        HorizonSweep { cells, counts }
    }

    fn tally(cells: &[RuleSet], mut counts: Vec<(u64, u64)>, bundle: &PatientBundle) -> Vec<(u64, u64)> {
        for (rs, (cand, matched)) in cells.iter().zip(counts.iter_mut()) {
            let status = classify_patient(bundle, rs).status;
            *cand += u64::from(status.has_pair());
            *matched += u64::from(status == MatchStatus::Matched);
        }
        counts
    }

    pub fn add(&mut self, bundle: &PatientBundle) {
        let counts = std::mem::take(&mut self.counts);
        self.counts = Self::tally(&self.cells, counts, bundle);
    }

    pub fn add_chunk(&mut self, bundles: &[PatientBundle], pool: &WorkerPool) {
        let n = self.cells.len();
        let cells = &self.cells;
        let chunk = pool.fold(
            bundles,
            || vec![(0u64, 0u64); n],
            |acc, b| Self::tally(cells, acc, b),
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    x.0 += y.0;
                    x.1 += y.1;
                }
                a
            },
        );
        for (x, y) in self.counts.iter_mut().zip(chunk) {
            x.0 += y.0;
            x.1 += y.1;
        }
    }

    pub fn finish(self) -> Vec<SweepCell> {
        self.cells
            .iter()
            .zip(self.counts)
            .map(|(rs, (candidates_patients, matched_patients))| SweepCell {
                lo: rs.primary_horizon.lo,
                hi: rs.primary_horizon.hi,
                candidates_patients,
                matched_patients,
            })
            .collect()
    }
}

/// Reclassifies every bundle under each `(lo, hi)` of the grid. Validation
/// clauses are left unchanged.
pub fn horizon_sweep(bundles: &[PatientBundle], rs: &RuleSet, lo_values: &[i32], hi_values: &[i32]) -> Vec<SweepCell> {
    let mut sweep = HorizonSweep::new(rs, lo_values, hi_values);
    sweep.add_chunk(bundles, &WorkerPool::new(0));
    sweep.finish()
}

pub fn sweep_to_csv(cells: &[SweepCell]) -> String {
    let mut s = String::from("lo,hi,candidates_patients,matched_patients\n");
    for c in cells {
        let _ = writeln!(s, "{},{},{},{}", c.lo, c.hi, c.candidates_patients, c.matched_patients);
    }
    s
}

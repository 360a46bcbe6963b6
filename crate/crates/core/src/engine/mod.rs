//! Per-patient classification.
//!
//! The decision ladder is:
//!
//! 1. no anchor-code event: [`MatchStatus::NoAnchor`];
//! 2. anchors but no (anchor, admission) pair inside the primary horizon:
//!    [`MatchStatus::AnchorNoAdmission`];
//! 3. pick the in-window pair with the smallest `|admission - anchor|`,
//!    breaking ties by earliest admission date then earliest anchor date;
//! 4. check every validation clause around that admission only:
//!    [`MatchStatus::Matched`] or [`MatchStatus::FailedValidation`].

mod oracle;
mod stream;

use thiserror::Error;

use crate::ingest::PatientBundle;
use crate::model::{ClaimEvent, EpochDay, MatchOutcome, MatchStatus, ValidationHit};
use crate::rules::{Horizon, RuleSet, ValidationClause};

pub use oracle::classify_bruteforce;
pub use stream::{classify_all, classify_stream, ClassifyStream};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("no candidate pairs to select from")]
    EmptyCandidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CandidatePair {
    pub anchor_date: EpochDay,
    pub admission_date: EpochDay,
    /// `admission_date - anchor_date`.
    pub offset: i32,
}

impl CandidatePair {
    pub fn new(anchor_date: EpochDay, admission_date: EpochDay) -> Self {
        CandidatePair { anchor_date, admission_date, offset: admission_date.days_since(anchor_date) }
    }

    fn rank(&self) -> (u32, EpochDay, EpochDay) {
        (self.offset.unsigned_abs(), self.admission_date, self.anchor_date)
    }
}

/// All distinct (anchor, admission) date pairs whose offset lies in `h`,
/// ordered by admission date then anchor date. Both inputs must be sorted
/// ascending; duplicates are allowed.
pub fn find_candidate_pairs(anchor_dates: &[EpochDay], admission_dates: &[EpochDay], h: Horizon) -> Vec<CandidatePair> {
    debug_assert!(anchor_dates.windows(2).all(|w| w[0] <= w[1]));
    debug_assert!(admission_dates.windows(2).all(|w| w[0] <= w[1]));

    let mut out = Vec::new();
    // Anchors for admission d lie in [d - hi, d - lo]; both bounds only move
    // forward as d increases.
    let mut start = 0usize;
    let mut prev_admission = None;
    for &d in admission_dates {
        if prev_admission == Some(d) {
            continue;
        }
        prev_admission = Some(d);
        let earliest = i64::from(d.0) - i64::from(h.hi);
        let latest = i64::from(d.0) - i64::from(h.lo);
        while start < anchor_dates.len() && i64::from(anchor_dates[start].0) < earliest {
            start += 1;
        }
        let mut prev_anchor = None;
        for &a in &anchor_dates[start..] {
            if i64::from(a.0) > latest {
                break;
            }
            if prev_anchor == Some(a) {
                continue;
            }
            prev_anchor = Some(a);
            out.push(CandidatePair::new(a, d));
        }
    }
    out
}

/// Picks the pair with the smallest absolute offset, then the earliest
/// admission date, then the earliest anchor date.
pub fn select_primary_pair(candidates: &[CandidatePair]) -> Result<CandidatePair, EngineError> {
    candidates.iter().copied().min_by_key(CandidatePair::rank).ok_or(EngineError::EmptyCandidates)
}

/// Evaluates every clause around `admission_date`. Hits are distinct
/// (clause, code, date) events in clause order, then date, then code.
pub fn check_validation(
    admission_date: EpochDay,
    events: &[ClaimEvent],
    clauses: &[ValidationClause],
) -> (bool, Vec<ValidationHit>) {
    let mut satisfied = true;
    let mut hits: Vec<ValidationHit> = Vec::new();
    for clause in clauses {
        let first = hits.len();
        let lo = admission_date.shift(clause.horizon.lo);
        let hi = admission_date.shift(clause.horizon.hi);
        let from = events.partition_point(|e| e.date < lo);
        for ev in events[from..].iter().take_while(|e| e.date <= hi) {
            if !clause.codes.contains(&ev.code) {
                continue;
            }
            // Events are sorted by (date, code), so repeats are adjacent.
            if hits[first..].last().is_some_and(|h| h.date == ev.date && h.code == ev.code) {
                continue;
            }
            hits.push(ValidationHit {
                clause: clause.name.clone(),
                code: ev.code.clone(),
                date: ev.date,
                offset: ev.date.days_since(admission_date),
            });
        }
        if ((hits.len() - first) as u64) < u64::from(clause.min_count) {
            satisfied = false;
        }
    }
    (satisfied, hits)
}

fn matching_dates(events: &[ClaimEvent], pred: impl Fn(&ClaimEvent) -> bool) -> Vec<EpochDay> {
    let mut dates: Vec<EpochDay> = events.iter().filter(|e| pred(e)).map(|e| e.date).collect();
    dates.dedup();
    dates
}

/// Classifies one patient. `bundle.events` must be sorted by date.
pub fn classify_patient(bundle: &PatientBundle, rs: &RuleSet) -> MatchOutcome {
    let anchors = matching_dates(&bundle.events, |e| rs.anchor_codes.contains(&e.code));
    if anchors.is_empty() {
        return MatchOutcome::no_anchor(bundle.patient_id.clone());
    }
    let admissions = matching_dates(&bundle.events, |e| rs.admission_codes.contains(&e.code));
    let candidates = find_candidate_pairs(&anchors, &admissions, rs.primary_horizon);
    let Ok(pair) = select_primary_pair(&candidates) else {
        return MatchOutcome::anchor_no_admission(bundle.patient_id.clone());
    };
    let (satisfied, validation_hits) = check_validation(pair.admission_date, &bundle.events, &rs.validation);
    MatchOutcome {
        patient_id: bundle.patient_id.clone(),
        status: if satisfied { MatchStatus::Matched } else { MatchStatus::FailedValidation },
        anchor_date: Some(pair.anchor_date),
        admission_date: Some(pair.admission_date),
        offset: Some(pair.offset),
        validation_hits,
    }
}

/// True when the patient has at least one in-window (anchor, admission) pair.
pub fn has_candidate(bundle: &PatientBundle, rs: &RuleSet, horizon: Horizon) -> bool {
    let anchors = matching_dates(&bundle.events, |e| rs.anchor_codes.contains(&e.code));
    if anchors.is_empty() {
        return false;
    }
    let admissions = matching_dates(&bundle.events, |e| rs.admission_codes.contains(&e.code));
    !find_candidate_pairs(&anchors, &admissions, horizon).is_empty()
}

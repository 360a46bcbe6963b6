//! Exhaustive reference classifier.
//!
//! Shares nothing with the fast path beyond the rule and model types: every
//! (anchor event, admission event) combination is enumerated over the raw
//! event list, and validation scans every event for every clause.

use std::collections::BTreeSet;

use crate::ingest::PatientBundle;
use crate::model::{EpochDay, MatchOutcome, MatchStatus, ValidationHit};
use crate::rules::RuleSet;

/// O(n²) classification of one patient; event order is irrelevant.
pub fn classify_bruteforce(bundle: &PatientBundle, rs: &RuleSet) -> MatchOutcome {
    let events = &bundle.events;
    let h = rs.primary_horizon;

    let mut any_anchor = false;
    // (|offset|, admission, anchor)
    let mut best: Option<(i64, EpochDay, EpochDay)> = None;
    for a in events {
        if !rs.anchor_codes.contains(&a.code) {
            continue;
        }
        any_anchor = true;
        for b in events {
            if !rs.admission_codes.contains(&b.code) {
                continue;
            }
            let offset = i64::from(b.date.0) - i64::from(a.date.0);
            if offset < i64::from(h.lo) || offset > i64::from(h.hi) {
                continue;
            }
            let key = (offset.abs(), b.date, a.date);
            best = match best {
                Some(cur) if cur <= key => Some(cur),
                _ => Some(key),
            };
        }
    }

    if !any_anchor {
        return MatchOutcome::no_anchor(bundle.patient_id.clone());
    }
    let Some((_, admission, anchor)) = best else {
        return MatchOutcome::anchor_no_admission(bundle.patient_id.clone());
    };

    let mut all_ok = true;
    let mut hits = Vec::new();
    for clause in &rs.validation {
        let mut found = BTreeSet::new();
        for e in events {
            let offset = i64::from(e.date.0) - i64::from(admission.0);
            let in_window = offset >= i64::from(clause.horizon.lo) && offset <= i64::from(clause.horizon.hi);
            if in_window && clause.codes.contains(&e.code) {
                found.insert((e.date, e.code.clone()));
            }
        }
        if (found.len() as u64) < u64::from(clause.min_count) {
            all_ok = false;
        }
        for (date, code) in found {
            hits.push(ValidationHit {
                clause: clause.name.clone(),
                code,
                date,
                offset: date.0 - admission.0,
            });
        }
    }

    MatchOutcome {
        patient_id: bundle.patient_id.clone(),
        status: if all_ok { MatchStatus::Matched } else { MatchStatus::FailedValidation },
        anchor_date: Some(anchor),
        admission_date: Some(admission),
        offset: Some(admission.0 - anchor.0),
        validation_hits: hits,
    }
}

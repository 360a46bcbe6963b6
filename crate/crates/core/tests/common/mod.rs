#![allow(dead_code)]

use claimhorizon::model::{normalize_code, ClaimEvent, CodeSystem, EpochDay};
use claimhorizon::rules::{CodeSet, Horizon, RuleSet, ValidationClause};
use claimhorizon::PatientBundle;
use proptest::prelude::*;

/// Rule codes and two noise codes; indices 0-1 anchor, 2-3 admission, 4-6 validation.
pub const POOL: [(CodeSystem, &str); 9] = [
    (CodeSystem::Icd10, "U07.1"),
    (CodeSystem::Icd10, "U07.2"),
    (CodeSystem::Cpt, "99221"),
    (CodeSystem::Cpt, "99222"),
    (CodeSystem::Icd10, "J22"),
    (CodeSystem::Icd10, "J80"),
    (CodeSystem::Icd10, "J12.81"),
    (CodeSystem::Icd10, "Z00.0"),
    (CodeSystem::Cpt, "00100"),
];

pub const SPAN_DAYS: i32 = 120;
pub const BASE_DAY: i32 = 18_322;

pub fn event(patient_id: &str, day: i32, code_idx: usize) -> ClaimEvent {
    let (sys, raw) = POOL[code_idx];
    ClaimEvent { patient_id: patient_id.to_string(), date: EpochDay(day), code: normalize_code(sys, raw).unwrap() }
}

pub fn bundle(patient_id: &str, raw: &[(i32, usize)]) -> PatientBundle {
    PatientBundle::new(patient_id, raw.iter().map(|&(d, c)| event(patient_id, BASE_DAY + d, c)).collect())
}

pub fn raw_events() -> impl Strategy<Value = Vec<(i32, usize)>> {
    prop::collection::vec((0..SPAN_DAYS, 0..POOL.len()), 0..=50)
}

pub fn horizon(reach: i32) -> impl Strategy<Value = Horizon> {
    (-reach..=reach, 0..=reach).prop_map(|(lo, w)| Horizon { lo, hi: lo + w })
}

fn clause() -> impl Strategy<Value = ValidationClause> {
    (prop::sample::subsequence(vec![4usize, 5, 6], 1..=3), horizon(14), 1u32..=3).prop_map(|(codes, horizon, min_count)| {
        let raw: Vec<&str> = codes.iter().map(|&i| POOL[i].1).collect();
        ValidationClause {
            name: format!("c{}", raw.join("_")),
            codes: CodeSet::new(CodeSystem::Icd10, &raw).unwrap(),
            horizon,
            min_count,
        }
    })
}

pub fn rule_set() -> impl Strategy<Value = RuleSet> {
    (horizon(14), prop::collection::vec(clause(), 0..=2)).prop_map(|(primary_horizon, mut validation)| {
        validation.dedup_by(|a, b| a.name == b.name);
        RuleSet {
            name: "random".into(),
            anchor_codes: CodeSet::new(CodeSystem::Icd10, &["U07.1", "U07.2"]).unwrap(),
            admission_codes: CodeSet::new(CodeSystem::Cpt, &["99221", "99222"]).unwrap(),
            primary_horizon,
            validation,
        }
    })
}

/// Every distinct in-window (anchor, admission) offset of the bundle.
pub fn in_window_offsets(b: &PatientBundle, rs: &RuleSet) -> Vec<i32> {
    let mut out = Vec::new();
    for a in b.events.iter().filter(|e| rs.anchor_codes.contains(&e.code)) {
        for d in b.events.iter().filter(|e| rs.admission_codes.contains(&e.code)) {
            let off = d.date.days_since(a.date);
            if rs.primary_horizon.contains(off) {
                out.push(off);
            }
        }
    }
    out
}

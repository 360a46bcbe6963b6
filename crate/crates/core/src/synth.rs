//! Deterministic synthetic cohorts with planted classifications.
//!
//! Each patient is built from its own ChaCha8 stream (seeded by the spec
//! seed, stream chosen by patient index), so output depends only on
//! `(seed, spec, rules)` and patients can be generated in any order. Noise
//! draws from a separate stream and from codes that no rule set lists, so it
//! cannot change any classification.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{sort_events, PatientBundle};
use crate::model::{normalize_code, ClaimEvent, Code, CodeSystem, Demographics, EpochDay, MatchOutcome, MatchStatus, Sex};
use crate::rules::{Horizon, RuleSet};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    SpecInvalid(String),
    #[error("outcomes and labels cover different patients ({missing_outcomes} labels without outcome, {missing_labels} outcomes without label)")]
    UniverseMismatch { missing_outcomes: usize, missing_labels: usize },
    #[error("labels line {line}: {message}")]
    MalformedLabel { line: u64, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateSpan {
    pub start: EpochDay,
    pub end: EpochDay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedOffset {
    pub offset: i32,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeBand {
    pub lo: u32,
    pub hi: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SexWeight {
    pub sex: Sex,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicsMix {
    pub age_bands: Vec<AgeBand>,
    pub sexes: Vec<SexWeight>,
}

impl Default for DemographicsMix {
    fn default() -> Self {
        DemographicsMix {
            age_bands: vec![
                AgeBand { lo: 18, hi: 49, weight: 1.0 },
                AgeBand { lo: 50, hi: 64, weight: 1.0 },
                AgeBand { lo: 65, hi: 90, weight: 1.0 },
            ],
            sexes: vec![SexWeight { sex: Sex::F, weight: 1.0 }, SexWeight { sex: Sex::M, weight: 1.0 }],
        }
    }
}

fn default_span() -> DateSpan {
    DateSpan { start: EpochDay(18322), end: EpochDay(18627) } // 2020-03-01 ..= 2020-12-31
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub n_matched: u64,
    #[serde(default)]
    pub n_no_anchor: u64,
    #[serde(default)]
    pub n_anchor_no_admission: u64,
    #[serde(default)]
    pub n_failed_validation: u64,
    #[serde(default = "default_span")]
    pub date_span: DateSpan,
    #[serde(default)]
    pub noise_events_per_patient: f64,
    pub offset_distribution: Vec<WeightedOffset>,
    #[serde(default)]
    pub demographics_mix: DemographicsMix,
}

impl SynthSpec {
    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        serde_json::from_str(text).map_err(|e| SynthError::SpecInvalid(e.to_string()))
    }

    pub fn total(&self) -> u64 {
        self.n_matched + self.n_no_anchor + self.n_anchor_no_admission + self.n_failed_validation
    }
}

fn check_weights(name: &str, weights: impl Iterator<Item = f64>) -> Result<(), SynthError> {
    let mut sum = 0.0;
    for w in weights {
        if !w.is_finite() || w < 0.0 {
            return Err(SynthError::SpecInvalid(format!("{name}: weights must be finite and non-negative")));
        }
        sum += w;
    }
    if sum <= 0.0 {
        return Err(SynthError::SpecInvalid(format!("{name}: weights must have a positive sum")));
    }
    Ok(())
}

fn pick_weighted<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T], weight: impl Fn(&T) -> f64) -> &'a T {
    let total: f64 = items.iter().map(&weight).sum();
    let mut x = rng.random::<f64>() * total;
    for item in items {
        let w = weight(item);
        if x < w {
            return item;
        }
        x -= w;
    }
    items.iter().rev().find(|i| weight(i) > 0.0).expect("positive total")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthLabel {
    pub patient_id: String,
    pub expected_status: MatchStatus,
    pub expected_offset: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedPatient {
    pub bundle: PatientBundle,
    pub demographics: Demographics,
    pub label: GroundTruthLabel,
}

/// Validated generator state for one (spec, rules) pair.
pub struct Generator<'a> {
    spec: &'a SynthSpec,
    rs: &'a RuleSet,
    statuses: Vec<MatchStatus>,
    id_width: usize,
    anchor_codes: Vec<Code>,
    admission_codes: Vec<Code>,
    clause_codes: Vec<Vec<Code>>,
    noise_codes: Vec<Code>,
    noise: Option<Poisson<f64>>,
}

const NEAR_MISS_REACH: i32 = 30;

impl<'a> Generator<'a> {
    pub fn new(spec: &'a SynthSpec, rs: &'a RuleSet) -> Result<Self, SynthError> {
        let invalid = |m: String| Err(SynthError::SpecInvalid(m));
        if spec.date_span.start > spec.date_span.end {
            return invalid("date_span start is after end".into());
        }
        if spec.offset_distribution.is_empty() {
            return invalid("offset_distribution is empty".into());
        }
        check_weights("offset_distribution", spec.offset_distribution.iter().map(|o| o.weight))?;
        for o in &spec.offset_distribution {
            if !rs.primary_horizon.contains(o.offset) {
                return invalid(format!(
                    "offset {} lies outside the primary horizon [{}, {}]",
                    o.offset, rs.primary_horizon.lo, rs.primary_horizon.hi
                ));
            }
        }
        if spec.demographics_mix.age_bands.is_empty() || spec.demographics_mix.sexes.is_empty() {
            return invalid("demographics_mix needs at least one age band and one sex".into());
        }
        check_weights("age_bands", spec.demographics_mix.age_bands.iter().map(|b| b.weight))?;
        check_weights("sexes", spec.demographics_mix.sexes.iter().map(|s| s.weight))?;
        if spec.demographics_mix.age_bands.iter().any(|b| b.lo > b.hi) {
            return invalid("age band with lo > hi".into());
        }
        if !spec.noise_events_per_patient.is_finite() || spec.noise_events_per_patient < 0.0 {
            return invalid("noise_events_per_patient must be a finite mean >= 0".into());
        }
        if spec.n_failed_validation > 0 && rs.validation.is_empty() {
            return invalid("failed_validation patients need at least one validation clause".into());
        }

        let anchor_codes: Vec<Code> = rs.anchor_codes.codes().into_iter().collect();
        let admission_codes: Vec<Code> = rs.admission_codes.codes().into_iter().collect();
        let mut clause_codes = Vec::new();
        for clause in &rs.validation {
            // Codes that double as anchor/admission codes could create extra pairs.
            let usable: Vec<Code> = clause
                .codes
                .codes()
                .into_iter()
                .filter(|c| !rs.anchor_codes.contains(c) && !rs.admission_codes.contains(c))
                .collect();
            let capacity = usable.len() as u64 * clause.horizon.width();
            if capacity < u64::from(clause.min_count) && spec.n_matched > 0 {
                return invalid(format!("validation clause {:?} cannot be satisfied with planted events", clause.name));
            }
            clause_codes.push(usable);
        }

        let rule_codes: BTreeSet<Code> = anchor_codes
            .iter()
            .chain(&admission_codes)
            .cloned()
            .chain(rs.validation.iter().flat_map(|c| c.codes.codes()))
            .collect();
        let noise_codes: Vec<Code> = (0..40)
            .map(|i| (CodeSystem::Icd10, format!("Z{i:03}")))
            .chain((1..20).map(|i| (CodeSystem::Cpt, format!("{i:05}"))))
            .chain((1..10).map(|i| (CodeSystem::Ndc, format!("00000{i:04}"))))
            .map(|(sys, v)| normalize_code(sys, &v).expect("non-empty"))
            .filter(|c| !rule_codes.contains(c))
            .collect();
        let noise = (spec.noise_events_per_patient > 0.0)
            .then(|| Poisson::new(spec.noise_events_per_patient))
            .transpose()
            .map_err(|e| SynthError::SpecInvalid(format!("noise_events_per_patient: {e}")))?;

        let mut statuses = Vec::with_capacity(spec.total() as usize);
        for (status, n) in [
            (MatchStatus::Matched, spec.n_matched),
            (MatchStatus::NoAnchor, spec.n_no_anchor),
            (MatchStatus::AnchorNoAdmission, spec.n_anchor_no_admission),
            (MatchStatus::FailedValidation, spec.n_failed_validation),
        ] {
            statuses.extend(std::iter::repeat_n(status, n as usize));
        }
        let mut order_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        order_rng.set_stream(u64::MAX);
        statuses.shuffle(&mut order_rng);

        let id_width = statuses.len().to_string().len().max(6);
        Ok(Generator {
            spec,
            rs,
            statuses,
            id_width,
            anchor_codes,
            admission_codes,
            clause_codes,
            noise_codes,
            noise,
        })
    }

    pub fn len(&self) -> usize {
        self.statuses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statuses.is_empty()
    }

    fn rng(&self, index: usize, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(index as u64 * 2 + stream);
        rng
    }

    /// Offset drawn uniformly from `[lo - reach, lo - 1] ∪ [hi + 1, hi + reach]`.
    fn outside(rng: &mut ChaCha8Rng, h: Horizon) -> i32 {
        if rng.random_bool(0.5) {
            rng.random_range(h.hi + 1..=h.hi + NEAR_MISS_REACH)
        } else {
            rng.random_range(h.lo - NEAR_MISS_REACH..=h.lo - 1)
        }
    }

    fn validation_union(&self) -> Option<Horizon> {
        let lo = self.rs.validation.iter().map(|c| c.horizon.lo).min()?;
        let hi = self.rs.validation.iter().map(|c| c.horizon.hi).max()?;
        Some(Horizon { lo, hi })
    }

    /// Builds patient `index`; panics if `index >= self.len()`.
    pub fn patient(&self, index: usize) -> PlantedPatient {
        let status = self.statuses[index];
        let patient_id = format!("S{index:0width$}", width = self.id_width);
        let mut rng = self.rng(index, 0);
        let span = self.spec.date_span;
        let mut events: Vec<(EpochDay, Code)> = Vec::new();

        let pick = |rng: &mut ChaCha8Rng, codes: &[Code]| codes[rng.random_range(0..codes.len())].clone();
        let anchor = EpochDay(rng.random_range(span.start.0..=span.end.0));
        let mut expected_offset = None;

        match status {
            MatchStatus::Matched | MatchStatus::FailedValidation => {
                let offset = pick_weighted(&mut rng, &self.spec.offset_distribution, |o| o.weight).offset;
                let admission = anchor.shift(offset);
                expected_offset = Some(offset);
                events.push((anchor, pick(&mut rng, &self.anchor_codes)));
                events.push((admission, pick(&mut rng, &self.admission_codes)));
                if rng.random_bool(0.3) {
                    // same-day repeat claim
                    events.push((admission, pick(&mut rng, &self.admission_codes)));
                }
                if status == MatchStatus::Matched {
                    for (clause, codes) in self.rs.validation.iter().zip(&self.clause_codes) {
                        let mut chosen = BTreeSet::new();
                        while (chosen.len() as u64) < u64::from(clause.min_count) {
                            let off = rng.random_range(clause.horizon.lo..=clause.horizon.hi);
                            chosen.insert((admission.shift(off), pick(&mut rng, codes)));
                        }
                        events.extend(chosen);
                    }
                } else {
                    let union = self.validation_union().expect("checked in new");
                    for codes in &self.clause_codes {
                        if codes.is_empty() {
                            continue;
                        }
                        for _ in 0..rng.random_range(0..=2) {
                            let off = Self::outside(&mut rng, union);
                            events.push((admission.shift(off), pick(&mut rng, codes)));
                        }
                    }
                }
            }
            MatchStatus::AnchorNoAdmission => {
                events.push((anchor, pick(&mut rng, &self.anchor_codes)));
                for _ in 0..rng.random_range(0..=2) {
                    let off = Self::outside(&mut rng, self.rs.primary_horizon);
                    events.push((anchor.shift(off), pick(&mut rng, &self.admission_codes)));
                }
            }
            MatchStatus::NoAnchor => {
                if rng.random_bool(0.5) {
                    let admission = anchor;
                    events.push((admission, pick(&mut rng, &self.admission_codes)));
                    for (clause, codes) in self.rs.validation.iter().zip(&self.clause_codes) {
                        if !codes.is_empty() && rng.random_bool(0.5) {
                            let off = rng.random_range(clause.horizon.lo..=clause.horizon.hi);
                            events.push((admission.shift(off), pick(&mut rng, codes)));
                        }
                    }
                }
            }
        }

        let mix = &self.spec.demographics_mix;
        let band = pick_weighted(&mut rng, &mix.age_bands, |b| b.weight);
        let age = rng.random_range(band.lo..=band.hi);
        let sex = pick_weighted(&mut rng, &mix.sexes, |s| s.weight).sex;
        let zip2 = format!("{:02}", rng.random_range(10..100));

        if let (Some(noise), false) = (&self.noise, self.noise_codes.is_empty()) {
            let mut rng = self.rng(index, 1);
            let n = noise.sample(&mut rng) as usize;
            for _ in 0..n {
                let day = rng.random_range(span.start.0 - NEAR_MISS_REACH..=span.end.0 + NEAR_MISS_REACH);
                events.push((EpochDay(day), pick(&mut rng, &self.noise_codes)));
            }
        }

        let mut events: Vec<ClaimEvent> = events
            .into_iter()
            .map(|(date, code)| ClaimEvent { patient_id: patient_id.clone(), date, code })
            .collect();
        sort_events(&mut events);

        PlantedPatient {
            demographics: Demographics { patient_id: patient_id.clone(), age, sex, zip2: Some(zip2) },
            label: GroundTruthLabel { patient_id: patient_id.clone(), expected_status: status, expected_offset },
            bundle: PatientBundle { patient_id, events },
        }
    }

    pub fn patients(&self) -> impl Iterator<Item = PlantedPatient> + '_ {
        (0..self.len()).map(move |i| self.patient(i))
    }
}

/// Generates the whole cohort in memory, in ascending patient id order.
pub fn generate_cohort(spec: &SynthSpec, rs: &RuleSet) -> Result<Vec<PlantedPatient>, SynthError> {
    let gen = Generator::new(spec, rs)?;
    Ok(gen.patients().collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SynthSummary {
    pub patients: u64,
    pub claim_rows: u64,
}

/// Streams claims CSV, demographics CSV and labels CSV for the cohort.
pub fn generate<C: Write, D: Write, L: Write>(
    spec: &SynthSpec,
    rs: &RuleSet,
    claims: &mut C,
    demographics: &mut D,
    labels: &mut L,
) -> Result<SynthSummary, SynthError> {
    let gen = Generator::new(spec, rs)?;
    writeln!(claims, "patient_id,date,code_system,code")?;
    writeln!(demographics, "patient_id,age,sex,zip2")?;
    writeln!(labels, "patient_id,expected_status,expected_offset")?;
    let mut summary = SynthSummary::default();
    for p in gen.patients() {
        for ev in &p.bundle.events {
            writeln!(claims, "{},{},{},{}", ev.patient_id, ev.date, ev.code.system, ev.code.value())?;
        }
        let d = &p.demographics;
        writeln!(demographics, "{},{},{},{}", d.patient_id, d.age, d.sex.as_str(), d.zip2.as_deref().unwrap_or(""))?;
        let offset = p.label.expected_offset.map(|o| o.to_string()).unwrap_or_default();
        writeln!(labels, "{},{},{}", p.label.patient_id, p.label.expected_status, offset)?;
        summary.patients += 1;
        summary.claim_rows += p.bundle.events.len() as u64;
    }
    Ok(summary)
}

pub fn metadata_json(spec: &SynthSpec, rs: &RuleSet, summary: &SynthSummary) -> String {
    let meta = serde_json::json!({
        "tool": "claimhorizon",
        "version": env!("CARGO_PKG_VERSION"),
        "generator": "ChaCha8 (rand_chacha), seed_from_u64(seed), stream 2*index for planted events and 2*index+1 for noise",
        "seed": spec.seed,
        "rules": rs.name,
        "patients": summary.patients,
        "claim_rows": summary.claim_rows,
        "spec": spec,
    });
    serde_json::to_string_pretty(&meta).expect("metadata serializes")
}

pub fn read_labels<R: BufRead>(input: R) -> Result<Vec<GroundTruthLabel>, SynthError> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let line_no = idx as u64 + 1;
        let line = line.trim_end_matches('\r');
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| SynthError::MalformedLabel { line: line_no, message };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(malformed(format!("expected 3 columns, found {}", fields.len())));
        }
        let expected_status = fields[1].parse().map_err(malformed)?;
        let expected_offset = match fields[2].trim() {
            "" => None,
            s => Some(s.parse().map_err(|e| malformed(format!("offset: {e}")))?),
        };
        out.push(GroundTruthLabel { patient_id: fields[0].trim().to_string(), expected_status, expected_offset });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Discrepancy {
    pub patient_id: String,
    pub expected_status: MatchStatus,
    pub expected_offset: Option<i32>,
    pub observed_status: MatchStatus,
    pub observed_offset: Option<i32>,
}

/// Patients whose status, or offset when one is expected, differs from the
/// label. Empty means every label was recovered.
pub fn verify_labels(outcomes: &[MatchOutcome], labels: &[GroundTruthLabel]) -> Result<Vec<Discrepancy>, SynthError> {
    let by_id: BTreeMap<&str, &MatchOutcome> = outcomes.iter().map(|o| (o.patient_id.as_str(), o)).collect();
    let label_ids: BTreeSet<&str> = labels.iter().map(|l| l.patient_id.as_str()).collect();
    let missing_outcomes = label_ids.iter().filter(|id| !by_id.contains_key(*id)).count();
    let missing_labels = by_id.keys().filter(|id| !label_ids.contains(*id)).count();
    if missing_outcomes > 0 || missing_labels > 0 {
        return Err(SynthError::UniverseMismatch { missing_outcomes, missing_labels });
    }
    Ok(labels
        .iter()
        .filter_map(|l| {
            let o = by_id[l.patient_id.as_str()];
            let offset_ok = l.expected_offset.is_none() || l.expected_offset == o.offset;
            (o.status != l.expected_status || !offset_ok).then(|| Discrepancy {
                patient_id: l.patient_id.clone(),
                expected_status: l.expected_status,
                expected_offset: l.expected_offset,
                observed_status: o.status,
                observed_offset: o.offset,
            })
        })
        .collect())
}

pub fn discrepancies_to_csv(rows: &[Discrepancy]) -> String {
    let mut s = String::from("patient_id,expected_status,expected_offset,observed_status,observed_offset\n");
    let opt = |o: Option<i32>| o.map(|v| v.to_string()).unwrap_or_default();
    for d in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            d.patient_id,
            d.expected_status,
            opt(d.expected_offset),
            d.observed_status,
            opt(d.observed_offset)
        ));
    }
    s
}

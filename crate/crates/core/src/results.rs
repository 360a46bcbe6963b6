//! Per-patient results file: one JSON object per line, ascending patient id.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{normalize_code, CodeSystem, EpochDay, MatchOutcome, MatchStatus, ValidationHit};

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct OutcomeRecord {
    patient_id: String,
    status: MatchStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    anchor_date: Option<EpochDay>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    admission_date: Option<EpochDay>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    offset: Option<i32>,
    #[serde(default)]
    validation_hits: Vec<HitRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HitRecord {
    clause: String,
    #[serde(default = "default_system")]
    system: CodeSystem,
    code: String,
    date: EpochDay,
    offset: i32,
}

fn default_system() -> CodeSystem {
    CodeSystem::Icd10
}

impl From<&MatchOutcome> for OutcomeRecord {
    fn from(o: &MatchOutcome) -> Self {
        OutcomeRecord {
            patient_id: o.patient_id.clone(),
            status: o.status,
            anchor_date: o.anchor_date,
            admission_date: o.admission_date,
            offset: o.offset,
            validation_hits: o
                .validation_hits
                .iter()
                .map(|h| HitRecord {
                    clause: h.clause.clone(),
                    system: h.code.system,
                    code: h.code.value().to_string(),
                    date: h.date,
                    offset: h.offset,
                })
                .collect(),
        }
    }
}

/// Serializes one outcome as a single JSON line (no trailing newline).
pub fn outcome_to_json(outcome: &MatchOutcome) -> String {
    serde_json::to_string(&OutcomeRecord::from(outcome)).expect("outcome serializes")
}

pub fn write_outcome<W: Write>(out: &mut W, outcome: &MatchOutcome) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, &OutcomeRecord::from(outcome))?;
    out.write_all(b"\n")
}

pub fn parse_outcome(line: &str) -> Result<MatchOutcome, String> {
    let rec: OutcomeRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let validation_hits = rec
        .validation_hits
        .into_iter()
        .map(|h| {
            Ok(ValidationHit {
                clause: h.clause,
                code: normalize_code(h.system, &h.code).map_err(|e| e.to_string())?,
                date: h.date,
                offset: h.offset,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(MatchOutcome {
        patient_id: rec.patient_id,
        status: rec.status,
        anchor_date: rec.anchor_date,
        admission_date: rec.admission_date,
        offset: rec.offset,
        validation_hits,
    })
}

/// Streams outcomes back from a results file, skipping blank lines.
pub fn read_outcomes<R: BufRead>(input: R) -> impl Iterator<Item = Result<MatchOutcome, ResultsError>> {
    input.lines().enumerate().filter_map(|(idx, line)| {
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(e.into())),
        };
        if line.trim().is_empty() {
            return None;
        }
        Some(parse_outcome(&line).map_err(|message| ResultsError::Malformed { line: idx as u64 + 1, message }))
    })
}

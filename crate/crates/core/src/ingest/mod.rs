//! Streaming readers for claims and demographics files.
//!
//! Claims must arrive grouped by patient in ascending `patient_id` order so
//! that only one patient's events are held in memory at a time. Unsorted
//! feeds go through [`external_sort_claims`] first.

mod sort;

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::model::{normalize_code, parse_iso_date, ClaimEvent, CodeSystem, Demographics, ModelError, Sex};

pub use sort::{external_sort_claims, SortOptions, SortStats};

pub const CLAIMS_HEADER: [&str; 4] = ["patient_id", "date", "code_system", "code"];
pub const DEMOGRAPHICS_HEADER: [&str; 4] = ["patient_id", "age", "sex", "zip2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputFormat {
    #[default]
    Csv,
    Jsonl,
}

impl InputFormat {
    /// `.jsonl` / `.ndjson` select JSON lines, anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("jsonl") || ext.eq_ignore_ascii_case("ndjson") => {
                InputFormat::Jsonl
            }
            _ => InputFormat::Csv,
        }
    }
}

/// Why a single input row was rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    ColumnCount(usize),
    EmptyPatientId,
    Model(ModelError),
    Json(String),
    Field(String),
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::ColumnCount(n) => write!(f, "expected 4 columns, found {n}"),
            RejectReason::EmptyPatientId => f.write_str("empty patient_id"),
            RejectReason::Model(e) => e.fmt(f),
            RejectReason::Json(e) => write!(f, "invalid JSON object: {e}"),
            RejectReason::Field(e) => f.write_str(e),
        }
    }
}

impl From<ModelError> for RejectReason {
    fn from(e: ModelError) -> Self {
        RejectReason::Model(e)
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: u64, reason: RejectReason },
    #[error("line {line}: input not sorted by patient_id ({patient_id:?} appears after its group closed or out of order)")]
    UnsortedInput { line: u64, patient_id: String },
    #[error("line {line}: duplicate patient {patient_id:?}")]
    DuplicatePatient { line: u64, patient_id: String },
    #[error("unexpected header {found:?}, expected {expected:?}")]
    BadHeader { found: String, expected: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy)]
pub struct IngestOptions {
    /// Abort on the first malformed row instead of counting and skipping it.
    pub strict: bool,
    /// How many rejected rows to keep in [`IngestReport::rejects`].
    pub reject_limit: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { strict: false, reject_limit: 100 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub rows_read: u64,
    pub rows_rejected: u64,
    /// First `reject_limit` rejects as (line number, reason).
    pub rejects: Vec<(u64, RejectReason)>,
}

impl IngestReport {
    pub fn rows_accepted(&self) -> u64 {
        self.rows_read - self.rows_rejected
    }
}

/// All events of one patient, sorted by date then code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientBundle {
    pub patient_id: String,
    pub events: Vec<ClaimEvent>,
}

impl PatientBundle {
    /// Builds a bundle from events of one patient in any order.
    pub fn new(patient_id: impl Into<String>, mut events: Vec<ClaimEvent>) -> Self {
        sort_events(&mut events);
        PatientBundle { patient_id: patient_id.into(), events }
    }
}

pub(crate) fn sort_events(events: &mut [ClaimEvent]) {
    events.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.code.cmp(&b.code)));
}

fn parse_claim_fields(
    patient_id: &str,
    date: &str,
    system: &str,
    code: &str,
) -> Result<ClaimEvent, RejectReason> {
    let patient_id = patient_id.trim();
    if patient_id.is_empty() {
        return Err(RejectReason::EmptyPatientId);
    }
    let date = parse_iso_date(date.trim())?;
    let system: CodeSystem = system.parse()?;
    let code = normalize_code(system, code)?;
    Ok(ClaimEvent { patient_id: patient_id.to_string(), date, code })
}

#[derive(Deserialize)]
struct JsonClaim {
    patient_id: String,
    date: String,
    code_system: String,
    code: String,
}

fn header_matches(record: &csv::StringRecord, expected: &[&str]) -> bool {
    record.len() == expected.len()
        && record
            .iter()
            .zip(expected)
            .all(|(got, want)| got.trim().trim_start_matches('\u{feff}') == *want)
}

enum RowSource<R: BufRead> {
    Csv { reader: csv::Reader<R>, record: csv::StringRecord, header_checked: bool },
    Jsonl { lines: std::io::Lines<R>, line: u64 },
}

type Row = (u64, Result<ClaimEvent, RejectReason>);

impl<R: BufRead> RowSource<R> {
    fn new(input: R, format: InputFormat) -> Self {
        match format {
            InputFormat::Csv => RowSource::Csv {
                reader: csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input),
                record: csv::StringRecord::new(),
                header_checked: false,
            },
            InputFormat::Jsonl => RowSource::Jsonl { lines: input.lines(), line: 0 },
        }
    }

    fn next_row(&mut self) -> Option<Result<Row, IngestError>> {
        match self {
            RowSource::Csv { reader, record, header_checked } => {
                if !*header_checked {
                    *header_checked = true;
                    match reader.headers() {
                        Ok(h) if h.is_empty() => return None,
                        Ok(h) if !header_matches(h, &CLAIMS_HEADER) => {
                            return Some(Err(IngestError::BadHeader {
                                found: h.iter().collect::<Vec<_>>().join(","),
                                expected: CLAIMS_HEADER.join(","),
                            }))
                        }
                        Ok(_) => {}
                        Err(e) => return Some(Err(e.into())),
                    }
                }
                match reader.read_record(record) {
                    Ok(false) => None,
                    Ok(true) => {
                        let line = record.position().map_or(0, |p| p.line());
                        let parsed = if record.len() != 4 {
                            Err(RejectReason::ColumnCount(record.len()))
                        } else {
                            parse_claim_fields(&record[0], &record[1], &record[2], &record[3])
                        };
                        Some(Ok((line, parsed)))
                    }
                    Err(e) => match e.kind() {
                        csv::ErrorKind::Utf8 { pos, err } => {
                            let line = pos.as_ref().map_or(0, |p| p.line());
                            Some(Ok((line, Err(RejectReason::Field(format!("invalid UTF-8: {err}"))))))
                        }
                        _ => Some(Err(e.into())),
                    },
                }
            }
            RowSource::Jsonl { lines, line } => loop {
                let text = match lines.next()? {
                    Ok(t) => t,
                    Err(e) => return Some(Err(e.into())),
                };
                *line += 1;
                if text.trim().is_empty() {
                    continue;
                }
                let parsed = serde_json::from_str::<JsonClaim>(&text)
                    .map_err(|e| RejectReason::Json(e.to_string()))
                    .and_then(|j| parse_claim_fields(&j.patient_id, &j.date, &j.code_system, &j.code));
                return Some(Ok((*line, parsed)));
            },
        }
    }
}

/// Groups a patient-sorted claims stream into [`PatientBundle`]s.
///
/// Iteration stops after the first fatal error. Counters are available from
/// [`ClaimsReader::report`] at any point.
pub struct ClaimsReader<R: BufRead> {
    source: RowSource<R>,
    options: IngestOptions,
    report: IngestReport,
    pending: Option<(u64, ClaimEvent)>,
    last_patient: Option<String>,
    done: bool,
}

/// Opens a grouped reader over a claims stream.
pub fn read_claims<R: BufRead>(input: R, format: InputFormat, options: IngestOptions) -> ClaimsReader<R> {
    ClaimsReader {
        source: RowSource::new(input, format),
        options,
        report: IngestReport::default(),
        pending: None,
        last_patient: None,
        done: false,
    }
}

impl<R: BufRead> ClaimsReader<R> {
    pub fn report(&self) -> &IngestReport {
        &self.report
    }

    pub fn into_report(self) -> IngestReport {
        self.report
    }

    /// Next accepted event, counting and skipping rejects in lenient mode.
    fn next_event(&mut self) -> Result<Option<(u64, ClaimEvent)>, IngestError> {
        loop {
            let Some(row) = self.source.next_row() else { return Ok(None) };
            let (line, parsed) = row?;
            self.report.rows_read += 1;
            match parsed {
                Ok(ev) => return Ok(Some((line, ev))),
                Err(reason) => {
                    self.report.rows_rejected += 1;
                    if self.options.strict {
                        return Err(IngestError::MalformedRow { line, reason });
                    }
                    if self.report.rejects.len() < self.options.reject_limit {
                        self.report.rejects.push((line, reason));
                    }
                }
            }
        }
    }

    fn next_bundle(&mut self) -> Result<Option<PatientBundle>, IngestError> {
        let (line, first) = match self.pending.take() {
            Some(p) => p,
            None => match self.next_event()? {
                Some(p) => p,
                None => return Ok(None),
            },
        };
        if let Some(last) = &self.last_patient {
            if first.patient_id.as_str() <= last.as_str() {
                return Err(IngestError::UnsortedInput { line, patient_id: first.patient_id });
            }
        }
        let patient_id = first.patient_id.clone();
        let mut events = vec![first];
        while let Some((line, ev)) = self.next_event()? {
            if ev.patient_id == patient_id {
                events.push(ev);
            } else {
                self.pending = Some((line, ev));
                break;
            }
        }
        sort_events(&mut events);
        self.last_patient = Some(patient_id.clone());
        Ok(Some(PatientBundle { patient_id, events }))
    }
}

impl<R: BufRead> Iterator for ClaimsReader<R> {
    type Item = Result<PatientBundle, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_bundle() {
            Ok(Some(b)) => Some(Ok(b)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

#[derive(Deserialize)]
struct JsonDemographics {
    patient_id: String,
    age: serde_json::Value,
    sex: String,
    #[serde(default)]
    zip2: Option<String>,
}

fn parse_demographics_fields(
    patient_id: &str,
    age: &str,
    sex: &str,
    zip2: Option<&str>,
) -> Result<Demographics, RejectReason> {
    let patient_id = patient_id.trim();
    if patient_id.is_empty() {
        return Err(RejectReason::EmptyPatientId);
    }
    let age = age
        .trim()
        .parse::<u32>()
        .map_err(|_| RejectReason::Field(format!("age must be a non-negative integer, got {age:?}")))?;
    let sex = sex.parse::<Sex>().map_err(RejectReason::Field)?;
    let zip2 = match zip2.map(str::trim) {
        None | Some("") => None,
        Some(z) if z.chars().count() == 2 => Some(z.to_string()),
        Some(z) => return Err(RejectReason::Field(format!("zip2 must be two characters, got {z:?}"))),
    };
    Ok(Demographics { patient_id: patient_id.to_string(), age, sex, zip2 })
}

/// Reads a demographics file into a map keyed by patient. Any malformed row
/// or repeated patient is fatal.
pub fn read_demographics<R: BufRead>(
    input: R,
    format: InputFormat,
) -> Result<BTreeMap<String, Demographics>, IngestError> {
    let mut out = BTreeMap::new();
    let mut insert = |line: u64, d: Demographics| match out.entry(d.patient_id.clone()) {
        std::collections::btree_map::Entry::Occupied(_) => {
            Err(IngestError::DuplicatePatient { line, patient_id: d.patient_id })
        }
        std::collections::btree_map::Entry::Vacant(v) => {
            v.insert(d);
            Ok(())
        }
    };

    match format {
        InputFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
            let headers = reader.headers()?.clone();
            if headers.is_empty() {
                return Ok(BTreeMap::new());
            }
            if !header_matches(&headers, &DEMOGRAPHICS_HEADER) {
                return Err(IngestError::BadHeader {
                    found: headers.iter().collect::<Vec<_>>().join(","),
                    expected: DEMOGRAPHICS_HEADER.join(","),
                });
            }
            for record in reader.records() {
                let record = record?;
                let line = record.position().map_or(0, |p| p.line());
                let row = match record.len() {
                    3 => parse_demographics_fields(&record[0], &record[1], &record[2], None),
                    4 => parse_demographics_fields(&record[0], &record[1], &record[2], Some(&record[3])),
                    n => Err(RejectReason::ColumnCount(n)),
                }
                .map_err(|reason| IngestError::MalformedRow { line, reason })?;
                insert(line, row)?;
            }
        }
        InputFormat::Jsonl => {
            for (idx, text) in input.lines().enumerate() {
                let text = text?;
                let line = idx as u64 + 1;
                if text.trim().is_empty() {
                    continue;
                }
                let row = serde_json::from_str::<JsonDemographics>(&text)
                    .map_err(|e| RejectReason::Json(e.to_string()))
                    .and_then(|j| {
                        let age = match &j.age {
                            serde_json::Value::String(s) => s.clone(),
                            other => other.to_string(),
                        };
                        parse_demographics_fields(&j.patient_id, &age, &j.sex, j.zip2.as_deref())
                    })
                    .map_err(|reason| IngestError::MalformedRow { line, reason })?;
                insert(line, row)?;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EpochDay;

    fn bundles(text: &str, strict: bool) -> (Vec<Result<PatientBundle, IngestError>>, IngestReport) {
        let mut reader = read_claims(text.as_bytes(), InputFormat::Csv, IngestOptions { strict, reject_limit: 10 });
        let out: Vec<_> = reader.by_ref().collect();
        (out, reader.into_report())
    }

    const HEADER: &str = "patient_id,date,code_system,code\n";

    #[test]
    fn groups_sorted_input() {
        let text = format!(
            "{HEADER}A,2020-03-05,ICD10,U07.1\nA,2020-03-01,CPT,99221\nA,2020-03-05,CPT,99222\nB,2020-04-01,ICD10,J22\n"
        );
        let (out, report) = bundles(&text, false);
        let out: Vec<_> = out.into_iter().map(Result::unwrap).collect();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].patient_id, "A");
        assert_eq!(out[0].events.len(), 3);
        assert_eq!(out[1].events.len(), 1);
        assert_eq!(report.rows_read, 4);
        assert_eq!(report.rows_rejected, 0);
        // date first, then (system, value): CPT sorts before ICD10
        let order: Vec<_> = out[0].events.iter().map(|e| (e.date, e.code.value().to_string())).collect();
        assert_eq!(order[0].1, "99221");
        assert_eq!(order[1].1, "99222");
        assert_eq!(order[2].1, "U071");
        assert!(order[1].0 == order[2].0 && order[0].0 < order[1].0);
    }

    #[test]
    fn lenient_mode_skips_bad_dates() {
        let text = format!("{HEADER}A,2020-13-01,ICD10,U07.1\nA,2020-03-01,CPT,99221\n");
        let (out, report) = bundles(&text, false);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].as_ref().unwrap().events.len(), 1);
        assert_eq!(report.rows_read, 2);
        assert_eq!(report.rows_rejected, 1);
        assert_eq!(report.rejects.len(), 1);
        assert_eq!(report.rejects[0].0, 2);
        assert!(matches!(report.rejects[0].1, RejectReason::Model(ModelError::MalformedDate(_))));
    }

    #[test]
    fn strict_mode_aborts() {
        let text = format!("{HEADER}A,2020-03-01,CPT,99221\nA,2020-03-02,LOINC,1234\n");
        let (out, _) = bundles(&text, true);
        assert_eq!(out.len(), 1);
        assert!(matches!(out[0], Err(IngestError::MalformedRow { line: 3, .. })));
    }

    #[test]
    fn rejects_wrong_columns_and_empty_codes() {
        let text = format!("{HEADER}A,2020-03-01,CPT\nA,2020-03-01,CPT, \n,2020-03-01,CPT,99221\nA,2020-03-01,CPT,99221\n");
        let (out, report) = bundles(&text, false);
        assert_eq!(out.len(), 1);
        assert_eq!(report.rows_rejected, 3);
        assert_eq!(report.rejects[0].1, RejectReason::ColumnCount(3));
        assert_eq!(report.rejects[1].1, RejectReason::Model(ModelError::EmptyCode));
        assert_eq!(report.rejects[2].1, RejectReason::EmptyPatientId);
    }

    #[test]
    fn reappearing_patient_is_unsorted() {
        let text = format!("{HEADER}A,2020-03-01,CPT,99221\nB,2020-03-01,CPT,99221\nA,2020-03-02,CPT,99221\n");
        let (out, _) = bundles(&text, false);
        // B is complete once A reappears, so it is still delivered.
        assert_eq!(out.len(), 3);
        assert!(out[0].is_ok() && out[1].is_ok());
        assert!(matches!(&out[2], Err(IngestError::UnsortedInput { line: 4, patient_id }) if patient_id == "A"));
    }

    #[test]
    fn crlf_and_bad_header() {
        let text = "patient_id,date,code_system,code\r\nA,2020-03-01,CPT,99221\r\n";
        let (out, report) = bundles(text, true);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].as_ref().unwrap().events[0].date, EpochDay(18322));
        assert_eq!(report.rows_read, 1);

        let (out, _) = bundles("pid,date,system,code\nA,2020-03-01,CPT,99221\n", false);
        assert!(matches!(out[0], Err(IngestError::BadHeader { .. })));
    }

    #[test]
    fn empty_input() {
        let (out, report) = bundles("", false);
        assert!(out.is_empty());
        assert_eq!(report, IngestReport::default());
        let (out, _) = bundles(HEADER, false);
        assert!(out.is_empty());
    }

    #[test]
    fn reject_list_is_capped() {
        let mut text = HEADER.to_string();
        for _ in 0..25 {
            text.push_str("A,bad,CPT,99221\n");
        }
        let (_, report) = bundles(&text, false);
        assert_eq!(report.rows_rejected, 25);
        assert_eq!(report.rejects.len(), 10);
    }

    #[test]
    fn jsonl_claims() {
        let text = r#"{"patient_id":"A","date":"2020-03-01","code_system":"ICD10","code":"U07.1"}

{"patient_id":"A","date":"2020-03-02","code_system":"CPT"}
{"patient_id":"B","date":"2020-03-02","code_system":"CPT","code":"99223"}
"#;
        let mut reader = read_claims(text.as_bytes(), InputFormat::Jsonl, IngestOptions::default());
        let out: Vec<_> = reader.by_ref().map(Result::unwrap).collect();
        assert_eq!(out.len(), 2);
        let report = reader.into_report();
        assert_eq!(report.rows_read, 3);
        assert_eq!(report.rows_rejected, 1);
        assert_eq!(report.rejects[0].0, 3);
    }

    #[test]
    fn demographics_rows() {
        let text = "patient_id,age,sex,zip2\np1,45,F,41\np2,80,M,\n";
        let map = read_demographics(text.as_bytes(), InputFormat::Csv).unwrap();
        assert_eq!(
            map["p1"],
            Demographics { patient_id: "p1".into(), age: 45, sex: Sex::F, zip2: Some("41".into()) }
        );
        assert_eq!(map["p2"].zip2, None);
    }

    #[test]
    fn demographics_errors() {
        let dup = "patient_id,age,sex,zip2\np1,45,F,41\np1,46,F,41\n";
        assert!(matches!(
            read_demographics(dup.as_bytes(), InputFormat::Csv),
            Err(IngestError::DuplicatePatient { line: 3, .. })
        ));
        let neg = "patient_id,age,sex,zip2\np1,-3,F,41\n";
        assert!(matches!(
            read_demographics(neg.as_bytes(), InputFormat::Csv),
            Err(IngestError::MalformedRow { line: 2, .. })
        ));
        let sex = "patient_id,age,sex,zip2\np1,3,X,41\n";
        assert!(read_demographics(sex.as_bytes(), InputFormat::Csv).is_err());
    }

    #[test]
    fn demographics_jsonl() {
        let text = "{\"patient_id\":\"p1\",\"age\":45,\"sex\":\"F\",\"zip2\":\"41\"}\n{\"patient_id\":\"p2\",\"age\":\"7\",\"sex\":\"U\"}\n";
        let map = read_demographics(text.as_bytes(), InputFormat::Jsonl).unwrap();
        assert_eq!(map["p1"].age, 45);
        assert_eq!(map["p2"].age, 7);
        assert_eq!(map["p2"].sex, Sex::U);
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(InputFormat::from_path(Path::new("a/claims.jsonl")), InputFormat::Jsonl);
        assert_eq!(InputFormat::from_path(Path::new("claims.csv")), InputFormat::Csv);
    }
}

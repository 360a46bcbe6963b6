//! Shared domain vocabulary: whole-day dates, normalized codes, claim events,
//! demographics and per-patient classification outcomes.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("malformed date {0:?} (expected a valid YYYY-MM-DD calendar date)")]
    MalformedDate(String),
    #[error("empty code")]
    EmptyCode,
    #[error("unknown code system {0:?}")]
    UnknownCodeSystem(String),
}

/// Days since 1970-01-01. There is no time-of-day anywhere in the system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct EpochDay(pub i32);

// 1970-01-01 counted from 0001-01-01 (day 1) in the proleptic Gregorian calendar.
const UNIX_EPOCH_FROM_CE: i32 = 719_163;

impl EpochDay {
    pub fn from_naive(date: NaiveDate) -> Self {
        EpochDay(date.num_days_from_ce() - UNIX_EPOCH_FROM_CE)
    }

    pub fn to_naive(self) -> Option<NaiveDate> {
        NaiveDate::from_num_days_from_ce_opt(self.0 + UNIX_EPOCH_FROM_CE)
    }

    /// Signed whole-day difference `self - earlier`.
    pub fn days_since(self, earlier: EpochDay) -> i32 {
        self.0 - earlier.0
    }

    pub fn shift(self, days: i32) -> EpochDay {
        EpochDay(self.0 + days)
    }
}

impl fmt::Display for EpochDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.to_naive() {
            Some(d) => write!(f, "{:04}-{:02}-{:02}", d.year(), d.month(), d.day()),
            None => write!(f, "day{}", self.0),
        }
    }
}

impl FromStr for EpochDay {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_iso_date(s)
    }
}

impl Serialize for EpochDay {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EpochDay {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = <std::borrow::Cow<'de, str>>::deserialize(deserializer)?;
        parse_iso_date(&s).map_err(serde::de::Error::custom)
    }
}

/// Parses a strict `YYYY-MM-DD` calendar date.
pub fn parse_iso_date(text: &str) -> Result<EpochDay, ModelError> {
    let malformed = || ModelError::MalformedDate(text.to_string());
    let b = text.as_bytes();
    if b.len() != 10 || b[4] != b'-' || b[7] != b'-' {
        return Err(malformed());
    }
    let digits = |range: std::ops::Range<usize>| -> Option<u32> {
        b[range].iter().try_fold(0u32, |acc, &c| {
            c.is_ascii_digit().then(|| acc * 10 + u32::from(c - b'0'))
        })
    };
    let (year, month, day) = match (digits(0..4), digits(5..7), digits(8..10)) {
        (Some(y), Some(m), Some(d)) => (y, m, d),
        _ => return Err(malformed()),
    };
    NaiveDate::from_ymd_opt(year as i32, month, day)
        .map(EpochDay::from_naive)
        .ok_or_else(malformed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CodeSystem {
    // Variant order is the lexicographic order of the names.
    #[serde(rename = "CPT")]
    Cpt,
    #[serde(rename = "ICD10")]
    Icd10,
    #[serde(rename = "NDC")]
    Ndc,
}

impl CodeSystem {
    pub const ALL: [CodeSystem; 3] = [CodeSystem::Cpt, CodeSystem::Icd10, CodeSystem::Ndc];

    pub fn as_str(self) -> &'static str {
        match self {
            CodeSystem::Cpt => "CPT",
            CodeSystem::Icd10 => "ICD10",
            CodeSystem::Ndc => "NDC",
        }
    }
}

impl fmt::Display for CodeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodeSystem {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        CodeSystem::ALL
            .into_iter()
            .find(|sys| sys.as_str().eq_ignore_ascii_case(t))
            .ok_or_else(|| ModelError::UnknownCodeSystem(s.to_string()))
    }
}

/// A code in normalized form: trimmed, uppercased, dots removed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Code {
    pub system: CodeSystem,
    value: String,
}

impl Code {
    pub fn new(system: CodeSystem, raw: &str) -> Result<Self, ModelError> {
        normalize_code(system, raw)
    }

    pub fn value(&self) -> &str {
        &self.value
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.system, self.value)
    }
}

/// Normalizes the raw text of a code so that dot placement, letter case and
/// surrounding whitespace do not affect equality.
pub fn normalize_code(system: CodeSystem, raw: &str) -> Result<Code, ModelError> {
    let value: String = raw.chars().filter(|&c| c != '.').collect();
    let value = value.trim().to_ascii_uppercase();
    if value.is_empty() {
        return Err(ModelError::EmptyCode);
    }
    Ok(Code { system, value })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClaimEvent {
    pub patient_id: String,
    pub date: EpochDay,
    pub code: Code,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
    U,
}

impl Sex {
    pub const ALL: [Sex; 3] = [Sex::F, Sex::M, Sex::U];

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::M => "M",
            Sex::F => "F",
            Sex::U => "U",
        }
    }
}

impl FromStr for Sex {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "M" | "m" => Ok(Sex::M),
            "F" | "f" => Ok(Sex::F),
            "U" | "u" => Ok(Sex::U),
            other => Err(format!("unknown sex {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demographics {
    pub patient_id: String,
    pub age: u32,
    pub sex: Sex,
    pub zip2: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStatus {
    Matched,
    NoAnchor,
    AnchorNoAdmission,
    FailedValidation,
}

impl MatchStatus {
    pub const ALL: [MatchStatus; 4] = [
        MatchStatus::Matched,
        MatchStatus::NoAnchor,
        MatchStatus::AnchorNoAdmission,
        MatchStatus::FailedValidation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MatchStatus::Matched => "matched",
            MatchStatus::NoAnchor => "no_anchor",
            MatchStatus::AnchorNoAdmission => "anchor_no_admission",
            MatchStatus::FailedValidation => "failed_validation",
        }
    }

    /// Whether an (anchor, admission) pair was chosen for this status.
    pub fn has_pair(self) -> bool {
        matches!(self, MatchStatus::Matched | MatchStatus::FailedValidation)
    }
}

impl fmt::Display for MatchStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatchStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MatchStatus::ALL
            .into_iter()
            .find(|st| st.as_str() == s.trim())
            .ok_or_else(|| format!("unknown status {s:?}"))
    }
}

/// One qualifying validation event around the chosen admission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationHit {
    pub clause: String,
    pub code: Code,
    pub date: EpochDay,
    /// `date - admission_date`.
    pub offset: i32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchOutcome {
    pub patient_id: String,
    pub status: MatchStatus,
    pub anchor_date: Option<EpochDay>,
    pub admission_date: Option<EpochDay>,
    /// `admission_date - anchor_date` of the chosen pair.
    pub offset: Option<i32>,
    pub validation_hits: Vec<ValidationHit>,
}

impl MatchOutcome {
    pub fn no_anchor(patient_id: impl Into<String>) -> Self {
        MatchOutcome {
            patient_id: patient_id.into(),
            status: MatchStatus::NoAnchor,
            anchor_date: None,
            admission_date: None,
            offset: None,
            validation_hits: Vec::new(),
        }
    }

    pub fn anchor_no_admission(patient_id: impl Into<String>) -> Self {
        MatchOutcome {
            status: MatchStatus::AnchorNoAdmission,
            ..MatchOutcome::no_anchor(patient_id)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent day counter: sums year and month lengths from 1970.
    fn day_count_oracle(y: i32, m: u32, d: u32) -> i32 {
        let leap = |y: i32| (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
        let month_len = |y: i32, m: u32| match m {
            1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
            4 | 6 | 9 | 11 => 30,
            _ => {
                if leap(y) {
                    29
                } else {
                    28
                }
            }
        };
        let mut days = 0;
        for yy in 1970..y {
            days += if leap(yy) { 366 } else { 365 };
        }
        for mm in 1..m {
            days += month_len(y, mm);
        }
        days + d as i32 - 1
    }

    #[test]
    fn epoch_origin() {
        assert_eq!(parse_iso_date("1970-01-01").unwrap(), EpochDay(0));
    }

    #[test]
    fn march_2020_matches_day_count_oracle() {
        assert_eq!(day_count_oracle(2020, 3, 1), 18322);
        assert_eq!(parse_iso_date("2020-03-01").unwrap(), EpochDay(18322));
        for (y, m, d) in [(2000, 2, 29), (2021, 12, 31), (1999, 1, 1), (2024, 7, 4)] {
            let text = format!("{y:04}-{m:02}-{d:02}");
            assert_eq!(parse_iso_date(&text).unwrap().0, day_count_oracle(y, m, d), "{text}");
        }
    }

    #[test]
    fn malformed_dates() {
        for bad in ["2020-02-30", "2020-13-01", "2021-02-29", "2020-3-01", "20200301", "2020-03-01 ", "abcd-ef-gh", ""] {
            assert!(matches!(parse_iso_date(bad), Err(ModelError::MalformedDate(_))), "{bad}");
        }
    }

    #[test]
    fn pre_epoch_dates_are_negative() {
        assert_eq!(parse_iso_date("1969-12-31").unwrap(), EpochDay(-1));
        assert_eq!(EpochDay(-1).to_string(), "1969-12-31");
    }

    #[test]
    fn day_arithmetic() {
        let a = parse_iso_date("2020-03-01").unwrap();
        let b = parse_iso_date("2020-03-03").unwrap();
        assert_eq!(b.days_since(a), 2);
    }

    #[test]
    fn normalization_examples() {
        let c = normalize_code(CodeSystem::Icd10, "u07.1").unwrap();
        assert_eq!(c.value(), "U071");
        assert_eq!(c, normalize_code(CodeSystem::Icd10, "U071").unwrap());
        assert_eq!(normalize_code(CodeSystem::Cpt, "99221").unwrap().value(), "99221");
        assert_eq!(normalize_code(CodeSystem::Icd10, "  J12.81 ").unwrap().value(), "J1281");
        assert_eq!(normalize_code(CodeSystem::Icd10, "  . "), Err(ModelError::EmptyCode));
        assert_eq!(normalize_code(CodeSystem::Icd10, ""), Err(ModelError::EmptyCode));
    }

    #[test]
    fn exact_not_prefix() {
        let a = normalize_code(CodeSystem::Icd10, "U07.1").unwrap();
        let b = normalize_code(CodeSystem::Icd10, "U07.19").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn code_system_parsing() {
        assert_eq!("icd10".parse::<CodeSystem>().unwrap(), CodeSystem::Icd10);
        assert_eq!(" CPT".parse::<CodeSystem>().unwrap(), CodeSystem::Cpt);
        assert!(matches!("LOINC".parse::<CodeSystem>(), Err(ModelError::UnknownCodeSystem(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn date_round_trip(day in -700_000i32..2_900_000) {
                let d = EpochDay(day);
                let text = d.to_string();
                prop_assert_eq!(parse_iso_date(&text).unwrap(), d);
            }

            #[test]
            fn normalize_idempotent(raw in "[ a-zA-Z0-9.]{0,12}") {
                if let Ok(c) = normalize_code(CodeSystem::Icd10, &raw) {
                    let again = normalize_code(CodeSystem::Icd10, c.value()).unwrap();
                    prop_assert_eq!(again, c);
                }
            }

            #[test]
            fn case_and_dots_do_not_matter(raw in "[a-zA-Z0-9]{1,8}", dot in 0usize..9) {
                let dot = dot.min(raw.len());
                let dotted = format!("{}.{}", &raw[..dot], &raw[dot..]).to_lowercase();
                prop_assert_eq!(
                    normalize_code(CodeSystem::Icd10, &dotted).unwrap(),
                    normalize_code(CodeSystem::Icd10, &raw.to_uppercase()).unwrap()
                );
            }
        }
    }
}

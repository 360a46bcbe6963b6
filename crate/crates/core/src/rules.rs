//! Declarative event-horizon rule sets and their JSON file format.
//!
//! A rule set names an anchor code set, an admission code set, a primary
//! horizon on `admission - anchor`, and any number of validation clauses
//! whose horizons are measured as `event - admission`. Every clause must be
//! satisfied; within a clause any listed code counts.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{normalize_code, Code, CodeSystem, ModelError};

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("rule file syntax error: {0}")]
    Syntax(String),
    #[error("invalid horizon in {context}: lo {lo} > hi {hi}")]
    InvalidHorizon { context: String, lo: i32, hi: i32 },
    #[error("empty code set in {0}")]
    EmptyCodeSet(String),
    #[error("duplicate validation clause name {0:?}")]
    DuplicateClauseName(String),
    #[error("code {0} is both an anchor and an admission code")]
    AnchorAdmissionOverlap(Code),
    #[error("invalid code in {context}: {source}")]
    Code {
        context: String,
        #[source]
        source: ModelError,
    },
    #[error("min_count must be at least 1 in clause {0:?}")]
    InvalidMinCount(String),
}

/// Closed integer interval of day offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Horizon {
    pub lo: i32,
    pub hi: i32,
}

impl Horizon {
    pub fn new(lo: i32, hi: i32) -> Result<Self, RuleError> {
        if lo > hi {
            return Err(RuleError::InvalidHorizon { context: "horizon".into(), lo, hi });
        }
        Ok(Horizon { lo, hi })
    }

    #[inline]
    pub fn contains(&self, offset: i32) -> bool {
        self.lo <= offset && offset <= self.hi
    }

    pub fn is_within(&self, other: &Horizon) -> bool {
        other.lo <= self.lo && self.hi <= other.hi
    }

    /// Number of integer offsets in the window.
    pub fn width(&self) -> u64 {
        (i64::from(self.hi) - i64::from(self.lo) + 1) as u64
    }
}

/// Codes from a single code system, in file order. Duplicates are kept so
/// that [`validate_rules`] can report them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSet {
    pub system: CodeSystem,
    values: Vec<String>,
}

impl CodeSet {
    pub fn new<S: AsRef<str>>(system: CodeSystem, raw: &[S]) -> Result<Self, ModelError> {
        let values = raw
            .iter()
            .map(|r| normalize_code(system, r.as_ref()).map(|c| c.value().to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CodeSet { system, values })
    }

    #[inline]
    pub fn contains(&self, code: &Code) -> bool {
        code.system == self.system && self.values.iter().any(|v| v == code.value())
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    /// Distinct codes in ascending order.
    pub fn codes(&self) -> BTreeSet<Code> {
        self.values
            .iter()
            .map(|v| normalize_code(self.system, v).expect("stored values are normalized"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationClause {
    pub name: String,
    pub codes: CodeSet,
    /// Window on `event_date - admission_date`.
    pub horizon: Horizon,
    pub min_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSet {
    pub name: String,
    pub anchor_codes: CodeSet,
    pub admission_codes: CodeSet,
    /// Window on `admission_date - anchor_date`.
    pub primary_horizon: Horizon,
    /// All clauses must hold.
    pub validation: Vec<ValidationClause>,
}

impl RuleSet {
    pub fn with_primary_horizon(&self, horizon: Horizon) -> RuleSet {
        RuleSet { primary_horizon: horizon, ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        let file = RuleFile::from(self);
        serde_json::to_string_pretty(&file).expect("rule file serializes")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    name: String,
    anchor: CodeBlock,
    admission: CodeBlock,
    primary_horizon: Horizon,
    #[serde(default)]
    validation: Vec<ClauseBlock>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodeBlock {
    system: CodeSystem,
    codes: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClauseBlock {
    name: String,
    system: CodeSystem,
    codes: Vec<String>,
    horizon: Horizon,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min_count: Option<u32>,
}

impl From<&RuleSet> for RuleFile {
    fn from(rs: &RuleSet) -> Self {
        let block = |set: &CodeSet| CodeBlock { system: set.system, codes: set.values.clone() };
        RuleFile {
            name: rs.name.clone(),
            anchor: block(&rs.anchor_codes),
            admission: block(&rs.admission_codes),
            primary_horizon: rs.primary_horizon,
            validation: rs
                .validation
                .iter()
                .map(|c| ClauseBlock {
                    name: c.name.clone(),
                    system: c.codes.system,
                    codes: c.codes.values.clone(),
                    horizon: c.horizon,
                    min_count: Some(c.min_count),
                })
                .collect(),
        }
    }
}

fn check_horizon(h: Horizon, context: &str) -> Result<Horizon, RuleError> {
    if h.lo > h.hi {
        return Err(RuleError::InvalidHorizon { context: context.to_string(), lo: h.lo, hi: h.hi });
    }
    Ok(h)
}

fn code_set(system: CodeSystem, raw: &[String], context: &str) -> Result<CodeSet, RuleError> {
    if raw.is_empty() {
        return Err(RuleError::EmptyCodeSet(context.to_string()));
    }
    CodeSet::new(system, raw).map_err(|source| RuleError::Code { context: context.to_string(), source })
}

/// Parses and validates a JSON rule file.
pub fn parse_rules(text: &str) -> Result<RuleSet, RuleError> {
    let file: RuleFile = serde_json::from_str(text).map_err(|e| RuleError::Syntax(e.to_string()))?;

    let anchor_codes = code_set(file.anchor.system, &file.anchor.codes, "anchor")?;
    let admission_codes = code_set(file.admission.system, &file.admission.codes, "admission")?;
    if anchor_codes.system == admission_codes.system {
        if let Some(v) = anchor_codes.values.iter().find(|v| admission_codes.values.contains(v)) {
            return Err(RuleError::AnchorAdmissionOverlap(
                normalize_code(anchor_codes.system, v).expect("normalized"),
            ));
        }
    }
    let primary_horizon = check_horizon(file.primary_horizon, "primary_horizon")?;

    let mut names = BTreeSet::new();
    let mut validation = Vec::with_capacity(file.validation.len());
    for clause in file.validation {
        let context = format!("validation clause {:?}", clause.name);
        if !names.insert(clause.name.clone()) {
            return Err(RuleError::DuplicateClauseName(clause.name));
        }
        let codes = code_set(clause.system, &clause.codes, &context)?;
        let horizon = check_horizon(clause.horizon, &context)?;
        let min_count = clause.min_count.unwrap_or(1);
        if min_count == 0 {
            return Err(RuleError::InvalidMinCount(clause.name));
        }
        validation.push(ValidationClause { name: clause.name, codes, horizon, min_count });
    }

    Ok(RuleSet { name: file.name, anchor_codes, admission_codes, primary_horizon, validation })
}

/// Non-fatal advisories about a parsed rule set. Empty means clean.
pub fn validate_rules(rs: &RuleSet) -> Vec<String> {
    let mut warnings = Vec::new();

    let mut dup_check = |label: &str, set: &CodeSet| {
        let mut seen = BTreeSet::new();
        for v in &set.values {
            if !seen.insert(v) {
                warnings.push(format!("duplicate code {}:{} in {label}", set.system, v));
            }
        }
    };
    dup_check("anchor", &rs.anchor_codes);
    dup_check("admission", &rs.admission_codes);
    for clause in &rs.validation {
        dup_check(&format!("validation clause {:?}", clause.name), &clause.codes);
    }

    for clause in &rs.validation {
        for code in clause.codes.codes() {
            if rs.anchor_codes.contains(&code) || rs.admission_codes.contains(&code) {
                warnings.push(format!(
                    "validation clause {:?} code {code} is also an anchor or admission code",
                    clause.name
                ));
            }
        }
        // Each hit is a distinct (code, date) event inside the window.
        let achievable = clause.codes.codes().len() as u64 * clause.horizon.width();
        if u64::from(clause.min_count) > achievable {
            warnings.push(format!(
                "validation clause {:?} requires {} events but at most {achievable} distinct events fit its horizon",
                clause.name, clause.min_count
            ));
        }
    }
    warnings
}

#[cfg(test)]
mod tests {
    use super::*;

    const COVID: &str = include_str!("../../../rules/covid19.json");

    fn icd(v: &str) -> Code {
        normalize_code(CodeSystem::Icd10, v).unwrap()
    }

    #[test]
    fn bundled_covid_rules() {
        let rs = parse_rules(COVID).unwrap();
        assert_eq!(rs.anchor_codes.codes().into_iter().collect::<Vec<_>>(), vec![icd("U07.1")]);
        assert_eq!(rs.admission_codes.system, CodeSystem::Cpt);
        assert_eq!(rs.admission_codes.values(), ["99221", "99222", "99223"]);
        assert_eq!(rs.primary_horizon, Horizon { lo: -2, hi: 14 });
        assert_eq!(rs.validation.len(), 1);
        let clause = &rs.validation[0];
        assert_eq!(clause.name, "resp_dx");
        assert_eq!(clause.horizon, Horizon { lo: -14, hi: 7 });
        assert_eq!(clause.min_count, 1);
        let expected: BTreeSet<Code> =
            ["J12.81", "J12.89", "J20.8", "J40", "J22", "J98.9", "J80"].into_iter().map(icd).collect();
        assert_eq!(clause.codes.codes(), expected);
        assert!(validate_rules(&rs).is_empty());
    }

    fn with_patch(patch: impl FnOnce(&mut serde_json::Value)) -> String {
        let mut v: serde_json::Value = serde_json::from_str(COVID).unwrap();
        patch(&mut v);
        v.to_string()
    }

    #[test]
    fn inverted_horizon() {
        let text = with_patch(|v| v["primary_horizon"] = serde_json::json!({"lo": 5, "hi": 2}));
        assert!(matches!(parse_rules(&text), Err(RuleError::InvalidHorizon { lo: 5, hi: 2, .. })));
        let text = with_patch(|v| v["validation"][0]["horizon"] = serde_json::json!({"lo": 1, "hi": 0}));
        assert!(matches!(parse_rules(&text), Err(RuleError::InvalidHorizon { .. })));
    }

    #[test]
    fn empty_anchor_codes() {
        let text = with_patch(|v| v["anchor"]["codes"] = serde_json::json!([]));
        assert!(matches!(parse_rules(&text), Err(RuleError::EmptyCodeSet(_))));
    }

    #[test]
    fn duplicate_clause_name() {
        let text = with_patch(|v| {
            let c = v["validation"][0].clone();
            v["validation"].as_array_mut().unwrap().push(c);
        });
        assert!(matches!(parse_rules(&text), Err(RuleError::DuplicateClauseName(n)) if n == "resp_dx"));
    }

    #[test]
    fn syntax_errors() {
        assert!(matches!(parse_rules("{"), Err(RuleError::Syntax(_))));
        let text = with_patch(|v| v["anchor"]["system"] = serde_json::json!("LOINC"));
        assert!(matches!(parse_rules(&text), Err(RuleError::Syntax(_))));
        let text = with_patch(|v| v["extra"] = serde_json::json!(1));
        assert!(matches!(parse_rules(&text), Err(RuleError::Syntax(_))));
    }

    #[test]
    fn anchor_admission_overlap_rejected() {
        let text = with_patch(|v| {
            v["admission"] = serde_json::json!({"system": "ICD10", "codes": ["u071"]});
        });
        assert!(matches!(parse_rules(&text), Err(RuleError::AnchorAdmissionOverlap(_))));
        // Same text in a different system is a different code.
        let text = with_patch(|v| {
            v["admission"] = serde_json::json!({"system": "CPT", "codes": ["U07.1"]});
        });
        assert!(parse_rules(&text).is_ok());
    }

    #[test]
    fn zero_min_count_rejected() {
        let text = with_patch(|v| v["validation"][0]["min_count"] = serde_json::json!(0));
        assert!(matches!(parse_rules(&text), Err(RuleError::InvalidMinCount(_))));
    }

    #[test]
    fn duplicate_code_warning() {
        let text = with_patch(|v| v["validation"][0]["codes"] = serde_json::json!(["J22", "j2.2"]));
        let warnings = validate_rules(&parse_rules(&text).unwrap());
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("duplicate code"), "{warnings:?}");
    }

    #[test]
    fn achievable_min_count_has_no_warning() {
        let text = with_patch(|v| {
            v["validation"][0]["codes"] = serde_json::json!(["J22", "J80"]);
            v["validation"][0]["min_count"] = serde_json::json!(3);
        });
        assert!(validate_rules(&parse_rules(&text).unwrap()).is_empty());

        let text = with_patch(|v| {
            v["validation"][0]["codes"] = serde_json::json!(["J22"]);
            v["validation"][0]["horizon"] = serde_json::json!({"lo": 0, "hi": 1});
            v["validation"][0]["min_count"] = serde_json::json!(3);
        });
        assert_eq!(validate_rules(&parse_rules(&text).unwrap()).len(), 1);
    }

    #[test]
    fn clause_code_overlapping_anchor_is_flagged() {
        let text = with_patch(|v| v["validation"][0]["codes"] = serde_json::json!(["U07.1"]));
        let warnings = validate_rules(&parse_rules(&text).unwrap());
        assert!(warnings.iter().any(|w| w.contains("also an anchor")), "{warnings:?}");
    }

    #[test]
    fn serialize_round_trip() {
        let rs = parse_rules(COVID).unwrap();
        assert_eq!(parse_rules(&rs.to_json()).unwrap(), rs);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn system() -> impl Strategy<Value = CodeSystem> {
            prop::sample::select(CodeSystem::ALL.to_vec())
        }

        fn horizon() -> impl Strategy<Value = Horizon> {
            (-30i32..30, 0i32..30).prop_map(|(lo, w)| Horizon { lo, hi: lo + w })
        }

        prop_compose! {
            fn rule_set()(
                anchor in prop::collection::vec("[A-Z][0-9]{2}(\\.[0-9])?", 1..4),
                admission in prop::collection::vec("9[0-9]{4}", 1..4),
                primary in horizon(),
                clauses in prop::collection::vec(
                    (system(), prop::collection::vec("[A-Z][0-9]{2,3}", 1..5), horizon(), 1u32..4),
                    0..3,
                ),
            ) -> RuleSet {
                RuleSet {
                    name: "generated".into(),
                    anchor_codes: CodeSet::new(CodeSystem::Icd10, &anchor).unwrap(),
                    admission_codes: CodeSet::new(CodeSystem::Cpt, &admission).unwrap(),
                    primary_horizon: primary,
                    validation: clauses
                        .into_iter()
                        .enumerate()
                        .map(|(i, (sys, codes, h, min_count))| ValidationClause {
                            name: format!("clause_{i}"),
                            codes: CodeSet::new(sys, &codes).unwrap(),
                            horizon: h,
                            min_count,
                        })
                        .collect(),
                }
            }
        }

        proptest! {
            #[test]
            fn round_trip(rs in rule_set()) {
                prop_assert_eq!(parse_rules(&rs.to_json()).unwrap(), rs);
            }

            #[test]
            fn contains_is_monotone(inner in horizon(), grow_lo in 0i32..10, grow_hi in 0i32..10, x in -60i32..60) {
                let outer = Horizon { lo: inner.lo - grow_lo, hi: inner.hi + grow_hi };
                prop_assert!(inner.is_within(&outer));
                if inner.contains(x) {
                    prop_assert!(outer.contains(x));
                }
            }
        }
    }
}

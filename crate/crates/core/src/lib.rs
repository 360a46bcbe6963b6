//! Event-specific hospitalization matching over patient-level claims.
//!
//! Claims are streamed one patient at a time (see [`ingest`]), classified
//! against a declarative [`rules::RuleSet`] by [`engine`], and summarized by
//! [`report`] and [`sensitivity`]. [`synth`] builds cohorts with known answers.

pub mod engine;
pub mod ingest;
pub mod model;
pub mod parallel;
pub mod report;
pub mod results;
pub mod rules;
pub mod sensitivity;
pub mod synth;

pub use engine::{classify_all, classify_bruteforce, classify_patient, classify_stream};
pub use ingest::{read_claims, read_demographics, IngestOptions, InputFormat, PatientBundle};
pub use model::{ClaimEvent, Code, CodeSystem, Demographics, EpochDay, MatchOutcome, MatchStatus, Sex, ValidationHit};
pub use parallel::WorkerPool;
pub use rules::{parse_rules, Horizon, RuleSet, ValidationClause};

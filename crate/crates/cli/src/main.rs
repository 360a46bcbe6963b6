//! `claimhorizon` batch runner.
//!
//! Exit codes: 0 success, 1 fatal input or processing error, 2 usage error.

mod manifest;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use claimhorizon::ingest::{external_sort_claims, read_claims, read_demographics, IngestOptions, InputFormat, SortOptions};
use claimhorizon::model::{Demographics, MatchOutcome, MatchStatus};
use claimhorizon::report::{cohort_to_csv, compare_reference, comparison_to_csv, AgeBins, CohortCounts, ReferenceTable};
use claimhorizon::results::{read_outcomes, write_outcome};
use claimhorizon::rules::{parse_rules, validate_rules, RuleSet};
use claimhorizon::sensitivity::{offset_histogram, sweep_to_csv, HistogramMode, HorizonSweep, OffsetHistogram};
use claimhorizon::synth::{discrepancies_to_csv, generate, metadata_json, read_labels, verify_labels, SynthSpec};
use claimhorizon::{classify_stream, WorkerPool};

use manifest::{manifest_path_for, sibling, write_atomic, RunManifest};

#[derive(Parser)]
#[command(name = "claimhorizon", version, about = "Reconstruct event-specific hospitalizations from patient-level claims")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify every patient in a claims file and write one JSON result per line.
    Classify(ClassifyArgs),
    /// Aggregate a results file into an age (and optionally sex) stratified cohort table.
    Report(ReportArgs),
    /// Re-run classification over a grid of primary-horizon endpoints.
    Sweep(SweepArgs),
    /// Generate a synthetic cohort with known classifications.
    Synth(SynthArgs),
    /// Compare a results file with ground-truth labels; exits 1 on any discrepancy.
    Verify(VerifyArgs),
    /// Sort a claims file by patient and date so it can be streamed with --sorted.
    Sort(SortArgs),
}

#[derive(clap::Args)]
struct ClaimsInput {
    /// Claims file (CSV, or JSON Lines when the extension is .jsonl/.ndjson).
    #[arg(long)]
    claims: PathBuf,
    /// Rule file (JSON).
    #[arg(long)]
    rules: PathBuf,
    /// Input is already grouped by ascending patient_id; skip the external sort.
    #[arg(long)]
    sorted: bool,
    /// Abort on the first malformed claims row instead of skipping it.
    #[arg(long)]
    strict: bool,
    /// Worker threads; 0 uses every core. Output does not depend on this.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Directory for external-sort spill files (default: system temp dir).
    #[arg(long)]
    scratch_dir: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ClassifyArgs {
    #[command(flatten)]
    input: ClaimsInput,
    /// Results file to write (JSON Lines).
    #[arg(long)]
    out: PathBuf,
    /// Demographics file; its patients without any claims are reported as no_anchor.
    #[arg(long)]
    demographics: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// Results file written by `classify`.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    demographics: PathBuf,
    /// Ascending age boundaries; `18,50,65` gives 18-49, 50-64, 65+.
    #[arg(long, value_parser = parse_bins, default_value = "18,50,65")]
    bins: AgeBins,
    /// Add age x sex rows and sex marginals.
    #[arg(long)]
    by_sex: bool,
    /// Reference table (JSON) to compare against.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Cohort CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Comparison CSV (default: <out stem>.comparison.csv).
    #[arg(long)]
    comparison: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[command(flatten)]
    input: ClaimsInput,
    /// Range of lower endpoints, e.g. `-7..0` (inclusive).
    #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
    lo: (i32, i32),
    /// Range of upper endpoints, e.g. `0..21` (inclusive).
    #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
    hi: (i32, i32),
    /// Sweep CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Offset histogram CSV for the rule file's own horizon (default: <out stem>.histogram.csv).
    #[arg(long)]
    histogram: Option<PathBuf>,
    /// Count failed-validation patients in the histogram too.
    #[arg(long)]
    include_failed: bool,
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Synth spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    rules: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for claims.csv, demographics.csv, labels.csv and metadata.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(clap::Args)]
struct VerifyArgs {
    #[arg(long)]
    results: PathBuf,
    /// Labels CSV written by `synth`.
    #[arg(long)]
    labels: PathBuf,
    /// Optional discrepancy CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SortArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// In-memory buffer before spilling a sorted run, in MiB.
    #[arg(long, default_value_t = 64)]
    buffer_mb: usize,
    #[arg(long)]
    scratch_dir: Option<PathBuf>,
}

fn parse_bins(s: &str) -> Result<AgeBins, String> {
    let bounds = s
        .split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    AgeBins::new(bounds).map_err(|e| e.to_string())
}

fn parse_range(s: &str) -> Result<(i32, i32), String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected A..B, got {s:?}"))?;
    let a: i32 = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: i32 = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    if a > b {
        return Err(format!("empty range {a}..{b}"));
    }
    Ok((a, b))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Classify(a) => cmd_classify(a),
        Command::Report(a) => cmd_report(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Sort(a) => cmd_sort(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_rules(path: &Path) -> Result<RuleSet> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read rules {}", path.display()))?;
    let rs = parse_rules(&text).with_context(|| format!("invalid rules {}", path.display()))?;
    for warning in validate_rules(&rs) {
        eprintln!("warning: {}: {warning}", path.display());
    }
    Ok(rs)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

fn scratch(dir: &Option<PathBuf>) -> PathBuf {
    dir.clone().unwrap_or_else(std::env::temp_dir)
}

/// Opens the claims file for streaming, externally sorting it first unless
/// the caller vouches that it is already grouped.
fn open_claims(input: &ClaimsInput) -> Result<(Box<dyn BufRead>, InputFormat)> {
    let format = InputFormat::from_path(&input.claims);
    let reader = open(&input.claims)?;
    if input.sorted {
        return Ok((Box::new(reader), format));
    }
    let dir = scratch(&input.scratch_dir);
    let mut sorted = tempfile::tempfile_in(&dir).with_context(|| format!("cannot create scratch file in {}", dir.display()))?;
    {
        let mut w = BufWriter::new(&mut sorted);
        external_sort_claims(reader, &mut w, &dir, SortOptions { format, ..SortOptions::default() })
            .with_context(|| format!("sorting {}", input.claims.display()))?;
        w.flush()?;
    }
    sorted.seek(SeekFrom::Start(0))?;
    Ok((Box::new(BufReader::new(sorted)), format))
}

fn ingest_options(strict: bool) -> IngestOptions {
    IngestOptions { strict, ..IngestOptions::default() }
}

fn claims_context(input: &ClaimsInput) -> String {
    let hint = if input.sorted { " (drop --sorted to sort it first)" } else { "" };
    format!("reading claims {}{hint}", input.claims.display())
}

fn record_input_flags(m: &mut RunManifest, input: &ClaimsInput) -> Result<()> {
    m.flag("claims", input.claims.display().to_string())
        .flag("rules", input.rules.display().to_string())
        .flag("sorted", input.sorted)
        .flag("strict", input.strict)
        .flag("workers", input.workers);
    m.input("claims", &input.claims)?;
    m.input("rules", &input.rules)
}

fn report_rejects(path: &Path, rejected: u64) {
    if rejected > 0 {
        eprintln!("warning: {}: skipped {rejected} malformed row(s)", path.display());
    }
}

fn cmd_classify(args: ClassifyArgs) -> Result<ExitCode> {
    let mut m = RunManifest::start("classify");
    let rs = load_rules(&args.input.rules)?;
    let demographics: Option<BTreeMap<String, Demographics>> = match &args.demographics {
        Some(p) => Some(
            read_demographics(open(p)?, InputFormat::from_path(p))
                .with_context(|| format!("reading demographics {}", p.display()))?,
        ),
        None => None,
    };
    let (input, format) = open_claims(&args.input)?;
    let mut reader = read_claims(input, format, ingest_options(args.input.strict));

    let mut by_status: BTreeMap<&'static str, u64> = MatchStatus::ALL.iter().map(|s| (s.as_str(), 0)).collect();
    let mut patients = 0u64;
    write_atomic(&args.out, |w| {
        let mut emit = |o: &MatchOutcome| -> Result<()> {
            write_outcome(w, o)?;
            *by_status.get_mut(o.status.as_str()).expect("all statuses") += 1;
            patients += 1;
            Ok(())
        };
        // Patients known only from demographics have no anchor by definition.
        let mut claimless = demographics.iter().flat_map(|d| d.keys()).peekable();
        for item in classify_stream(reader.by_ref(), &rs, args.input.workers) {
            let outcome = item.with_context(|| claims_context(&args.input))?;
            while let Some(id) = claimless.next_if(|id| id.as_str() <= outcome.patient_id.as_str()) {
                if *id != outcome.patient_id {
                    emit(&MatchOutcome::no_anchor(id.clone()))?;
                }
            }
            emit(&outcome)?;
        }
        for id in claimless {
            emit(&MatchOutcome::no_anchor(id.clone()))?;
        }
        Ok(())
    })?;

    let report = reader.into_report();
    report_rejects(&args.input.claims, report.rows_rejected);
    record_input_flags(&mut m, &args.input)?;
    m.flag("out", args.out.display().to_string());
    if let Some(p) = &args.demographics {
        m.flag("demographics", p.display().to_string());
        m.input("demographics", p)?;
    }
    m.count("rows_read", report.rows_read)
        .count("rows_rejected", report.rows_rejected)
        .count("patients", patients)
        .count("by_status", json!(by_status));
    m.finish(&[("results", &args.out)], &manifest_path_for(&args.out))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode> {
    let mut m = RunManifest::start("report");
    let demographics = read_demographics(open(&args.demographics)?, InputFormat::from_path(&args.demographics))
        .with_context(|| format!("reading demographics {}", args.demographics.display()))?;
    let reference = match &args.reference {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read reference {}", p.display()))?;
            Some(ReferenceTable::from_json(&text).with_context(|| format!("invalid reference {}", p.display()))?)
        }
        None => None,
    };

    let mut counts = CohortCounts::new(args.bins.clone());
    let mut patients = 0u64;
    let mut unknown = 0u64;
    for outcome in read_outcomes(open(&args.results)?) {
        let outcome = outcome.with_context(|| format!("reading results {}", args.results.display()))?;
        unknown += u64::from(!demographics.contains_key(&outcome.patient_id));
        patients += 1;
        counts.add(&outcome, &demographics);
    }
    if unknown > 0 {
        eprintln!("warning: {unknown} result patient(s) missing from demographics; counted as unknown");
    }
    let rows = counts.rows(args.by_sex);

    let comparison = match &reference {
        Some(r) => Some(compare_reference(&rows, r).context("comparing with reference")?),
        None => None,
    };

    write_atomic(&args.out, |w| Ok(w.write_all(cohort_to_csv(&rows).as_bytes())?))?;
    let mut outputs: Vec<(&str, PathBuf)> = vec![("cohort", args.out.clone())];
    if let Some(cmp) = &comparison {
        let path = args.comparison.clone().unwrap_or_else(|| sibling(&args.out, "comparison"));
        write_atomic(&path, |w| Ok(w.write_all(comparison_to_csv(cmp).as_bytes())?))?;
        outputs.push(("comparison", path));
    }

    m.flag("results", args.results.display().to_string())
        .flag("demographics", args.demographics.display().to_string())
        .flag("bins", json!(args.bins.boundaries()))
        .flag("by_sex", args.by_sex)
        .flag("out", args.out.display().to_string());
    m.input("results", &args.results)?;
    m.input("demographics", &args.demographics)?;
    if let Some(p) = &args.reference {
        m.flag("reference", p.display().to_string());
        m.input("reference", p)?;
    }
    m.count("patients", patients).count("unknown_demographics", unknown);
    let outputs: Vec<(&str, &Path)> = outputs.iter().map(|(r, p)| (*r, p.as_path())).collect();
    m.finish(&outputs, &manifest_path_for(&args.out))?;
    Ok(ExitCode::SUCCESS)
}

const SWEEP_CHUNK: usize = 4096;

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode> {
    let mut m = RunManifest::start("sweep");
    let rs = load_rules(&args.input.rules)?;
    let lo: Vec<i32> = (args.lo.0..=args.lo.1).collect();
    let hi: Vec<i32> = (args.hi.0..=args.hi.1).collect();
    let mode = if args.include_failed { HistogramMode::AnyChosenPair } else { HistogramMode::MatchedOnly };

    let (input, format) = open_claims(&args.input)?;
    let mut reader = read_claims(input, format, ingest_options(args.input.strict));
    let pool = WorkerPool::new(args.input.workers);
    let mut sweep = HorizonSweep::new(&rs, &lo, &hi);
    let mut hist = OffsetHistogram::default();
    let mut patients = 0u64;
    let mut chunk = Vec::with_capacity(SWEEP_CHUNK);
    let mut flush = |chunk: &mut Vec<_>, sweep: &mut HorizonSweep| {
        sweep.add_chunk(chunk, &pool);
        let outcomes = pool.map(chunk, |b| claimhorizon::classify_patient(b, &rs));
        let part = offset_histogram(&outcomes, mode);
        for (offset, n) in part.counts {
            *hist.counts.entry(offset).or_default() += n;
        }
        hist.total += part.total;
        patients += chunk.len() as u64;
        chunk.clear();
    };
    for bundle in reader.by_ref() {
        chunk.push(bundle.with_context(|| claims_context(&args.input))?);
        if chunk.len() == SWEEP_CHUNK {
            flush(&mut chunk, &mut sweep);
        }
    }
    flush(&mut chunk, &mut sweep);
    let cells = sweep.finish();
    let report = reader.into_report();
    report_rejects(&args.input.claims, report.rows_rejected);

    let hist_path = args.histogram.clone().unwrap_or_else(|| sibling(&args.out, "histogram"));
    write_atomic(&args.out, |w| Ok(w.write_all(sweep_to_csv(&cells).as_bytes())?))?;
    write_atomic(&hist_path, |w| Ok(w.write_all(hist.to_csv().as_bytes())?))?;

    record_input_flags(&mut m, &args.input)?;
    m.flag("lo", format!("{}..{}", args.lo.0, args.lo.1))
        .flag("hi", format!("{}..{}", args.hi.0, args.hi.1))
        .flag("include_failed", args.include_failed)
        .flag("out", args.out.display().to_string());
    m.count("rows_read", report.rows_read)
        .count("rows_rejected", report.rows_rejected)
        .count("patients", patients)
        .count("cells", cells.len());
    m.finish(&[("sweep", &args.out), ("histogram", &hist_path)], &manifest_path_for(&args.out))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let mut m = RunManifest::start("synth");
    let rs = load_rules(&args.rules)?;
    let text = fs::read_to_string(&args.spec).with_context(|| format!("cannot read spec {}", args.spec.display()))?;
    let mut spec = SynthSpec::from_json(&text).with_context(|| format!("spec {}", args.spec.display()))?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    fs::create_dir_all(&args.out_dir).with_context(|| format!("cannot create {}", args.out_dir.display()))?;

    let temp = |_: ()| tempfile::NamedTempFile::new_in(&args.out_dir).context("cannot create temp file");
    let (mut c, mut d, mut l) = (temp(())?, temp(())?, temp(())?);
    let summary = {
        let (mut cw, mut dw, mut lw) = (BufWriter::new(c.as_file_mut()), BufWriter::new(d.as_file_mut()), BufWriter::new(l.as_file_mut()));
        let summary = generate(&spec, &rs, &mut cw, &mut dw, &mut lw)?;
        cw.flush()?;
        dw.flush()?;
        lw.flush()?;
        summary
    };
    let claims = args.out_dir.join("claims.csv");
    let demographics = args.out_dir.join("demographics.csv");
    let labels = args.out_dir.join("labels.csv");
    let metadata = args.out_dir.join("metadata.json");
    c.persist(&claims)?;
    d.persist(&demographics)?;
    l.persist(&labels)?;
    write_atomic(&metadata, |w| Ok(writeln!(w, "{}", metadata_json(&spec, &rs, &summary))?))?;

    m.flag("spec", args.spec.display().to_string())
        .flag("rules", args.rules.display().to_string())
        .flag("seed", spec.seed)
        .flag("out_dir", args.out_dir.display().to_string());
    m.input("spec", &args.spec)?;
    m.input("rules", &args.rules)?;
    m.count("patients", summary.patients).count("claim_rows", summary.claim_rows);
    m.finish(
        &[("claims", &claims), ("demographics", &demographics), ("labels", &labels), ("metadata", &metadata)],
        &args.out_dir.join("manifest.json"),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    let outcomes = read_outcomes(open(&args.results)?)
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| format!("reading results {}", args.results.display()))?;
    let labels = read_labels(open(&args.labels)?).with_context(|| format!("reading labels {}", args.labels.display()))?;
    let report = verify_labels(&outcomes, &labels)?;
    if let Some(out) = &args.out {
        write_atomic(out, |w| Ok(w.write_all(discrepancies_to_csv(&report).as_bytes())?))?;
    }
    println!("{} patients, {} discrepancies", labels.len(), report.len());
    for d in report.iter().take(20) {
        eprintln!(
            "  {}: expected {} {:?}, got {} {:?}",
            d.patient_id, d.expected_status, d.expected_offset, d.observed_status, d.observed_offset
        );
    }
    Ok(if report.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_sort(args: SortArgs) -> Result<ExitCode> {
    let mut m = RunManifest::start("sort");
    let format = InputFormat::from_path(&args.input);
    let dir = scratch(&args.scratch_dir);
    let options = SortOptions { format, max_buffer_bytes: args.buffer_mb.max(1) << 20 };
    let mut stats = None;
    write_atomic(&args.out, |w| {
        stats = Some(external_sort_claims(open(&args.input)?, w, &dir, options)?);
        Ok(())
    })?;
    let stats = stats.expect("sort ran");
    m.flag("input", args.input.display().to_string()).flag("buffer_mb", args.buffer_mb);
    m.input("input", &args.input)?;
    m.count("lines", stats.lines).count("spilled_runs", stats.spilled_runs);
    m.finish(&[("sorted", &args.out)], &manifest_path_for(&args.out))?;
    Ok(ExitCode::SUCCESS)
}

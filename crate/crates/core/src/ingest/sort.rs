//! External merge sort of claims lines by `(patient_id, date)`.
//!
//! Lines are kept byte-for-byte; only their order changes. Ties keep the
//! original input order, so an already sorted file comes out unchanged.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::Path;

use serde::Deserialize;

use super::{IngestError, InputFormat};

#[derive(Debug, Clone, Copy)]
pub struct SortOptions {
    pub format: InputFormat,
    /// Approximate in-memory buffer size before a sorted run is spilled.
    pub max_buffer_bytes: usize,
}

impl Default for SortOptions {
    fn default() -> Self {
        SortOptions { format: InputFormat::Csv, max_buffer_bytes: 64 << 20 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SortStats {
    pub lines: u64,
    /// Number of runs spilled to scratch files (0 when everything fit in memory).
    pub spilled_runs: usize,
}

type SortKey = (String, String);

fn strip_quotes(s: &str) -> &str {
    let s = s.trim();
    s.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(s)
}

fn csv_key(line: &str) -> SortKey {
    let mut fields = line.splitn(3, ',');
    let patient = strip_quotes(fields.next().unwrap_or(""));
    let date = strip_quotes(fields.next().unwrap_or(""));
    (patient.to_string(), date.to_string())
}

#[derive(Deserialize)]
struct JsonKey {
    #[serde(default)]
    patient_id: String,
    #[serde(default)]
    date: String,
}

fn jsonl_key(line: &str) -> SortKey {
    // Unparseable lines sort first; the reader rejects them later.
    serde_json::from_str::<JsonKey>(line)
        .map(|k| (k.patient_id.trim().to_string(), k.date.trim().to_string()))
        .unwrap_or_default()
}

fn sort_run(run: &mut [(SortKey, String)]) {
    // Both sorts are stable, which keeps equal keys in input order.
    #[cfg(feature = "parallel")]
    {
        use rayon::slice::ParallelSliceMut;
        run.par_sort_by(|a, b| a.0.cmp(&b.0));
    }
    #[cfg(not(feature = "parallel"))]
    run.sort_by(|a, b| a.0.cmp(&b.0));
}

fn spill(run: &mut Vec<(SortKey, String)>, scratch_dir: &Path) -> Result<File, IngestError> {
    sort_run(run);
    let file = tempfile::tempfile_in(scratch_dir)?;
    let mut w = BufWriter::new(file);
    for (_, line) in run.drain(..) {
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    let mut file = w.into_inner().map_err(|e| e.into_error())?;
    file.seek(SeekFrom::Start(0))?;
    Ok(file)
}

/// Sorts a claims stream so that it satisfies the grouping contract of
/// [`super::read_claims`]. For CSV input the first line is copied through as
/// the header. Output lines end in `\n`.
pub fn external_sort_claims<R: BufRead, W: Write>(
    input: R,
    mut output: W,
    scratch_dir: &Path,
    options: SortOptions,
) -> Result<SortStats, IngestError> {
    let key_of: fn(&str) -> SortKey = match options.format {
        InputFormat::Csv => csv_key,
        InputFormat::Jsonl => jsonl_key,
    };

    let mut lines = input.lines();
    if options.format == InputFormat::Csv {
        match lines.next() {
            Some(header) => {
                let header = header?;
                output.write_all(header.trim_end_matches('\r').as_bytes())?;
                output.write_all(b"\n")?;
            }
            None => {
                output.flush()?;
                return Ok(SortStats::default());
            }
        }
    }

    let mut stats = SortStats::default();
    let mut runs: Vec<File> = Vec::new();
    let mut buffer: Vec<(SortKey, String)> = Vec::new();
    let mut buffered_bytes = 0usize;
    for line in lines {
        let mut line = line?;
        if line.ends_with('\r') {
            line.pop();
        }
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        buffered_bytes += line.len() + 64;
        buffer.push((key_of(&line), line));
        if buffered_bytes >= options.max_buffer_bytes {
            runs.push(spill(&mut buffer, scratch_dir)?);
            buffered_bytes = 0;
        }
    }

    if runs.is_empty() {
        sort_run(&mut buffer);
        for (_, line) in &buffer {
            output.write_all(line.as_bytes())?;
            output.write_all(b"\n")?;
        }
        output.flush()?;
        return Ok(stats);
    }
    if !buffer.is_empty() {
        runs.push(spill(&mut buffer, scratch_dir)?);
    }
    stats.spilled_runs = runs.len();

    // k-way merge; run index breaks ties so earlier input wins.
    let mut readers: Vec<_> = runs.into_iter().map(|f| BufReader::new(f).lines()).collect();
    let mut heap = BinaryHeap::with_capacity(readers.len());
    for (idx, r) in readers.iter_mut().enumerate() {
        if let Some(line) = r.next() {
            let line = line?;
            heap.push(Reverse((key_of(&line), idx, line)));
        }
    }
    while let Some(Reverse((_, idx, line))) = heap.pop() {
        output.write_all(line.as_bytes())?;
        output.write_all(b"\n")?;
        if let Some(next) = readers[idx].next() {
            let next = next?;
            heap.push(Reverse((key_of(&next), idx, next)));
        }
    }
    output.flush()?;
    Ok(stats)
}

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub const HASH_ALGORITHM: &str = "sha256";

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub role: String,
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn digest_file(role: &str, path: &Path) -> Result<FileDigest> {
    let mut file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = file.read(&mut buf).with_context(|| format!("reading {}", path.display()))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(FileDigest { role: role.into(), path: path.display().to_string(), bytes, sha256: hex::encode(hasher.finalize()) })
}

/// Provenance record written next to every output of a successful run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub hash_algorithm: &'static str,
    pub started_at: String,
    pub finished_at: String,
    pub flags: Map<String, Value>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub counts: Map<String, Value>,
}

impl RunManifest {
    pub fn start(command: &'static str) -> Self {
        RunManifest {
            tool: "claimhorizon",
            version: env!("CARGO_PKG_VERSION"),
            command,
            hash_algorithm: HASH_ALGORITHM,
            started_at: now(),
            finished_at: String::new(),
            flags: Map::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            counts: Map::new(),
        }
    }

    pub fn flag(&mut self, name: &str, value: impl Into<Value>) -> &mut Self {
        self.flags.insert(name.into(), value.into());
        self
    }

    pub fn count(&mut self, name: &str, value: impl Into<Value>) -> &mut Self {
        self.counts.insert(name.into(), value.into());
        self
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.push(digest_file(role, path)?);
        Ok(())
    }

    /// Digests the outputs, stamps the end time and writes `manifest_path`.
    pub fn finish(mut self, outputs: &[(&str, &Path)], manifest_path: &Path) -> Result<()> {
        for (role, path) in outputs {
            self.outputs.push(digest_file(role, path)?);
        }
        self.finished_at = now();
        write_atomic(manifest_path, |w| {
            serde_json::to_writer_pretty(&mut *w, &self)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// `results.jsonl` -> `results.jsonl.manifest.json`.
pub fn manifest_path_for(out: &Path) -> PathBuf {
    with_suffix(out, ".manifest.json")
}

pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// `sweep.csv` -> `sweep.histogram.csv`.
pub fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}.{tag}{ext}"))
}

/// Writes through a temp file in the destination directory and renames it
/// into place only if `body` succeeds, so a failed run leaves nothing behind.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("cannot write in {}", dir.display()))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w)?;
        w.flush().with_context(|| format!("writing {}", path.display()))?;
    }
    tmp.persist(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_paths() {
        assert_eq!(manifest_path_for(Path::new("out/r.jsonl")), Path::new("out/r.jsonl.manifest.json"));
        assert_eq!(sibling(Path::new("out/sweep.csv"), "histogram"), Path::new("out/sweep.histogram.csv"));
        assert_eq!(sibling(Path::new("cohort"), "comparison"), Path::new("cohort.comparison"));
    }

    #[test]
    fn digest_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc.txt");
        std::fs::write(&p, "abc").unwrap();
        let d = digest_file("x", &p).unwrap();
        assert_eq!(d.bytes, 3);
        assert_eq!(d.sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn failed_write_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        let r = write_atomic(&p, |w| {
            w.write_all(b"partial")?;
            anyhow::bail!("boom")
        });
        assert!(r.is_err());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}

//! Run directories: config snapshot, per-rollout transcripts, summaries and
//! a checksummed manifest.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::AgentError;
use crate::error::{Error, Result};
use crate::grading::TurnGrade;
use crate::metrics::{Horizon, MetricsTable};

pub const HARNESS_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RESULTS_FILE: &str = "results.json";
pub const TRANSCRIPT_DIR: &str = "transcripts";

pub const SUMMARY_HEADER: [&str; 9] = [
    "t",
    "turn_acc",
    "task_acc",
    "step_acc_est",
    "fmt_fail_frac",
    "std",
    "ci_low",
    "ci_high",
    "n_effective",
];

/// One line of a transcript stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub rollout_id: usize,
    pub t: usize,
    pub keys: Vec<String>,
    pub user_text: String,
    pub raw_reply: String,
    pub expected_state: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<TurnGrade>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub tokens_estimated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_cause: Option<AgentError>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    /// Counterfactual trials: number of corrupted turns in the injected history.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupted_turns: Option<usize>,
    /// Counterfactual trials: whether the reply adds the right increment to
    /// the last displayed (possibly corrupted) total.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_vs_displayed: Option<bool>,
}

/// Append-only line-delimited record stream, flushed after every record.
pub struct TranscriptWriter {
    path: PathBuf,
    file: File,
}

impl TranscriptWriter {
    /// Creates (truncating) the stream at `path`.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(TranscriptWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Opens `path` for appending.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(TranscriptWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write_record(&mut self, record: &TurnRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub records: Vec<TurnRecord>,
    /// Bytes after the last newline were ignored (a torn final write).
    pub torn_tail: bool,
}

/// Reads a transcript, ignoring an unterminated final line. A missing file
/// reads as empty.
pub fn read_transcript(path: &Path) -> Result<Transcript> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Ok(Transcript {
                records: Vec::new(),
                torn_tail: false,
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let mut records = Vec::new();
    for (n, line) in bytes[..complete].split(|&b| b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let rec: TurnRecord = serde_json::from_slice(line)
            .map_err(|e| Error::Record(format!("{}:{}: {e}", path.display(), n + 1)))?;
        records.push(rec);
    }
    Ok(Transcript {
        records,
        torn_tail: complete < bytes.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutStatus {
    /// Every turn has a record.
    Complete,
    /// Stopped by an agent error recorded as the last record.
    Aborted,
    /// Some turns are missing (interrupted run).
    Partial,
    Missing,
}

/// Classifies a rollout stream from its records alone.
pub fn rollout_status(records: &[TurnRecord], num_turns: usize) -> RolloutStatus {
    let in_order = records.iter().enumerate().all(|(i, r)| r.t == i + 1);
    match records.last() {
        None => RolloutStatus::Missing,
        Some(_) if !in_order => RolloutStatus::Partial,
        Some(last) if last.error_cause.is_some() => RolloutStatus::Aborted,
        Some(last) if last.t == num_turns => RolloutStatus::Complete,
        Some(_) => RolloutStatus::Partial,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub harness_version: String,
    pub template_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub overrides: Vec<String>,
    /// Relative path → SHA-256 of every output file.
    pub files: BTreeMap<String, String>,
}

/// A run directory on disk.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Opens `root`, creating it and its transcript directory if needed.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let t = root.join(TRANSCRIPT_DIR);
        fs::create_dir_all(&t).map_err(|e| Error::io(&t, e))?;
        Ok(RunDir { root })
    }

    /// Opens an existing run directory.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let cfg = root.join(CONFIG_FILE);
        if !cfg.is_file() {
            return Err(Error::config(format!("{} is not a run directory (no {CONFIG_FILE})", root.display())));
        }
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn transcript_path(&self, rollout_id: usize) -> PathBuf {
        self.root.join(TRANSCRIPT_DIR).join(format!("rollout-{rollout_id:06}.jsonl"))
    }

    pub fn named_transcript_path(&self, name: &str) -> PathBuf {
        self.root.join(TRANSCRIPT_DIR).join(format!("{name}.jsonl"))
    }

    /// Subdirectory holding a nested run.
    pub fn child(&self, name: &str) -> Result<RunDir> {
        RunDir::create(self.root.join(name))
    }

    /// Writes the config snapshot, or checks that an existing snapshot is
    /// identical: a snapshot never changes once a run has started.
    pub fn snapshot_config(&self, text: &str) -> Result<()> {
        let path = self.path(CONFIG_FILE);
        match fs::read_to_string(&path) {
            Ok(existing) if existing == text => Ok(()),
            Ok(_) => Err(Error::config(format!(
                "{} already holds a different configuration; use a fresh output directory",
                self.root.display()
            ))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => write_file(&path, text.as_bytes()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn read_config(&self) -> Result<String> {
        let path = self.path(CONFIG_FILE);
        fs::read_to_string(&path).map_err(|e| Error::io(path, e))
    }

    pub fn write_summary(&self, table: &MetricsTable) -> Result<()> {
        write_file(&self.path(SUMMARY_FILE), &summary_csv(table)?)
    }

    /// Writes `name` as pretty JSON with a trailing newline.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        write_file(&self.path(name), &bytes)
    }

    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(self.path(name), e.into_error()))?;
        write_file(&self.path(name), &bytes)
    }

    /// Checksums every file under the run and writes the manifest.
    pub fn write_manifest(&self, started_at: String, overrides: &[String]) -> Result<Manifest> {
        let mut files = BTreeMap::new();
        collect_checksums(&self.root, &self.root, &mut files)?;
        let manifest = Manifest {
            harness_version: HARNESS_VERSION.to_string(),
            template_version: crate::protocol::TEMPLATE_VERSION.to_string(),
            started_at,
            finished_at: timestamp(),
            overrides: overrides.to_vec(),
            files,
        };
        self.write_json(MANIFEST_FILE, &manifest)?;
        Ok(manifest)
    }

    /// Files whose current checksum differs from the manifest, plus files
    /// the manifest lists that no longer exist.
    pub fn verify_manifest(&self) -> Result<Vec<String>> {
        let path = self.path(MANIFEST_FILE);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&text)?;
        let mut now = BTreeMap::new();
        collect_checksums(&self.root, &self.root, &mut now)?;
        Ok(manifest
            .files
            .iter()
            .filter(|(k, v)| now.get(*k) != Some(*v))
            .map(|(k, _)| k.clone())
            .collect())
    }
}

/// Current UTC time in RFC 3339.
pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect_checksums(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_checksums(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if rel == MANIFEST_FILE {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.insert(rel, sha256_hex(&bytes));
        }
    }
    Ok(())
}

fn fmt_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        String::new()
    }
}

/// Per-turn CSV with the documented header.
pub fn summary_csv(table: &MetricsTable) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_HEADER)?;
    for r in &table.rows {
        w.write_record([
            r.t.to_string(),
            fmt_float(r.mean_turn_accuracy),
            fmt_float(r.mean_task_accuracy),
            fmt_float(r.step_accuracy_estimate),
            fmt_float(r.format_failure_fraction),
            r.std_task_accuracy.map(fmt_float).unwrap_or_default(),
            fmt_float(r.ci_low),
            fmt_float(r.ci_high),
            r.n_effective.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::io(SUMMARY_FILE, e.into_error()))
}

/// Horizon at one threshold, in turns and in steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonEntry {
    pub s: f64,
    pub turns: Option<usize>,
    pub steps: Option<usize>,
}

pub fn horizon_entries(table: &MetricsTable, thresholds: &[f64]) -> Vec<HorizonEntry> {
    thresholds
        .iter()
        .map(|&s| HorizonEntry {
            s,
            turns: table.horizon(s).turn(),
            steps: match table.horizon_steps(s) {
                Horizon::Reached(n) => Some(n),
                Horizon::NotReached => None,
            },
        })
        .collect()
}

//! JSON Lines trace persistence: one record per agent event, with a run
//! header carrying the config fingerprint for resume support.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::PatientResult;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace io error at {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("trace record {line} is malformed: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("trace has no run_header record")]
    MissingHeader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    RunHeader,
    Prompt,
    Completion,
    ToolCall,
    ToolResult,
    ParseEvent,
    StageResult,
    PatientResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub kind: RecordKind,
    pub seq: u64,
    pub timestamp: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disease: Option<String>,
    pub payload: serde_json::Value,
}

/// Serialized sink receiving records from concurrent patient tasks.
pub struct TraceWriter {
    file: Mutex<BufWriter<File>>,
    seq: AtomicU64,
    path: String,
}

impl TraceWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        Self::open_inner(path, false, 0)
    }

    /// Append to an existing trace, continuing its sequence numbering.
    pub fn append(path: impl AsRef<Path>, next_seq: u64) -> Result<Self, TraceError> {
        Self::open_inner(path, true, next_seq)
    }

    fn open_inner(path: impl AsRef<Path>, append: bool, next_seq: u64) -> Result<Self, TraceError> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| TraceError::Io {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| TraceError::Io {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        Ok(Self {
            file: Mutex::new(BufWriter::new(file)),
            seq: AtomicU64::new(next_seq),
            path: path.display().to_string(),
        })
    }

    pub fn write(
        &self,
        kind: RecordKind,
        patient_id: Option<&str>,
        disease: Option<&str>,
        payload: serde_json::Value,
    ) -> Result<u64, TraceError> {
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);
        let record = TraceRecord {
            kind,
            seq,
            timestamp: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            patient_id: patient_id.map(str::to_string),
            disease: disease.map(str::to_string),
            payload,
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        let mut file = self.file.lock().unwrap();
        writeln!(file, "{line}").and_then(|_| file.flush()).map_err(|e| TraceError::Io {
            path: self.path.clone(),
            reason: e.to_string(),
        })?;
        Ok(seq)
    }

    pub fn write_header(&self, config_fingerprint: &str) -> Result<(), TraceError> {
        self.write(
            RecordKind::RunHeader,
            None,
            None,
            serde_json::json!({ "config_fingerprint": config_fingerprint, "schema_version": 1 }),
        )
        .map(|_| ())
    }
}

/// A parsed trace file. `truncated` is set when the final line was cut off
/// mid-record; everything before it is still served.
#[derive(Debug, Clone)]
pub struct TraceFile {
    pub records: Vec<TraceRecord>,
    pub truncated: bool,
}

impl TraceFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| TraceError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let reader = BufReader::new(file);
        let mut records = Vec::new();
        let mut truncated = false;
        let mut lines = reader.lines().enumerate().peekable();
        while let Some((idx, line)) = lines.next() {
            let line = line.map_err(|e| TraceError::Io {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<TraceRecord>(&line) {
                Ok(record) => records.push(record),
                Err(e) => {
                    if lines.peek().is_none() {
                        truncated = true;
                    } else {
                        return Err(TraceError::Malformed {
                            line: idx + 1,
                            reason: e.to_string(),
                        });
                    }
                }
            }
        }
        Ok(Self { records, truncated })
    }

    pub fn header_fingerprint(&self) -> Result<String, TraceError> {
        self.records
            .iter()
            .find(|r| r.kind == RecordKind::RunHeader)
            .and_then(|r| r.payload.get("config_fingerprint"))
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or(TraceError::MissingHeader)
    }

    pub fn next_seq(&self) -> u64 {
        self.records.iter().map(|r| r.seq + 1).max().unwrap_or(0)
    }

    /// Completed patients, keyed by id, reconstructed from patient_result
    /// records.
    pub fn completed_patients(&self) -> BTreeMap<String, PatientResult> {
        let mut out = BTreeMap::new();
        for record in &self.records {
            if record.kind != RecordKind::PatientResult {
                continue;
            }
            if let Ok(result) = serde_json::from_value::<PatientResult>(record.payload.clone()) {
                out.insert(result.patient_id.clone(), result);
            }
        }
        out
    }
}

/// Normalize trace bytes for determinism comparison: timestamps and timing
/// payload fields are zeroed, everything else is preserved.
pub fn normalize_for_comparison(raw: &str) -> String {
    let mut out = String::new();
    for line in raw.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let Ok(mut value) = serde_json::from_str::<serde_json::Value>(line) else {
            out.push_str(line);
            out.push('\n');
            continue;
        };
        strip_timing(&mut value);
        out.push_str(&serde_json::to_string(&value).expect("value serializes"));
        out.push('\n');
    }
    out
}

fn strip_timing(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            for key in ["timestamp", "timing"] {
                if map.contains_key(key) {
                    map[key] = serde_json::Value::Null;
                }
            }
            for v in map.values_mut() {
                strip_timing(v);
            }
        }
        serde_json::Value::Array(items) => {
            for v in items {
                strip_timing(v);
            }
        }
        _ => {}
    }
}

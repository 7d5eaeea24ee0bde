//! JSON-lines transaction log.
//!
//! One self-contained JSON object per line, flushed as soon as it is
//! written, so a crash loses at most the record in flight. Every line
//! carries `schema_version`; readers reject versions they do not know.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::SizeClass;
use crate::multiaccess::Round;
use crate::scheduler::{LinkMetadata, RadioTech};
use crate::transport::{Protocol, Timestamp, TransactionRecord, TransactionStatus};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub schema_version: u32,
    pub run: String,
    pub round_index: u64,
    pub size_class: SizeClass,
    pub protocol: Protocol,
    pub link_id: String,
    pub txn_id: u64,
    /// Seconds since experiment start at which the round was due.
    pub scheduled_at: f64,
    pub start_mono: f64,
    pub start_wall_ms: i64,
    pub start_skew: f64,
    pub duration: f64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub bytes_sent: u64,
    pub bytes_acked: u64,
    pub rsrp: Option<f64>,
    pub rssi: Option<f64>,
    pub radio_tech: RadioTech,
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
    pub meta_sampled_at: f64,
}

impl LogRecord {
    pub fn from_leg(run: &str, size_class: SizeClass, round: &Round, rec: &TransactionRecord) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            run: run.to_string(),
            round_index: round.round_index,
            size_class,
            protocol: rec.protocol,
            link_id: rec.link_id.clone(),
            txn_id: rec.txn_id,
            scheduled_at: round.scheduled_at,
            start_mono: rec.start.mono,
            start_wall_ms: rec.start.wall_ms,
            start_skew: round.start_skew,
            duration: rec.duration,
            status: rec.status.code().to_string(),
            detail: rec.status.detail().map(str::to_owned),
            bytes_sent: rec.bytes_sent,
            bytes_acked: rec.bytes_acked,
            rsrp: rec.meta.rsrp,
            rssi: rec.meta.rssi,
            radio_tech: rec.meta.radio_tech,
            latitude: rec.meta.latitude,
            longitude: rec.meta.longitude,
            meta_sampled_at: rec.meta.sampled_at,
        }
    }

    pub fn status(&self) -> Result<TransactionStatus, String> {
        TransactionStatus::from_code(&self.status, self.detail.clone())
    }

    pub fn is_success(&self) -> bool {
        self.status == "SUCCESS"
    }

    pub fn to_transaction(&self) -> Result<TransactionRecord, String> {
        Ok(TransactionRecord {
            txn_id: self.txn_id,
            protocol: self.protocol,
            link_id: self.link_id.clone(),
            start: Timestamp { mono: self.start_mono, wall_ms: self.start_wall_ms },
            duration: self.duration,
            status: self.status()?,
            bytes_sent: self.bytes_sent,
            bytes_acked: self.bytes_acked,
            meta: LinkMetadata {
                link_id: self.link_id.clone(),
                rsrp: self.rsrp,
                rssi: self.rssi,
                radio_tech: self.radio_tech,
                latitude: self.latitude,
                longitude: self.longitude,
                sampled_at: self.meta_sampled_at,
            },
        })
    }
}

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("serializing record: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("{path} line {line}: schema version {version} is newer than supported version {SCHEMA_VERSION}")]
    UnsupportedVersion { path: PathBuf, line: usize, version: u64 },
}

/// Destination for records as they are produced.
pub trait RecordSink: Send + Sync {
    fn append(&self, record: &LogRecord) -> Result<(), PersistError>;
}

/// Appends records to a file, one JSON object per line.
pub struct JsonlSink {
    path: PathBuf,
    out: Mutex<BufWriter<File>>,
}

impl JsonlSink {
    /// Opens `path` for appending, creating it and its directory if needed.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, PersistError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| PersistError::Io { path: path.clone(), source };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        Ok(Self { out: Mutex::new(BufWriter::new(file)), path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl RecordSink for JsonlSink {
    fn append(&self, record: &LogRecord) -> Result<(), PersistError> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let mut out = self.out.lock().unwrap_or_else(|e| e.into_inner());
        out.write_all(&line)
            .and_then(|()| out.flush())
            .map_err(|source| PersistError::Io { path: self.path.clone(), source })
    }
}

/// Keeps records in memory; for tests and in-process analysis.
#[derive(Default)]
pub struct MemorySink {
    records: Mutex<Vec<LogRecord>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> Vec<LogRecord> {
        self.records.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl RecordSink for MemorySink {
    fn append(&self, record: &LogRecord) -> Result<(), PersistError> {
        self.records.lock().unwrap_or_else(|e| e.into_inner()).push(record.clone());
        Ok(())
    }
}

/// A line that could not be read.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Loaded {
    pub records: Vec<LogRecord>,
    pub skipped: Vec<Diagnostic>,
}

/// Reads a log file. Malformed lines are skipped and reported; a record
/// from a newer schema aborts the load.
pub fn load_records(path: impl AsRef<Path>) -> Result<Loaded, PersistError> {
    let path = path.as_ref();
    let io = |source| PersistError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut loaded = Loaded::default();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let mut skip = |message: String| loaded.skipped.push(Diagnostic { line: n, message });
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                skip(format!("not JSON: {e}"));
                continue;
            }
        };
        match value.get("schema_version").and_then(serde_json::Value::as_u64) {
            None => {
                skip("missing schema_version".into());
                continue;
            }
            Some(v) if v > SCHEMA_VERSION as u64 => {
                return Err(PersistError::UnsupportedVersion { path: path.to_path_buf(), line: n, version: v })
            }
            Some(_) => {}
        }
        match serde_json::from_value::<LogRecord>(value) {
            Ok(r) => match r.status() {
                Ok(_) => loaded.records.push(r),
                Err(e) => skip(e),
            },
            Err(e) => skip(e.to_string()),
        }
    }
    for d in &loaded.skipped {
        log::warn!("{}:{}: skipped: {}", path.display(), d.line, d.message);
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample(link: &str, round: u64) -> LogRecord {
        LogRecord {
            schema_version: SCHEMA_VERSION,
            run: "r".into(),
            round_index: round,
            size_class: SizeClass::Small,
            protocol: Protocol::Udp,
            link_id: link.into(),
            txn_id: round,
            scheduled_at: 10.0,
            start_mono: 10.0,
            start_wall_ms: 1_000,
            start_skew: 0.0,
            duration: 0.123,
            status: "SUCCESS".into(),
            detail: None,
            bytes_sent: 5600,
            bytes_acked: 5600,
            rsrp: Some(-97.0),
            rssi: None,
            radio_tech: RadioTech::Lte,
            latitude: None,
            longitude: None,
            meta_sampled_at: 10.0,
        }
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/log.jsonl");
        let sink = JsonlSink::open(&path).unwrap();
        let a = sample("a", 0);
        let mut b = sample("b", 0);
        b.status = "ERROR".into();
        b.detail = Some("handshake".into());
        sink.append(&a).unwrap();
        sink.append(&b).unwrap();
        let loaded = load_records(&path).unwrap();
        assert_eq!(loaded.records, vec![a, b.clone()]);
        assert_eq!(loaded.records[1].status().unwrap(), TransactionStatus::Error("handshake".into()));
    }

    #[test]
    fn malformed_lines_are_skipped_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let good = serde_json::to_string(&sample("a", 1)).unwrap();
        let bad_status = good.replace("SUCCESS", "WEIRD");
        let text = format!("{good}\n{{oops\n\n{{\"run\":\"x\"}}\n{bad_status}\n{good}\n");
        std::fs::write(&path, text).unwrap();
        let loaded = load_records(&path).unwrap();
        assert_eq!(loaded.records.len(), 2);
        let lines: Vec<usize> = loaded.skipped.iter().map(|d| d.line).collect();
        assert_eq!(lines, vec![2, 4, 5]);
    }

    #[test]
    fn newer_schema_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut r = serde_json::to_value(sample("a", 1)).unwrap();
        r["schema_version"] = 2.into();
        std::fs::write(&path, format!("{r}\n")).unwrap();
        assert!(matches!(load_records(&path), Err(PersistError::UnsupportedVersion { line: 1, version: 2, .. })));
        assert!(matches!(load_records(dir.path().join("missing")), Err(PersistError::Io { .. })));
    }

    #[test]
    fn converts_back_to_transaction() {
        let t = sample("a", 3).to_transaction().unwrap();
        assert_eq!(t.link_id, "a");
        assert_eq!(t.meta.rsrp, Some(-97.0));
        assert!(t.is_success());
    }
}

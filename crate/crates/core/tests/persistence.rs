use std::io::Write;
use std::sync::Arc;

use mabench::message::SizeClass;
use mabench::persistence::{load_records, JsonlSink, LogRecord, PersistError, RecordSink, SCHEMA_VERSION};
use mabench::scheduler::RadioTech;
use mabench::transport::Protocol;
use proptest::prelude::*;

fn record(i: u64) -> LogRecord {
    LogRecord {
        schema_version: SCHEMA_VERSION,
        run: "p".into(),
        round_index: i,
        size_class: SizeClass::Small,
        protocol: Protocol::Tcp,
        link_id: format!("op{}", i % 3),
        txn_id: i,
        scheduled_at: i as f64 * 30.0,
        start_mono: i as f64 * 30.0 + 20.0,
        start_wall_ms: 1_577_836_800_000 + i as i64,
        start_skew: 0.0,
        duration: 0.25,
        status: "SUCCESS".into(),
        detail: None,
        bytes_sent: 5600,
        bytes_acked: 5600,
        rsrp: Some(-95.0),
        rssi: None,
        radio_tech: RadioTech::Lte,
        latitude: Some(59.3),
        longitude: Some(18.1),
        meta_sampled_at: 0.0,
    }
}

#[test]
fn concurrent_appends_are_not_interleaved() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/log.jsonl");
    let sink = Arc::new(JsonlSink::open(&path).unwrap());
    let threads: Vec<_> = (0..8)
        .map(|t| {
            let sink = sink.clone();
            std::thread::spawn(move || {
                for i in 0..125 {
                    sink.append(&record(t * 1000 + i)).unwrap();
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    let loaded = load_records(&path).unwrap();
    assert!(loaded.skipped.is_empty());
    assert_eq!(loaded.records.len(), 1000);
    let mut ids: Vec<u64> = loaded.records.iter().map(|r| r.txn_id).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 1000);
}

#[test]
fn reopening_appends() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    JsonlSink::open(&path).unwrap().append(&record(1)).unwrap();
    JsonlSink::open(&path).unwrap().append(&record(2)).unwrap();
    let loaded = load_records(&path).unwrap();
    assert_eq!(loaded.records, vec![record(1), record(2)]);
}

#[test]
fn malformed_lines_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "{}", serde_json::to_string(&record(1)).unwrap()).unwrap();
    writeln!(f, "{{\"truncated\": ").unwrap();
    writeln!(f).unwrap();
    writeln!(f, "{{\"schema_version\": 1, \"run\": \"x\"}}").unwrap();
    writeln!(f, "{}", serde_json::to_string(&record(2)).unwrap()).unwrap();
    drop(f);
    let loaded = load_records(&path).unwrap();
    assert_eq!(loaded.records.len(), 2);
    assert_eq!(loaded.skipped.iter().map(|d| d.line).collect::<Vec<_>>(), vec![2, 4]);
}

#[test]
fn newer_schema_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    let mut r = serde_json::to_value(record(1)).unwrap();
    r["schema_version"] = (SCHEMA_VERSION + 1).into();
    std::fs::write(&path, format!("{r}\n")).unwrap();
    assert!(matches!(load_records(&path), Err(PersistError::UnsupportedVersion { line: 1, .. })));
}

#[test]
fn missing_file_is_an_error() {
    assert!(matches!(load_records("/nonexistent/log.jsonl"), Err(PersistError::Io { .. })));
}

fn arb_record() -> impl Strategy<Value = LogRecord> {
    (
        any::<u64>(),
        prop_oneof![Just(Protocol::Udp), Just(Protocol::Tcp), Just(Protocol::Secure)],
        "[a-z0-9_-]{1,8}",
        0.0f64..6.0,
        prop_oneof![Just("SUCCESS"), Just("CLIENT_TIMEOUT"), Just("BYTE_MISMATCH"), Just("LINK_DOWN")],
        proptest::option::of(-140.0f64..-44.0),
        proptest::option::of("[ -~]{0,20}"),
        any::<i64>(),
    )
        .prop_map(|(txn, protocol, link, duration, status, rsrp, detail, wall)| LogRecord {
            txn_id: txn,
            protocol,
            link_id: link,
            duration,
            status: status.into(),
            rsrp,
            detail,
            start_wall_ms: wall,
            ..record(0)
        })
}

proptest! {
    #[test]
    fn records_round_trip(recs in proptest::collection::vec(arb_record(), 0..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let sink = JsonlSink::open(&path).unwrap();
        for r in &recs {
            sink.append(r).unwrap();
        }
        let loaded = load_records(&path).unwrap();
        prop_assert!(loaded.skipped.is_empty());
        prop_assert_eq!(loaded.records, recs);
    }
}

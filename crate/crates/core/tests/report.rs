use std::collections::BTreeMap;
use std::path::Path;

use mabench::analysis::{write_report, ReportOptions};
use mabench::persistence::{LogRecord, MemorySink};
use mabench::scheduler::{run_experiment, ExperimentConfig, LinkConfig, SkewInjection};
use rand::seq::SliceRandom;
use rand::SeedableRng;

fn files(dir: &Path) -> BTreeMap<String, String> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read_to_string(e.path()).unwrap())
        })
        .collect()
}

fn campaign() -> Vec<LogRecord> {
    let mut cfg = ExperimentConfig { run_id: "r".into(), seed: 3, run_duration: 900.0, ..Default::default() };
    cfg.skew_injection = Some(SkewInjection { fraction: 0.2, skew: 0.05 });
    cfg.links = ["a", "b"]
        .iter()
        .map(|id| LinkConfig {
            id: id.to_string(),
            bind: None,
            metadata_file: None,
            profile: None,
            profile_file: None,
            fit: None,
            rsrp: None,
        })
        .collect();
    let mut links = cfg.emulated_links().unwrap();
    let sink = MemorySink::new();
    run_experiment(&mut links, &cfg, &sink).unwrap();
    sink.records()
}

#[test]
fn empty_log_gives_header_only_tables() {
    let dir = tempfile::tempdir().unwrap();
    let s = write_report(&[], dir.path(), &ReportOptions::default()).unwrap();
    assert_eq!((s.rounds, s.rounds_kept), (0, 0));
    let out = files(dir.path());
    assert_eq!(out["summary_small.csv"].lines().count(), 1);
    assert_eq!(out["spearman_small.csv"].lines().count(), 1);
    assert_eq!(out["availability_table_small.csv"].lines().next(), Some("time_limit"));
}

#[test]
fn report_ignores_record_order() {
    let records = campaign();
    let mut shuffled = records.clone();
    shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_report(&records, a.path(), &ReportOptions::default()).unwrap();
    write_report(&shuffled, b.path(), &ReportOptions::default()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn report_layout() {
    let records = campaign();
    let dir = tempfile::tempdir().unwrap();
    let s = write_report(&records, dir.path(), &ReportOptions::default()).unwrap();
    assert_eq!(s.rounds, 90);
    assert_eq!(s.rounds_kept, 72);
    let out = files(dir.path());
    // Per protocol: two links, pooled and multi-access.
    assert_eq!(out["summary_small.csv"].lines().count(), 1 + 3 * 4);
    assert_eq!(out["availability_small.csv"].lines().count(), 1 + 3 * 4 * 3);
    assert_eq!(
        out["availability_table_small.csv"].lines().next().unwrap(),
        "time_limit,UDP_single,UDP_MA,TCP_single,TCP_MA,SECURE_single,SECURE_MA"
    );
    assert!(out.contains_key("ecdf_small_UDP_MA.csv"));
    assert!(out.contains_key("ecdf_small_TCP_all.csv"));
    assert!(out.contains_key("ecdf_small_SECURE_link-a.csv"));
    // Fixed-delay links all succeed within a second.
    for line in out["availability_small.csv"].lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[2] != "0.2" {
            assert_eq!(f[3], "1", "{line}");
        }
    }
}

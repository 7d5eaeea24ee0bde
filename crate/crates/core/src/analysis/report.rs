//! Table and ECDF files.
//!
//! Per size class `<size>` the report directory receives:
//!
//! * `summary_<size>.csv`: protocol, mode, attempted, successful,
//!   success_rate, mean, stddev, median, min, q90, max.
//! * `availability_<size>.csv`: protocol, mode, time_limit, rate, within,
//!   attempted.
//! * `availability_table_<size>.csv`: one row per time limit, one column per
//!   protocol for pooled single links and for multi-access.
//! * `spearman_<size>.csv`: protocol, mode, n, rho.
//! * `ecdf_<size>_<protocol>_<mode>.csv`: duration, fraction.
//!
//! Absent values are empty fields. Numbers use the shortest representation
//! that round-trips, so output depends only on the input log.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{
    availability_cell, derive_multiaccess, ecdf, filter_synchronized, group_rounds, spearman_rsrp, summarize, Mode,
    DEFAULT_MAX_SKEW, TIME_LIMITS,
};
use crate::message::SizeClass;
use crate::persistence::LogRecord;
use crate::transport::Protocol;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub max_skew: f64,
    pub client_timeout: f64,
    pub time_limits: Vec<f64>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { max_skew: DEFAULT_MAX_SKEW, client_timeout: 6.0, time_limits: TIME_LIMITS.to_vec() }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportSummary {
    pub rounds: usize,
    pub rounds_kept: usize,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn num(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

struct Partition {
    protocol: Protocol,
    mode: Mode,
    records: Vec<LogRecord>,
}

/// Single-link records of kept rounds, pooled and per link, plus derived
/// multi-access records; ordered by protocol, then link id, pooled, MA.
fn partitions(records: &[LogRecord], opts: &ReportOptions) -> (usize, usize, BTreeMap<SizeClass, Vec<Partition>>) {
    let rounds = group_rounds(records);
    let total = rounds.len();
    let kept = filter_synchronized(rounds, opts.max_skew);
    let n_kept = kept.len();
    let mut by_size: BTreeMap<SizeClass, Vec<Partition>> = BTreeMap::new();
    for size in kept.iter().map(|r| r.size_class).collect::<std::collections::BTreeSet<_>>() {
        let mut parts = Vec::new();
        for protocol in Protocol::ALL {
            let rounds: Vec<_> = kept.iter().filter(|r| r.size_class == size && r.protocol == protocol).cloned().collect();
            if rounds.is_empty() {
                continue;
            }
            let legs: Vec<LogRecord> = rounds.iter().flat_map(|r| r.legs.iter().cloned()).collect();
            let mut per_link: BTreeMap<String, Vec<LogRecord>> = BTreeMap::new();
            for l in &legs {
                per_link.entry(l.link_id.clone()).or_default().push(l.clone());
            }
            for (id, recs) in per_link {
                parts.push(Partition { protocol, mode: Mode::Link(id), records: recs });
            }
            parts.push(Partition { protocol, mode: Mode::AllLinks, records: legs });
            parts.push(Partition {
                protocol,
                mode: Mode::MultiAccess,
                records: derive_multiaccess(&rounds, opts.client_timeout),
            });
        }
        by_size.insert(size, parts);
    }
    (total, n_kept, by_size)
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>, ReportError> {
    let f = fs::File::create(path).map_err(|source| ReportError::Io { path: path.into(), source })?;
    Ok(csv::Writer::from_writer(f))
}

/// Writes the report for `records` into `dir`. An empty log produces
/// header-only tables for the small size class.
pub fn write_report(records: &[LogRecord], dir: &Path, opts: &ReportOptions) -> Result<ReportSummary, ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io { path: dir.into(), source })?;
    let (rounds, rounds_kept, mut by_size) = partitions(records, opts);
    if by_size.is_empty() {
        log::warn!("no analyzable rounds; writing empty tables");
        by_size.insert(SizeClass::Small, Vec::new());
    }
    let mut files = Vec::new();
    for (size, parts) in &by_size {
        let s = size.as_str();

        let path = dir.join(format!("summary_{s}.csv"));
        let mut w = writer(&path)?;
        w.write_record(["protocol", "mode", "attempted", "successful", "success_rate", "mean", "stddev", "median", "min", "q90", "max"])?;
        for p in parts {
            let m = summarize(p.protocol, p.mode.clone(), &p.records);
            let st = m.stats;
            w.write_record([
                p.protocol.to_string(),
                p.mode.to_string(),
                m.attempted.to_string(),
                m.successful.to_string(),
                num(m.success_rate()),
                num(st.map(|x| x.mean)),
                num(st.and_then(|x| x.std_dev)),
                num(st.map(|x| x.median)),
                num(st.map(|x| x.min)),
                num(st.map(|x| x.q90)),
                num(st.map(|x| x.max)),
            ])?;
        }
        w.flush().map_err(|source| ReportError::Io { path: path.clone(), source })?;
        files.push(path);

        let path = dir.join(format!("availability_{s}.csv"));
        let mut w = writer(&path)?;
        w.write_record(["protocol", "mode", "time_limit", "rate", "within", "attempted"])?;
        for p in parts {
            for &limit in &opts.time_limits {
                let c = availability_cell(p.protocol, p.mode.clone(), &p.records, limit);
                w.write_record([
                    p.protocol.to_string(),
                    p.mode.to_string(),
                    limit.to_string(),
                    c.rate.to_string(),
                    c.within.to_string(),
                    c.attempted.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|source| ReportError::Io { path: path.clone(), source })?;
        files.push(path);

        let path = dir.join(format!("availability_table_{s}.csv"));
        let mut w = writer(&path)?;
        let pooled: Vec<&Partition> = parts.iter().filter(|p| matches!(p.mode, Mode::AllLinks | Mode::MultiAccess)).collect();
        let mut header = vec!["time_limit".to_string()];
        header.extend(pooled.iter().map(|p| format!("{}_{}", p.protocol, if p.mode == Mode::MultiAccess { "MA" } else { "single" })));
        w.write_record(&header)?;
        for &limit in &opts.time_limits {
            let mut row = vec![limit.to_string()];
            row.extend(pooled.iter().map(|p| availability_cell(p.protocol, p.mode.clone(), &p.records, limit).rate.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|source| ReportError::Io { path: path.clone(), source })?;
        files.push(path);

        let path = dir.join(format!("spearman_{s}.csv"));
        let mut w = writer(&path)?;
        w.write_record(["protocol", "mode", "n", "rho"])?;
        for p in parts.iter().filter(|p| p.mode != Mode::MultiAccess) {
            let n = p.records.iter().filter(|r| r.rsrp.is_some()).count();
            let rho = spearman_rsrp(&p.records, opts.client_timeout).ok();
            w.write_record([p.protocol.to_string(), p.mode.to_string(), n.to_string(), num(rho)])?;
        }
        w.flush().map_err(|source| ReportError::Io { path: path.clone(), source })?;
        files.push(path);

        for p in parts {
            let path = dir.join(format!("ecdf_{s}_{}_{}.csv", p.protocol, p.mode.tag()));
            let mut w = writer(&path)?;
            w.write_record(["duration", "fraction"])?;
            for (x, f) in ecdf(&p.records) {
                w.write_record([x.to_string(), f.to_string()])?;
            }
            w.flush().map_err(|source| ReportError::Io { path: path.clone(), source })?;
            files.push(path);
        }
    }
    Ok(ReportSummary { rounds, rounds_kept, files })
}

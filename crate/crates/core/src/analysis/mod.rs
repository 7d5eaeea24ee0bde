//! Post-processing of transaction logs.
//!
//! Rounds whose legs did not start together are dropped, the multi-access
//! outcome of each remaining round is derived from its legs, and durations
//! are summarized per protocol and mode. Duration statistics use successful
//! transactions only; availability counts every attempt.

use std::collections::BTreeMap;
use std::fmt;

use crate::message::SizeClass;
use crate::multiaccess::{best_of, MA_LINK_ID};
use crate::persistence::LogRecord;
use crate::transport::{Protocol, TransactionRecord};

pub mod report;
pub mod stats;

pub use report::{write_report, ReportOptions, ReportSummary};
pub use stats::CorrelationError;

/// Rounds whose legs started further apart than this are discarded.
pub const DEFAULT_MAX_SKEW: f64 = 0.010;
/// Deadlines of the availability tables, longest first.
pub const TIME_LIMITS: [f64; 3] = [6.0, 1.0, 0.2];

/// Anything with a duration and an outcome.
pub trait Observation {
    fn duration(&self) -> f64;
    fn succeeded(&self) -> bool;
    fn rsrp(&self) -> Option<f64>;
}

impl Observation for LogRecord {
    fn duration(&self) -> f64 {
        self.duration
    }
    fn succeeded(&self) -> bool {
        self.is_success()
    }
    fn rsrp(&self) -> Option<f64> {
        self.rsrp
    }
}

impl Observation for TransactionRecord {
    fn duration(&self) -> f64 {
        self.duration
    }
    fn succeeded(&self) -> bool {
        self.is_success()
    }
    fn rsrp(&self) -> Option<f64> {
        self.meta.rsrp
    }
}

impl<T: Observation> Observation for &T {
    fn duration(&self) -> f64 {
        (**self).duration()
    }
    fn succeeded(&self) -> bool {
        (**self).succeeded()
    }
    fn rsrp(&self) -> Option<f64> {
        (**self).rsrp()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    /// One link.
    Link(String),
    /// Every single-link record pooled.
    AllLinks,
    /// Best leg per round.
    MultiAccess,
}

impl Mode {
    pub fn of_record(link_id: &str) -> Self {
        if link_id == MA_LINK_ID {
            Mode::MultiAccess
        } else {
            Mode::Link(link_id.to_string())
        }
    }

    /// Name safe for file names.
    pub fn tag(&self) -> String {
        match self {
            Mode::Link(id) => format!("link-{id}"),
            Mode::AllLinks => "all".into(),
            Mode::MultiAccess => MA_LINK_ID.into(),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Link(id) => write!(f, "link:{id}"),
            Mode::AllLinks => f.write_str("all"),
            Mode::MultiAccess => f.write_str(MA_LINK_ID),
        }
    }
}

/// Duration statistics over successful transactions, seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DurationStats {
    pub mean: f64,
    /// Absent with a single success.
    pub std_dev: Option<f64>,
    pub median: f64,
    pub min: f64,
    pub q90: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub protocol: Protocol,
    pub mode: Mode,
    pub attempted: usize,
    pub successful: usize,
    /// Absent when nothing succeeded.
    pub stats: Option<DurationStats>,
}

impl MetricsSummary {
    pub fn success_rate(&self) -> Option<f64> {
        (self.attempted > 0).then(|| self.successful as f64 / self.attempted as f64)
    }
}

fn successful_sorted<T: Observation>(records: &[T]) -> Vec<f64> {
    let mut d: Vec<f64> = records.iter().filter(|r| r.succeeded()).map(|r| r.duration()).collect();
    d.sort_by(f64::total_cmp);
    d
}

pub fn summarize<T: Observation>(protocol: Protocol, mode: Mode, records: &[T]) -> MetricsSummary {
    let d = successful_sorted(records);
    let stats = (!d.is_empty()).then(|| DurationStats {
        mean: stats::mean(&d).expect("non-empty"),
        std_dev: stats::std_dev(&d),
        median: stats::quantile(&d, 0.5).expect("non-empty"),
        min: d[0],
        q90: stats::quantile(&d, 0.9).expect("non-empty"),
        max: d[d.len() - 1],
    });
    MetricsSummary { protocol, mode, attempted: records.len(), successful: d.len(), stats }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AvailabilityCell {
    pub protocol: Protocol,
    pub mode: Mode,
    pub time_limit: f64,
    pub rate: f64,
    pub within: usize,
    pub attempted: usize,
}

/// Fraction of attempts that succeeded within `time_limit`; zero for no attempts.
pub fn availability<T: Observation>(records: &[T], time_limit: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let ok = records.iter().filter(|r| r.succeeded() && r.duration() <= time_limit).count();
    ok as f64 / records.len() as f64
}

pub fn availability_cell<T: Observation>(protocol: Protocol, mode: Mode, records: &[T], time_limit: f64) -> AvailabilityCell {
    let within = records.iter().filter(|r| r.succeeded() && r.duration() <= time_limit).count();
    AvailabilityCell { protocol, mode, time_limit, rate: availability(records, time_limit), within, attempted: records.len() }
}

/// Step points `(duration, fraction)` of the ECDF of successful durations.
/// One point per distinct duration, the fraction counting ties.
pub fn ecdf<T: Observation>(records: &[T]) -> Vec<(f64, f64)> {
    let d = successful_sorted(records);
    let n = d.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in d.iter().enumerate() {
        let f = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = f,
            _ => out.push((*x, f)),
        }
    }
    out
}

/// Spearman correlation between RSRP and duration. Failed transactions
/// count at `client_timeout`; records without RSRP are left out.
pub fn spearman_rsrp<T: Observation>(records: &[T], client_timeout: f64) -> Result<f64, CorrelationError> {
    let (rsrp, dur): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter_map(|r| {
            let d = if r.succeeded() { r.duration() } else { client_timeout };
            r.rsrp().map(|s| (s, d))
        })
        .unzip();
    stats::spearman(&rsrp, &dur)
}

/// All legs of one protocol in one scheduling round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundGroup {
    pub run: String,
    pub size_class: SizeClass,
    pub protocol: Protocol,
    pub round_index: u64,
    pub start_skew: f64,
    pub legs: Vec<LogRecord>,
}

/// Groups single-link records into rounds, ordered by run, size, protocol
/// and round index; legs are ordered by link id.
pub fn group_rounds(records: &[LogRecord]) -> Vec<RoundGroup> {
    let mut map: BTreeMap<(String, SizeClass, Protocol, u64), Vec<LogRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.link_id != MA_LINK_ID) {
        map.entry((r.run.clone(), r.size_class, r.protocol, r.round_index)).or_default().push(r.clone());
    }
    map.into_iter()
        .map(|((run, size_class, protocol, round_index), mut legs)| {
            legs.sort_by(|a, b| a.link_id.cmp(&b.link_id));
            let lo = legs.iter().map(|l| l.start_mono).fold(f64::INFINITY, f64::min);
            let hi = legs.iter().map(|l| l.start_mono).fold(f64::NEG_INFINITY, f64::max);
            let recorded = legs.iter().map(|l| l.start_skew).fold(0.0, f64::max);
            RoundGroup { run, size_class, protocol, round_index, start_skew: recorded.max(hi - lo), legs }
        })
        .collect()
}

/// Keeps the rounds whose start skew is at most `max_skew`.
pub fn filter_synchronized(rounds: Vec<RoundGroup>, max_skew: f64) -> Vec<RoundGroup> {
    rounds.into_iter().filter(|r| r.start_skew <= max_skew).collect()
}

/// One multi-access record per round.
pub fn derive_multiaccess(rounds: &[RoundGroup], client_timeout: f64) -> Vec<LogRecord> {
    rounds
        .iter()
        .filter_map(|round| {
            let legs: Vec<TransactionRecord> = round.legs.iter().filter_map(|l| l.to_transaction().ok()).collect();
            let best = best_of(&legs, client_timeout)?;
            let template = &round.legs[0];
            Some(LogRecord {
                link_id: best.link_id,
                txn_id: best.txn_id,
                start_mono: best.start.mono,
                start_wall_ms: best.start.wall_ms,
                start_skew: round.start_skew,
                duration: best.duration,
                status: best.status.code().to_string(),
                detail: best.status.detail().map(str::to_owned),
                bytes_sent: best.bytes_sent,
                bytes_acked: best.bytes_acked,
                rsrp: best.meta.rsrp,
                rssi: best.meta.rssi,
                radio_tech: best.meta.radio_tech,
                latitude: best.meta.latitude,
                longitude: best.meta.longitude,
                meta_sampled_at: best.meta.sampled_at,
                ..template.clone()
            })
        })
        .collect()
}

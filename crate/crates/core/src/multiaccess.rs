//! Concurrent use of several links for one upload.
//!
//! A round sends the same message over every link at once. The round's
//! multi-access outcome is its fastest successful leg; the first reply
//! wins and the others are ignored.

use crate::message::WarningMessage;
use crate::scheduler::LinkMetadata;
use crate::transport::{Leg, LinkSet, Protocol, TransactionRecord, TransactionStatus, TransportConfig};

/// Link id carried by derived multi-access records.
pub const MA_LINK_ID: &str = "MA";

/// All legs of one protocol within one scheduling round.
#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub round_index: u64,
    pub protocol: Protocol,
    /// Seconds since experiment start at which the round was due.
    pub scheduled_at: f64,
    pub legs: Vec<TransactionRecord>,
    /// Spread between the earliest and the latest leg start.
    pub start_skew: f64,
}

/// Launches one leg per entry of `legs`, all at the same instant.
pub fn run_round<L: LinkSet + ?Sized>(
    links: &mut L,
    protocol: Protocol,
    msg: &WarningMessage,
    cfg: &TransportConfig,
    legs: &[Leg],
    round_index: u64,
    scheduled_at: f64,
) -> Round {
    let records = links.execute(protocol, msg, cfg, legs);
    Round { round_index, protocol, scheduled_at, start_skew: start_skew(&records), legs: records }
}

pub fn start_skew(legs: &[TransactionRecord]) -> f64 {
    let starts = legs.iter().map(|r| r.start.mono);
    let (lo, hi) = starts.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)));
    if legs.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// The multi-access view of a round: the shortest successful leg relabelled
/// as [`MA_LINK_ID`], ties broken by the lowest link id. When every leg
/// failed, a failed record with the client timeout as duration carrying the
/// status of the lowest-id leg.
pub fn best_of(legs: &[TransactionRecord], client_timeout: f64) -> Option<TransactionRecord> {
    let by_id = |a: &&TransactionRecord, b: &&TransactionRecord| a.link_id.cmp(&b.link_id);
    let winner = legs
        .iter()
        .filter(|r| r.is_success())
        .min_by(|a, b| a.duration.total_cmp(&b.duration).then_with(|| by_id(a, b)));
    let mut out = match winner {
        Some(w) => w.clone(),
        None => {
            let first = legs.iter().min_by(by_id)?;
            let status = match &first.status {
                TransactionStatus::Success => unreachable!("no successful leg"),
                s => s.clone(),
            };
            TransactionRecord {
                duration: client_timeout,
                status,
                bytes_acked: 0,
                meta: LinkMetadata::unavailable(MA_LINK_ID, first.meta.sampled_at),
                ..first.clone()
            }
        }
    };
    out.link_id = MA_LINK_ID.to_string();
    out.start.mono = legs.iter().map(|r| r.start.mono).fold(f64::INFINITY, f64::min);
    out.start.wall_ms = legs.iter().map(|r| r.start.wall_ms).min().unwrap_or(out.start.wall_ms);
    Some(out)
}

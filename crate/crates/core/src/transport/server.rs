//! Server-side transaction bookkeeping, independent of any I/O.
//!
//! The real socket server and the emulated server both drive these types:
//! feed received bytes with a timestamp, reply when the declared size is
//! reached, and reply prematurely once a transaction has been silent for the
//! stall timeout while still expecting data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::wire::{handshake, DatagramHeader, Reply, StreamPreamble, WireError, STREAM_PREAMBLE_LEN};
use super::Protocol;

/// One line of the server-side transaction log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerLogEntry {
    pub protocol: Protocol,
    pub txn_id: Option<u64>,
    pub peer: String,
    pub expected: u64,
    pub received: u64,
    pub first_rx: f64,
    pub last_rx: f64,
    pub replied_at: Option<f64>,
    pub premature: bool,
    pub malformed: Option<String>,
}

impl ServerLogEntry {
    pub fn malformed(protocol: Protocol, peer: String, at: f64, reason: impl Into<String>) -> Self {
        Self {
            protocol,
            txn_id: None,
            peer,
            expected: 0,
            received: 0,
            first_rx: at,
            last_rx: at,
            replied_at: None,
            premature: false,
            malformed: Some(reason.into()),
        }
    }
}

/// A reply the I/O layer must send to `peer`.
#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing<P> {
    pub peer: P,
    pub reply: Reply,
    pub log: ServerLogEntry,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ingest<P> {
    /// More data expected.
    Pending,
    /// Transaction complete; send the reply.
    Complete(Outgoing<P>),
    /// Repeated sequence number or data for an already answered transaction.
    Ignored,
    Malformed(ServerLogEntry),
}

#[derive(Debug, Clone)]
struct UdpSession<P> {
    peer: P,
    total: u32,
    seen: Vec<bool>,
    received: u64,
    first_rx: f64,
    last_rx: f64,
}

/// Reassembly of UDP transactions keyed by transaction id.
#[derive(Debug, Clone)]
pub struct UdpIntake<P> {
    stall_timeout: f64,
    sessions: BTreeMap<u64, UdpSession<P>>,
    answered: BTreeMap<u64, f64>,
}

/// How long an answered transaction id is remembered to swallow stragglers.
const ANSWERED_MEMORY: f64 = 60.0;
/// Absorbs float rounding when a caller polls exactly at a deadline.
const STALL_SLACK: f64 = 1e-9;

impl<P: Clone + ToString> UdpIntake<P> {
    pub fn new(stall_timeout: f64) -> Self {
        Self { stall_timeout, sessions: BTreeMap::new(), answered: BTreeMap::new() }
    }

    pub fn active(&self) -> usize {
        self.sessions.len()
    }

    pub fn on_datagram(&mut self, now: f64, peer: P, datagram: &[u8]) -> Ingest<P> {
        match DatagramHeader::decode(datagram) {
            Ok((header, payload)) => self.on_parts(now, peer, header, payload.len()),
            Err(e) => Ingest::Malformed(ServerLogEntry::malformed(Protocol::Udp, peer.to_string(), now, e.to_string())),
        }
    }

    /// Same as [`Self::on_datagram`] for a header decoded from `header` and a
    /// payload known only by its length.
    pub fn on_header(&mut self, now: f64, peer: P, header: &[u8], payload_len: usize) -> Ingest<P> {
        match DatagramHeader::decode(header) {
            Ok((h, _)) => self.on_parts(now, peer, h, payload_len),
            Err(e) => Ingest::Malformed(ServerLogEntry::malformed(Protocol::Udp, peer.to_string(), now, e.to_string())),
        }
    }

    fn on_parts(&mut self, now: f64, peer: P, header: DatagramHeader, payload_len: usize) -> Ingest<P> {
        if self.answered.contains_key(&header.txn_id) {
            return Ingest::Ignored;
        }
        if payload_len == 0 || header.seq as u64 * payload_len as u64 >= header.total_size as u64 {
            let err = WireError::SequenceOutOfRange { seq: header.seq, total: header.total_size };
            return Ingest::Malformed(ServerLogEntry::malformed(
                Protocol::Udp,
                peer.to_string(),
                now,
                err.to_string(),
            ));
        }
        let session = self.sessions.entry(header.txn_id).or_insert_with(|| UdpSession {
            peer: peer.clone(),
            total: header.total_size,
            seen: Vec::new(),
            received: 0,
            first_rx: now,
            last_rx: now,
        });
        if session.total != header.total_size {
            return Ingest::Malformed(ServerLogEntry::malformed(
                Protocol::Udp,
                peer.to_string(),
                now,
                format!(
                    "total size changed from {} to {} within transaction {}",
                    session.total, header.total_size, header.txn_id
                ),
            ));
        }
        let seq = header.seq as usize;
        if session.seen.len() <= seq {
            session.seen.resize(seq + 1, false);
        }
        if session.seen[seq] {
            return Ingest::Ignored;
        }
        session.seen[seq] = true;
        session.received += payload_len as u64;
        session.last_rx = now;
        if session.received >= session.total as u64 {
            let session = self.sessions.remove(&header.txn_id).expect("session present");
            self.answered.insert(header.txn_id, now);
            return Ingest::Complete(finish(header.txn_id, session, now, false));
        }
        Ingest::Pending
    }

    /// Replies prematurely to every transaction silent for the stall timeout.
    pub fn poll_stalled(&mut self, now: f64) -> Vec<Outgoing<P>> {
        let stalled: Vec<u64> = self
            .sessions
            .iter()
            .filter(|(_, s)| now - s.last_rx >= self.stall_timeout - STALL_SLACK)
            .map(|(id, _)| *id)
            .collect();
        let mut out = Vec::with_capacity(stalled.len());
        for id in stalled {
            let session = self.sessions.remove(&id).expect("session present");
            self.answered.insert(id, now);
            out.push(finish(id, session, now, true));
        }
        self.answered.retain(|_, at| now - *at < ANSWERED_MEMORY);
        out
    }

    pub fn next_deadline(&self) -> Option<f64> {
        self.sessions
            .values()
            .map(|s| s.last_rx + self.stall_timeout)
            .min_by(f64::total_cmp)
    }
}

fn finish<P: ToString>(txn_id: u64, s: UdpSession<P>, now: f64, premature: bool) -> Outgoing<P> {
    let log = ServerLogEntry {
        protocol: Protocol::Udp,
        txn_id: Some(txn_id),
        peer: s.peer.to_string(),
        expected: s.total as u64,
        received: s.received,
        first_rx: s.first_rx,
        last_rx: s.last_rx,
        replied_at: Some(now),
        premature,
        malformed: None,
    };
    Outgoing { peer: s.peer, reply: Reply { txn_id, received: s.received }, log }
}

/// Application-level state of one stream transaction: preamble then message.
#[derive(Debug, Clone, Default)]
pub struct StreamIntake {
    header: Vec<u8>,
    preamble: Option<StreamPreamble>,
    received: u64,
    first_rx: Option<f64>,
    last_rx: f64,
    done: bool,
}

impl StreamIntake {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn preamble(&self) -> Option<StreamPreamble> {
        self.preamble
    }

    pub fn received(&self) -> u64 {
        self.received
    }

    pub fn last_rx(&self) -> f64 {
        self.last_rx
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Feeds in-order stream bytes. Returns the reply once the declared
    /// size has arrived; bytes past the declared size are ignored.
    pub fn push(&mut self, now: f64, mut bytes: &[u8]) -> Result<Option<Reply>, WireError> {
        if self.done || bytes.is_empty() {
            return Ok(None);
        }
        self.first_rx.get_or_insert(now);
        self.last_rx = now;
        if self.preamble.is_none() {
            let want = STREAM_PREAMBLE_LEN - self.header.len();
            let take = want.min(bytes.len());
            self.header.extend_from_slice(&bytes[..take]);
            bytes = &bytes[take..];
            if self.header.len() < STREAM_PREAMBLE_LEN {
                return Ok(None);
            }
            self.preamble = Some(StreamPreamble::decode(&self.header)?);
        }
        let p = self.preamble.expect("preamble decoded");
        let room = p.total_size as u64 - self.received;
        self.received += (bytes.len() as u64).min(room);
        if self.received == p.total_size as u64 {
            self.done = true;
            return Ok(Some(Reply { txn_id: p.txn_id, received: self.received }));
        }
        Ok(None)
    }

    /// Reply to send after a stall; `None` if the preamble never arrived.
    pub fn premature_reply(&mut self) -> Option<Reply> {
        if self.done {
            return None;
        }
        let p = self.preamble?;
        self.done = true;
        Some(Reply { txn_id: p.txn_id, received: self.received })
    }

    pub fn log_entry(&self, protocol: Protocol, peer: String, replied_at: Option<f64>, premature: bool) -> ServerLogEntry {
        ServerLogEntry {
            protocol,
            txn_id: self.preamble.map(|p| p.txn_id),
            peer,
            expected: self.preamble.map_or(0, |p| p.total_size as u64),
            received: self.received,
            first_rx: self.first_rx.unwrap_or(self.last_rx),
            last_rx: self.last_rx,
            replied_at,
            premature,
            malformed: None,
        }
    }
}

/// Server half of the dummy secure handshake.
#[derive(Debug, Clone, Default)]
pub struct HandshakeResponder {
    round: usize,
    buf: Vec<u8>,
}

impl HandshakeResponder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_done(&self) -> bool {
        self.round == handshake::ROUND_TRIPS
    }

    /// Consumes handshake bytes; returns server flights to send and any bytes
    /// that followed the final client flight.
    pub fn push(&mut self, bytes: &[u8]) -> Result<(Vec<Vec<u8>>, Vec<u8>), String> {
        self.buf.extend_from_slice(bytes);
        let mut out = Vec::new();
        while !self.is_done() {
            let flight = self.round * 2;
            let need = handshake::record_len(flight);
            if self.buf.len() < need {
                break;
            }
            handshake::check(&self.buf, flight)?;
            self.buf.drain(..need);
            out.push(handshake::record(flight + 1));
            self.round += 1;
        }
        let rest = if self.is_done() { std::mem::take(&mut self.buf) } else { Vec::new() };
        Ok((out, rest))
    }
}

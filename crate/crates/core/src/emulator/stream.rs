//! A small reliable byte stream for the emulated TCP and secure protocols.
//!
//! Enough of TCP to get the timing structure right: a SYN/SYN-ACK exchange,
//! an initial window of ten segments with slow start, cumulative ACKs,
//! out-of-order buffering and go-back-N retransmission on RTO with
//! exponential backoff. No delayed ACKs, no fast retransmit.

use std::collections::BTreeMap;

use super::Nanos;

pub(crate) const MSS: usize = 1460;
pub(crate) const INITIAL_WINDOW: usize = 10 * MSS;
const MAX_WINDOW: usize = 1 << 20;
const INITIAL_RTO: f64 = 1.0;
const MIN_RTO: f64 = 0.2;
const MAX_RTO: f64 = 60.0;
/// Retransmission attempts before the sender gives up.
pub(crate) const MAX_BACKOFFS: u32 = 8;
/// Bytes of IP and TCP header added to every segment on the wire.
pub(crate) const SEGMENT_OVERHEAD: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SegKind {
    Syn,
    SynAck,
    Data,
    Fin,
    Rst,
}

#[derive(Debug, Clone)]
pub(crate) struct Segment {
    pub kind: SegKind,
    pub seq: usize,
    pub ack: usize,
    pub data: Vec<u8>,
}

impl Segment {
    pub fn control(kind: SegKind) -> Self {
        Segment { kind, seq: 0, ack: 0, data: Vec::new() }
    }

    pub fn wire_len(&self) -> usize {
        SEGMENT_OVERHEAD + self.data.len()
    }
}

#[derive(Debug)]
pub(crate) struct StreamEnd {
    established: bool,
    out: Vec<u8>,
    una: usize,
    nxt: usize,
    cwnd: usize,
    rto: f64,
    backoffs: u32,
    srtt: Option<f64>,
    rttvar: f64,
    /// (sequence end, send time) of the segment being timed.
    timed: Option<(usize, Nanos)>,
    syn_sent_at: Option<Nanos>,
    rto_deadline: Option<Nanos>,
    timer_gen: u64,
    scheduled: Option<(Nanos, u64)>,
    rcv_nxt: usize,
    ooo: BTreeMap<usize, Vec<u8>>,
    inbox: Vec<u8>,
    gave_up: bool,
}

impl StreamEnd {
    fn new(established: bool) -> Self {
        Self {
            established,
            out: Vec::new(),
            una: 0,
            nxt: 0,
            cwnd: INITIAL_WINDOW,
            rto: INITIAL_RTO,
            backoffs: 0,
            srtt: None,
            rttvar: 0.0,
            timed: None,
            syn_sent_at: None,
            rto_deadline: None,
            timer_gen: 0,
            scheduled: None,
            rcv_nxt: 0,
            ooo: BTreeMap::new(),
            inbox: Vec::new(),
            gave_up: false,
        }
    }

    /// Active opener; call [`StreamEnd::connect`] next.
    pub fn client() -> Self {
        Self::new(false)
    }

    /// Passive side, established on receipt of the SYN.
    pub fn server() -> Self {
        Self::new(true)
    }

    pub fn gave_up(&self) -> bool {
        self.gave_up
    }

    pub fn connect(&mut self, now: Nanos) -> Segment {
        self.syn_sent_at = Some(now);
        self.arm(now);
        Segment::control(SegKind::Syn)
    }

    /// Handles the SYN-ACK; returns any data segments now sendable.
    pub fn on_syn_ack(&mut self, now: Nanos) -> Vec<Segment> {
        if self.established {
            return Vec::new();
        }
        self.established = true;
        if let Some(sent) = self.syn_sent_at.take() {
            if self.backoffs == 0 {
                self.sample_rtt(now - sent);
            }
        }
        self.backoffs = 0;
        self.rto_deadline = None;
        self.flush(now)
    }

    pub fn write(&mut self, data: &[u8]) {
        self.out.extend_from_slice(data);
    }

    /// Everything written has been acknowledged.
    #[cfg(test)]
    pub fn all_acked(&self) -> bool {
        self.una == self.out.len()
    }

    /// Segments allowed by the congestion window.
    pub fn flush(&mut self, now: Nanos) -> Vec<Segment> {
        let mut segs = Vec::new();
        if !self.established || self.gave_up {
            return segs;
        }
        while self.nxt < self.out.len() && self.nxt - self.una < self.cwnd {
            let room = self.cwnd - (self.nxt - self.una);
            let len = MSS.min(self.out.len() - self.nxt).min(room);
            let seg = Segment {
                kind: SegKind::Data,
                seq: self.nxt,
                ack: self.rcv_nxt,
                data: self.out[self.nxt..self.nxt + len].to_vec(),
            };
            self.nxt += len;
            if self.timed.is_none() && self.backoffs == 0 {
                self.timed = Some((self.nxt, now));
            }
            segs.push(seg);
        }
        if self.una < self.nxt && self.rto_deadline.is_none() {
            self.arm(now);
        }
        segs
    }

    /// Processes a cumulative acknowledgement.
    pub fn on_ack(&mut self, now: Nanos, ack: usize) -> Vec<Segment> {
        if ack <= self.una || ack > self.nxt {
            return Vec::new();
        }
        let acked = ack - self.una;
        self.una = ack;
        self.cwnd = (self.cwnd + acked).min(MAX_WINDOW);
        if let Some((end, sent)) = self.timed {
            if ack >= end {
                self.sample_rtt(now - sent);
                self.timed = None;
            }
        }
        self.backoffs = 0;
        self.rto_deadline = None;
        if self.una < self.nxt {
            self.arm(now);
        }
        self.flush(now)
    }

    /// Accepts a data segment; the caller sends back an ACK for `rcv_nxt()`.
    pub fn on_data(&mut self, seq: usize, data: Vec<u8>) {
        let end = seq + data.len();
        if end <= self.rcv_nxt {
            return;
        }
        if seq <= self.rcv_nxt {
            self.inbox.extend_from_slice(&data[self.rcv_nxt - seq..]);
            self.rcv_nxt = end;
            while let Some((&s, _)) = self.ooo.first_key_value() {
                if s > self.rcv_nxt {
                    break;
                }
                let chunk = self.ooo.remove(&s).expect("present");
                let e = s + chunk.len();
                if e > self.rcv_nxt {
                    self.inbox.extend_from_slice(&chunk[self.rcv_nxt - s..]);
                    self.rcv_nxt = e;
                }
            }
        } else {
            let keep = self.ooo.get(&seq).is_none_or(|c| c.len() < data.len());
            if keep {
                self.ooo.insert(seq, data);
            }
        }
    }

    #[cfg(test)]
    pub fn rcv_nxt(&self) -> usize {
        self.rcv_nxt
    }

    pub fn ack_segment(&self) -> Segment {
        Segment { kind: SegKind::Data, seq: self.nxt, ack: self.rcv_nxt, data: Vec::new() }
    }

    /// In-order bytes received since the last call.
    pub fn take_inbox(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.inbox)
    }

    /// Retransmission timeout fired. Returns segments to resend.
    pub fn on_rto(&mut self, now: Nanos, gen: u64) -> Vec<Segment> {
        if gen != self.timer_gen || self.rto_deadline.is_none_or(|d| d > now) {
            return Vec::new();
        }
        self.rto_deadline = None;
        if self.backoffs >= MAX_BACKOFFS {
            self.gave_up = true;
            return Vec::new();
        }
        self.backoffs += 1;
        self.rto = (self.rto * 2.0).min(MAX_RTO);
        self.timed = None;
        if !self.established {
            self.syn_sent_at = None;
            self.arm(now);
            return vec![Segment::control(SegKind::Syn)];
        }
        if self.una == self.nxt {
            return Vec::new();
        }
        self.cwnd = MSS;
        self.nxt = self.una;
        self.flush(now)
    }

    /// New timer to schedule, if the deadline changed since the last call.
    pub fn timer_request(&mut self) -> Option<(Nanos, u64)> {
        let deadline = self.rto_deadline?;
        let want = (deadline, self.timer_gen);
        if self.scheduled == Some(want) {
            return None;
        }
        self.scheduled = Some(want);
        Some(want)
    }

    fn arm(&mut self, now: Nanos) {
        self.timer_gen += 1;
        self.rto_deadline = Some(now + super::nanos(self.rto));
    }

    fn sample_rtt(&mut self, rtt_ns: Nanos) {
        let r = super::secs(rtt_ns);
        match self.srtt {
            None => {
                self.srtt = Some(r);
                self.rttvar = r / 2.0;
            }
            Some(s) => {
                self.rttvar = 0.75 * self.rttvar + 0.25 * (s - r).abs();
                self.srtt = Some(0.875 * s + 0.125 * r);
            }
        }
        let srtt = self.srtt.expect("set above");
        self.rto = (srtt + 4.0 * self.rttvar).clamp(MIN_RTO, MAX_RTO);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MS: Nanos = 1_000_000;

    fn pump(from: &mut StreamEnd, to: &mut StreamEnd, segs: Vec<Segment>, now: Nanos) -> Vec<Segment> {
        let mut acks = Vec::new();
        for s in segs {
            to.on_data(s.seq, s.data);
            acks.push(to.ack_segment());
        }
        let mut more = Vec::new();
        for a in acks {
            more.extend(from.on_ack(now, a.ack));
        }
        more
    }

    #[test]
    fn small_write_fits_initial_window() {
        let mut c = StreamEnd::client();
        let mut s = StreamEnd::server();
        c.connect(0);
        c.write(&vec![1u8; 5612]);
        let segs = c.on_syn_ack(100 * MS);
        assert_eq!(segs.len(), 4);
        assert_eq!(segs.iter().map(|s| s.data.len()).sum::<usize>(), 5612);
        let more = pump(&mut c, &mut s, segs, 200 * MS);
        assert!(more.is_empty());
        assert_eq!(s.take_inbox().len(), 5612);
        assert!(c.all_acked());
    }

    #[test]
    fn large_write_needs_slow_start_rounds() {
        let mut c = StreamEnd::client();
        let mut s = StreamEnd::server();
        c.connect(0);
        c.write(&vec![0u8; 51_212]);
        let mut segs = c.on_syn_ack(MS);
        let mut rounds = 0;
        while !segs.is_empty() {
            rounds += 1;
            segs = pump(&mut c, &mut s, segs, (rounds + 1) * MS);
        }
        // 10 segments, then 20, then the remaining 6.
        assert_eq!(rounds, 3);
        assert_eq!(s.take_inbox().len(), 51_212);
    }

    #[test]
    fn reassembles_out_of_order() {
        let mut s = StreamEnd::server();
        s.on_data(4, vec![4, 5, 6]);
        assert_eq!(s.rcv_nxt(), 0);
        s.on_data(0, vec![0, 1, 2, 3]);
        assert_eq!(s.rcv_nxt(), 7);
        s.on_data(2, vec![2, 3, 4]);
        assert_eq!(s.take_inbox(), vec![0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn rto_retransmits_from_oldest_unacked() {
        let mut c = StreamEnd::client();
        c.connect(0);
        c.write(&vec![0u8; 3000]);
        let first = c.on_syn_ack(100 * MS);
        assert_eq!(first.len(), 3);
        let (deadline, gen) = c.timer_request().unwrap();
        assert!(c.on_rto(deadline - 1, gen).is_empty());
        let again = c.on_rto(deadline, gen);
        assert_eq!(again.len(), 1);
        assert_eq!(again[0].seq, 0);
        let (d2, _) = c.timer_request().unwrap();
        assert!(d2 > deadline);
    }

    #[test]
    fn syn_is_retransmitted_with_backoff() {
        let mut c = StreamEnd::client();
        c.connect(0);
        let (d1, g1) = c.timer_request().unwrap();
        assert_eq!(d1, 1_000 * MS);
        let segs = c.on_rto(d1, g1);
        assert_eq!(segs[0].kind, SegKind::Syn);
        let (d2, _) = c.timer_request().unwrap();
        assert_eq!(d2, 3_000 * MS);
    }

    #[test]
    fn gives_up_after_max_backoffs() {
        let mut c = StreamEnd::client();
        c.connect(0);
        for _ in 0..MAX_BACKOFFS {
            let (d, g) = c.timer_request().unwrap();
            c.on_rto(d, g);
        }
        let (d, g) = c.timer_request().unwrap();
        c.on_rto(d, g);
        assert!(c.gave_up());
    }
}

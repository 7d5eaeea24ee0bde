//! Discrete-event engine: links, emulated clients and the emulated server.
//!
//! All state lives in one [`Simulation`] and advances on one clock. Events
//! are ordered by (time, insertion sequence), so a run is a pure function of
//! the profiles, the seed and the sequence of calls made on it.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::profile::{transmit, ComponentDraw, Delivery, Direction, DropReason, LinkProfile};
use super::stream::{SegKind, Segment, StreamEnd};
use super::{nanos, secs, Nanos};
use crate::scheduler::{LinkMetadata, RadioTech};
use crate::transport::server::{HandshakeResponder, Ingest, ServerLogEntry, StreamIntake, UdpIntake};
use crate::transport::wire::{handshake, DatagramHeader, Reply, StreamPreamble, DATAGRAM_HEADER_LEN, REPLY_LEN};
use crate::transport::{Protocol, TransactionStatus, TransportConfig};

/// IP + UDP header bytes counted against bandwidth.
const UDP_OVERHEAD: usize = 28;
/// How long the server keeps an answered connection around for retransmits.
const CONN_LINGER: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    /// Jump from event to event.
    Virtual,
    /// Sleep until each event is due; handlers observe the wall clock.
    RealTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TraceKind {
    Sent,
    Delivered,
    DroppedLoss,
    DroppedOutage,
}

/// One packet-level event, kept when tracing is enabled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub at: Nanos,
    pub link: usize,
    pub dir: Direction,
    pub kind: TraceKind,
    pub bytes: usize,
    pub txn_id: u64,
}

#[derive(Debug, Clone)]
enum Packet {
    Datagram { header: [u8; DATAGRAM_HEADER_LEN], payload_len: usize },
    UdpReply([u8; REPLY_LEN]),
    Segment { conn: u64, service: Protocol, seg: Segment },
}

impl Packet {
    fn wire_len(&self) -> usize {
        match self {
            Packet::Datagram { payload_len, .. } => UDP_OVERHEAD + DATAGRAM_HEADER_LEN + payload_len,
            Packet::UdpReply(_) => UDP_OVERHEAD + REPLY_LEN,
            Packet::Segment { seg, .. } => seg.wire_len(),
        }
    }

    fn txn_id(&self) -> u64 {
        match self {
            Packet::Datagram { header, .. } => u64::from_be_bytes(header[..8].try_into().unwrap()),
            Packet::UdpReply(b) => u64::from_be_bytes(b[..8].try_into().unwrap()),
            Packet::Segment { conn, .. } => *conn,
        }
    }
}

#[derive(Debug)]
enum Event {
    Deliver { link: usize, dir: Direction, packet: Packet },
    ClientStart(usize),
    ClientTimeout(usize),
    ClientRto(usize, u64),
    ClientTeardown(usize),
    UdpStallCheck,
    ConnCheck(u64),
    ConnRto(u64, u64),
}

#[derive(Debug)]
struct Scheduled {
    at: Nanos,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

struct LinkChannel {
    profile: LinkProfile,
    rng: ChaCha8Rng,
    /// Draws for packets of transactions that already have an outcome, so
    /// teardown traffic cannot shift the draws of later transactions.
    after_rng: ChaCha8Rng,
    active: Option<usize>,
    in_flight: usize,
}

impl LinkChannel {
    fn regime(&mut self) -> usize {
        let profile = &self.profile;
        let rng = &mut self.rng;
        *self.active.get_or_insert_with(|| profile.mixture.pick(rng))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Pending,
    Connecting,
    Handshake(usize),
    AwaitReply,
    Finished,
}

/// Final state of an emulated transaction.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub txn_id: u64,
    pub link: usize,
    pub protocol: Protocol,
    pub start: Nanos,
    pub duration: f64,
    pub status: TransactionStatus,
    pub bytes_sent: u64,
    pub bytes_acked: u64,
}

struct Client {
    link: usize,
    protocol: Protocol,
    txn_id: u64,
    body: Arc<[u8]>,
    timeout: f64,
    teardown: f64,
    udp_payload: usize,
    start: Nanos,
    phase: Phase,
    stream: Option<StreamEnd>,
    rx: Vec<u8>,
    outcome: Option<Outcome>,
}

struct ServerConn {
    link: usize,
    protocol: Protocol,
    end: StreamEnd,
    handshake: Option<HandshakeResponder>,
    intake: StreamIntake,
    last_data: Nanos,
    replied_at: Option<Nanos>,
}

pub struct Simulation {
    mode: ClockMode,
    origin: Instant,
    now: Nanos,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    seed: u64,
    links: Vec<LinkChannel>,
    clients: Vec<Client>,
    by_txn: HashMap<u64, usize>,
    next_txn: u64,
    stall_timeout: f64,
    udp: UdpIntake<usize>,
    udp_check: Option<Nanos>,
    conns: BTreeMap<u64, ServerConn>,
    server_log: Vec<ServerLogEntry>,
    trace: Option<Vec<TraceEvent>>,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn link_seed(seed: u64, profile: &LinkProfile) -> u64 {
    // FNV-1a over the id keeps each link's stream independent of link order.
    let id_hash = profile
        .link_id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
    mix(seed ^ mix(profile.rng_seed ^ mix(id_hash)))
}

impl Simulation {
    pub fn new(seed: u64, mode: ClockMode) -> Self {
        Self {
            mode,
            origin: Instant::now(),
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            seed,
            links: Vec::new(),
            clients: Vec::new(),
            by_txn: HashMap::new(),
            next_txn: 1,
            stall_timeout: TransportConfig::default().server_stall_timeout,
            udp: UdpIntake::new(TransportConfig::default().server_stall_timeout),
            udp_check: None,
            conns: BTreeMap::new(),
            server_log: Vec::new(),
            trace: None,
        }
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceEvent] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn server_log(&self) -> &[ServerLogEntry] {
        &self.server_log
    }

    pub fn set_server_stall_timeout(&mut self, stall: f64) {
        self.stall_timeout = stall;
        self.udp = UdpIntake::new(stall);
    }

    pub fn add_link(&mut self, profile: LinkProfile) -> usize {
        let seed = link_seed(self.seed, &profile);
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let after_rng = ChaCha8Rng::seed_from_u64(!seed);
        self.links.push(LinkChannel { profile, rng, after_rng, active: None, in_flight: 0 });
        self.links.len() - 1
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn profile(&self, link: usize) -> &LinkProfile {
        &self.links[link].profile
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    /// Synthetic radio snapshot: the link's active delay mode decides the
    /// radio technology and RSRP model.
    pub fn synthetic_metadata(&mut self, link: usize) -> LinkMetadata {
        let sampled_at = secs(self.current_time());
        let ch = &mut self.links[link];
        let per_tx = ch.profile.component_draw == ComponentDraw::PerTransaction;
        let k = if per_tx { ch.regime() } else { ch.profile.mixture.pick(&mut ch.rng) };
        let radio_tech = if k == ch.profile.mixture.fastest() { RadioTech::Lte } else { RadioTech::ThreeG };
        let rsrp = ch.profile.sample_rsrp(k, &mut ch.rng);
        LinkMetadata {
            link_id: ch.profile.link_id.clone(),
            rsrp,
            rssi: None,
            radio_tech,
            latitude: None,
            longitude: None,
            sampled_at,
        }
    }

    /// Queues a transaction to start at experiment time `at`.
    pub fn spawn(
        &mut self,
        link: usize,
        protocol: Protocol,
        body: Arc<[u8]>,
        cfg: &TransportConfig,
        at: Nanos,
    ) -> usize {
        if (self.stall_timeout - cfg.server_stall_timeout).abs() > f64::EPSILON {
            self.set_server_stall_timeout(cfg.server_stall_timeout);
        }
        let txn_id = self.next_txn;
        self.next_txn += 1;
        let id = self.clients.len();
        self.clients.push(Client {
            link,
            protocol,
            txn_id,
            body,
            timeout: cfg.client_timeout,
            teardown: cfg.teardown_delay,
            udp_payload: cfg.udp_payload_size,
            start: at,
            phase: Phase::Pending,
            stream: None,
            rx: Vec::new(),
            outcome: None,
        });
        self.by_txn.insert(txn_id, id);
        self.schedule(at.max(self.now), Event::ClientStart(id));
        id
    }

    pub fn outcome(&self, client: usize) -> Option<&Outcome> {
        self.clients[client].outcome.as_ref()
    }

    /// Processes events until every listed client has finished.
    pub fn run_clients(&mut self, clients: &[usize]) {
        while clients.iter().any(|&c| self.clients[c].outcome.is_none()) {
            if !self.step(None) {
                break;
            }
        }
    }

    /// Processes every event due at or before `t` and moves the clock to `t`.
    pub fn run_until(&mut self, t: Nanos) {
        while self.step(Some(t)) {}
        if t > self.now {
            if self.mode == ClockMode::RealTime {
                self.sleep_until(t);
            }
            self.now = t;
        }
    }

    /// Drains the queue completely.
    pub fn run_to_idle(&mut self) {
        while self.step(None) {}
    }

    fn current_time(&self) -> Nanos {
        match self.mode {
            ClockMode::Virtual => self.now,
            ClockMode::RealTime => self.now.max(self.origin.elapsed().as_nanos() as Nanos),
        }
    }

    fn sleep_until(&self, t: Nanos) {
        let target = self.origin + Duration::from_nanos(t);
        let now = Instant::now();
        if target > now {
            std::thread::sleep(target - now);
        }
    }

    fn step(&mut self, limit: Option<Nanos>) -> bool {
        match self.queue.peek() {
            Some(Reverse(top)) if limit.is_none_or(|l| top.at <= l) => {}
            _ => return false,
        }
        let Reverse(next) = self.queue.pop().expect("peeked");
        self.now = match self.mode {
            ClockMode::Virtual => next.at.max(self.now),
            ClockMode::RealTime => {
                self.sleep_until(next.at);
                next.at.max(self.current_time())
            }
        };
        self.handle(next.event);
        true
    }

    fn schedule(&mut self, at: Nanos, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { at, seq: self.seq, event }));
    }

    fn record(&mut self, link: usize, dir: Direction, kind: TraceKind, packet: &Packet) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEvent {
                at: self.now,
                link,
                dir,
                kind,
                bytes: packet.wire_len(),
                txn_id: packet.txn_id(),
            });
        }
    }

    fn send(&mut self, link: usize, dir: Direction, packet: Packet) {
        let now = secs(self.now);
        let settled = self.by_txn.get(&packet.txn_id()).is_some_and(|&c| self.clients[c].phase == Phase::Finished);
        let ch = &mut self.links[link];
        let delivery = if settled {
            transmit(&ch.profile, &mut ch.after_rng, dir, packet.wire_len(), now, None)
        } else {
            let component = match ch.profile.component_draw {
                ComponentDraw::PerTransaction if ch.in_flight > 0 => Some(ch.regime()),
                _ => None,
            };
            transmit(&ch.profile, &mut ch.rng, dir, packet.wire_len(), now, component)
        };
        match delivery {
            Delivery::Delivered { at } => {
                self.record(link, dir, TraceKind::Sent, &packet);
                self.schedule(nanos(at).max(self.now), Event::Deliver { link, dir, packet });
            }
            Delivery::Dropped(DropReason::Loss) => self.record(link, dir, TraceKind::DroppedLoss, &packet),
            Delivery::Dropped(DropReason::Outage) => self.record(link, dir, TraceKind::DroppedOutage, &packet),
        }
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::Deliver { link, dir, packet } => {
                self.record(link, dir, TraceKind::Delivered, &packet);
                match dir {
                    Direction::Up => self.server_receive(link, packet),
                    Direction::Down => self.client_receive(packet),
                }
            }
            Event::ClientStart(c) => self.client_start(c),
            Event::ClientTimeout(c) => self.client_timeout(c),
            Event::ClientRto(c, gen) => {
                if self.clients[c].phase == Phase::Finished {
                    return;
                }
                let now = self.now;
                let segs = match self.clients[c].stream.as_mut() {
                    Some(s) => s.on_rto(now, gen),
                    None => return,
                };
                self.client_send_segments(c, segs);
            }
            Event::ClientTeardown(c) => {
                let (link, txn, service) = {
                    let cl = &self.clients[c];
                    (cl.link, cl.txn_id, cl.protocol)
                };
                self.send(link, Direction::Up, Packet::Segment { conn: txn, service, seg: Segment::control(SegKind::Fin) });
            }
            Event::UdpStallCheck => self.udp_stall_check(),
            Event::ConnCheck(conn) => self.conn_check(conn),
            Event::ConnRto(conn, gen) => {
                let now = self.now;
                let Some(sc) = self.conns.get_mut(&conn) else { return };
                let segs = sc.end.on_rto(now, gen);
                if sc.end.gave_up() {
                    let sc = self.conns.remove(&conn).expect("present");
                    if sc.replied_at.is_none() {
                        let entry = sc.intake.log_entry(sc.protocol, format!("link{}", sc.link), None, false);
                        self.server_log.push(entry);
                    }
                    return;
                }
                self.server_send_segments(conn, segs);
            }
        }
    }

    // ---- client side ----

    fn client_start(&mut self, c: usize) {
        let now = self.now;
        let (link, protocol, timeout) = {
            let cl = &mut self.clients[c];
            cl.start = now;
            (cl.link, cl.protocol, cl.timeout)
        };
        {
            let ch = &mut self.links[link];
            ch.in_flight += 1;
            if ch.profile.component_draw == ComponentDraw::PerTransaction {
                ch.regime();
            }
        }
        self.schedule(now + nanos(timeout), Event::ClientTimeout(c));
        match protocol {
            Protocol::Udp => {
                let (txn_id, total, payload) = {
                    let cl = &self.clients[c];
                    (cl.txn_id, cl.body.len(), cl.udp_payload.max(1))
                };
                self.clients[c].phase = Phase::AwaitReply;
                for (seq, start) in (0..total).step_by(payload).enumerate() {
                    let header = DatagramHeader { txn_id, total_size: total as u32, seq: seq as u32 }.encode();
                    let payload_len = payload.min(total - start);
                    self.send(link, Direction::Up, Packet::Datagram { header, payload_len });
                }
            }
            Protocol::Tcp | Protocol::Secure => {
                let mut end = StreamEnd::client();
                let syn = end.connect(now);
                let cl = &mut self.clients[c];
                cl.stream = Some(end);
                cl.phase = Phase::Connecting;
                self.client_send_segments(c, vec![syn]);
            }
        }
    }

    fn client_timeout(&mut self, c: usize) {
        if self.clients[c].outcome.is_some() {
            return;
        }
        let timeout = self.clients[c].timeout;
        self.finish(c, TransactionStatus::ClientTimeout, timeout, 0);
        let cl = &self.clients[c];
        if cl.protocol != Protocol::Udp {
            let (link, conn, service) = (cl.link, cl.txn_id, cl.protocol);
            self.send(link, Direction::Up, Packet::Segment { conn, service, seg: Segment::control(SegKind::Rst) });
        }
    }

    fn finish(&mut self, c: usize, status: TransactionStatus, duration: f64, acked: u64) {
        let now = self.now;
        let cl = &mut self.clients[c];
        let timed_out = status == TransactionStatus::ClientTimeout;
        cl.phase = Phase::Finished;
        cl.outcome = Some(Outcome {
            txn_id: cl.txn_id,
            link: cl.link,
            protocol: cl.protocol,
            start: cl.start,
            duration,
            status,
            bytes_sent: cl.body.len() as u64,
            bytes_acked: acked,
        });
        let (link, stream, teardown) = (cl.link, cl.protocol != Protocol::Udp, cl.teardown);
        let ch = &mut self.links[link];
        ch.in_flight = ch.in_flight.saturating_sub(1);
        if ch.in_flight == 0 {
            ch.active = None;
        }
        if stream && !timed_out {
            self.schedule(now + nanos(teardown), Event::ClientTeardown(c));
        }
    }

    fn client_receive(&mut self, packet: Packet) {
        let now = self.now;
        match packet {
            Packet::UdpReply(bytes) => {
                let Ok(reply) = Reply::decode(&bytes) else { return };
                let Some(&c) = self.by_txn.get(&reply.txn_id) else { return };
                let cl = &self.clients[c];
                if cl.protocol != Protocol::Udp || cl.phase != Phase::AwaitReply {
                    return;
                }
                let status = TransactionStatus::from_reply(reply.received, cl.body.len() as u64);
                let duration = secs(now - cl.start);
                self.finish(c, status, duration, reply.received);
            }
            Packet::Segment { conn, seg, .. } => {
                let Some(&c) = self.by_txn.get(&conn) else { return };
                self.client_segment(c, seg);
            }
            Packet::Datagram { .. } => {}
        }
    }

    fn client_segment(&mut self, c: usize, seg: Segment) {
        let now = self.now;
        let cl = &mut self.clients[c];
        let Some(end) = cl.stream.as_mut() else { return };
        if cl.phase == Phase::Finished {
            // Keep acknowledging retransmitted replies until teardown.
            if seg.kind == SegKind::Data && !seg.data.is_empty() && cl.outcome.as_ref().is_some_and(|o| o.status != TransactionStatus::ClientTimeout) {
                end.on_data(seg.seq, seg.data);
                let ack = end.ack_segment();
                self.client_send_segments(c, vec![ack]);
            }
            return;
        }
        let mut out = Vec::new();
        match seg.kind {
            SegKind::SynAck => {
                if cl.phase == Phase::Connecting {
                    if cl.protocol == Protocol::Secure {
                        end.write(&handshake::record(0));
                        cl.phase = Phase::Handshake(0);
                    } else {
                        write_message(end, cl.txn_id, &cl.body);
                        cl.phase = Phase::AwaitReply;
                    }
                    out.extend(end.on_syn_ack(now));
                }
            }
            SegKind::Data => {
                out.extend(end.on_ack(now, seg.ack));
                if !seg.data.is_empty() {
                    end.on_data(seg.seq, seg.data);
                    out.push(end.ack_segment());
                    let bytes = end.take_inbox();
                    cl.rx.extend_from_slice(&bytes);
                }
            }
            SegKind::Syn | SegKind::Fin | SegKind::Rst => {}
        }
        self.client_send_segments(c, out);
        self.client_advance(c);
    }

    /// Moves the client's application state forward on received bytes.
    fn client_advance(&mut self, c: usize) {
        let now = self.now;
        loop {
            let cl = &mut self.clients[c];
            match cl.phase {
                Phase::Handshake(round) => {
                    let flight = round * 2 + 1;
                    let need = handshake::record_len(flight);
                    if cl.rx.len() < need {
                        return;
                    }
                    if handshake::check(&cl.rx, flight).is_err() {
                        let d = secs(now - cl.start);
                        self.finish(c, TransactionStatus::Error("handshake".into()), d, 0);
                        return;
                    }
                    cl.rx.drain(..need);
                    let end = cl.stream.as_mut().expect("stream client");
                    if round + 1 == handshake::ROUND_TRIPS {
                        write_message(end, cl.txn_id, &cl.body);
                        cl.phase = Phase::AwaitReply;
                    } else {
                        end.write(&handshake::record(flight + 1));
                        cl.phase = Phase::Handshake(round + 1);
                    }
                    let segs = end.flush(now);
                    self.client_send_segments(c, segs);
                }
                Phase::AwaitReply => {
                    if cl.rx.len() < REPLY_LEN {
                        return;
                    }
                    let reply = Reply::decode(&cl.rx).expect("length checked");
                    let d = secs(now - cl.start);
                    let status = if reply.txn_id == cl.txn_id {
                        TransactionStatus::from_reply(reply.received, cl.body.len() as u64)
                    } else {
                        TransactionStatus::Error("reply for another transaction".into())
                    };
                    self.finish(c, status, d, reply.received);
                    return;
                }
                _ => return,
            }
        }
    }

    fn client_send_segments(&mut self, c: usize, segs: Vec<Segment>) {
        let (link, conn, service) = {
            let cl = &self.clients[c];
            (cl.link, cl.txn_id, cl.protocol)
        };
        for seg in segs {
            self.send(link, Direction::Up, Packet::Segment { conn, service, seg });
        }
        if let Some((at, gen)) = self.clients[c].stream.as_mut().and_then(StreamEnd::timer_request) {
            self.schedule(at, Event::ClientRto(c, gen));
        }
    }

    // ---- server side ----

    fn server_receive(&mut self, link: usize, packet: Packet) {
        match packet {
            Packet::Datagram { header, payload_len } => {
                let now = secs(self.now);
                match self.udp.on_header(now, link, &header, payload_len) {
                    Ingest::Complete(out) => {
                        self.server_log.push(out.log);
                        self.send(out.peer, Direction::Down, Packet::UdpReply(out.reply.encode()));
                    }
                    Ingest::Malformed(entry) => self.server_log.push(entry),
                    Ingest::Pending => self.arm_udp_check(),
                    Ingest::Ignored => {}
                }
            }
            Packet::Segment { conn, service, seg } => self.server_segment(link, conn, service, seg),
            Packet::UdpReply(_) => {}
        }
    }

    fn arm_udp_check(&mut self) {
        if self.udp_check.is_some() {
            return;
        }
        if let Some(deadline) = self.udp.next_deadline() {
            let at = nanos(deadline).max(self.now);
            self.udp_check = Some(at);
            self.schedule(at, Event::UdpStallCheck);
        }
    }

    fn udp_stall_check(&mut self) {
        self.udp_check = None;
        let now = secs(self.now);
        for out in self.udp.poll_stalled(now) {
            self.server_log.push(out.log);
            self.send(out.peer, Direction::Down, Packet::UdpReply(out.reply.encode()));
        }
        if let Some(deadline) = self.udp.next_deadline() {
            let at = nanos(deadline).max(self.now + 1);
            self.udp_check = Some(at);
            self.schedule(at, Event::UdpStallCheck);
        }
    }

    fn server_segment(&mut self, link: usize, conn: u64, service: Protocol, seg: Segment) {
        let now = self.now;
        match seg.kind {
            SegKind::Syn => {
                if let std::collections::btree_map::Entry::Vacant(e) = self.conns.entry(conn) {
                    e.insert(ServerConn {
                            link,
                            protocol: service,
                            end: StreamEnd::server(),
                            handshake: (service == Protocol::Secure).then(HandshakeResponder::new),
                            intake: StreamIntake::new(),
                            last_data: now,
                            replied_at: None,
                        });
                    self.schedule(now + nanos(self.stall_timeout), Event::ConnCheck(conn));
                }
                self.send(link, Direction::Down, Packet::Segment { conn, service, seg: Segment::control(SegKind::SynAck) });
            }
            SegKind::Data => {
                let stall = self.stall_timeout;
                let Some(sc) = self.conns.get_mut(&conn) else { return };
                let mut out = sc.end.on_ack(now, seg.ack);
                if !seg.data.is_empty() {
                    sc.last_data = now;
                    sc.end.on_data(seg.seq, seg.data);
                    out.push(sc.end.ack_segment());
                    let bytes = sc.end.take_inbox();
                    let mut app = bytes;
                    if let Some(hs) = sc.handshake.as_mut() {
                        if !hs.is_done() {
                            match hs.push(&app) {
                                Ok((flights, rest)) => {
                                    for f in flights {
                                        sc.end.write(&f);
                                    }
                                    app = rest;
                                }
                                Err(reason) => {
                                    let entry = ServerLogEntry::malformed(service, format!("link{link}"), secs(now), reason);
                                    self.server_log.push(entry);
                                    self.conns.remove(&conn);
                                    return;
                                }
                            }
                        }
                    }
                    match sc.intake.push(secs(now), &app) {
                        Ok(Some(reply)) => {
                            sc.end.write(&reply.encode());
                            sc.replied_at = Some(now);
                            let entry = sc.intake.log_entry(service, format!("link{link}"), Some(secs(now)), false);
                            self.server_log.push(entry);
                        }
                        Ok(None) => {}
                        Err(e) => {
                            let entry = ServerLogEntry::malformed(service, format!("link{link}"), secs(now), e.to_string());
                            self.server_log.push(entry);
                            self.conns.remove(&conn);
                            return;
                        }
                    }
                    out.extend(sc.end.flush(now));
                }
                let _ = stall;
                self.server_send_segments(conn, out);
            }
            SegKind::Fin | SegKind::Rst => {
                if let Some(sc) = self.conns.remove(&conn) {
                    if sc.replied_at.is_none() {
                        let entry = sc.intake.log_entry(sc.protocol, format!("link{}", sc.link), None, false);
                        self.server_log.push(entry);
                    }
                }
            }
            SegKind::SynAck => {}
        }
    }

    fn conn_check(&mut self, conn: u64) {
        let now = self.now;
        let stall = nanos(self.stall_timeout);
        let Some(sc) = self.conns.get_mut(&conn) else { return };
        if let Some(replied) = sc.replied_at {
            if now >= replied + nanos(CONN_LINGER) {
                self.conns.remove(&conn);
            } else {
                self.schedule(replied + nanos(CONN_LINGER), Event::ConnCheck(conn));
            }
            return;
        }
        if now < sc.last_data + stall {
            let at = sc.last_data + stall;
            self.schedule(at, Event::ConnCheck(conn));
            return;
        }
        let (protocol, link) = (sc.protocol, sc.link);
        match sc.intake.premature_reply() {
            Some(reply) => {
                sc.end.write(&reply.encode());
                sc.replied_at = Some(now);
                let entry = sc.intake.log_entry(protocol, format!("link{link}"), Some(secs(now)), true);
                self.server_log.push(entry);
                let segs = sc.end.flush(now);
                self.server_send_segments(conn, segs);
                self.schedule(now + nanos(CONN_LINGER), Event::ConnCheck(conn));
            }
            None => {
                let sc = self.conns.remove(&conn).expect("present");
                let entry = sc.intake.log_entry(protocol, format!("link{link}"), None, true);
                self.server_log.push(entry);
            }
        }
    }

    fn server_send_segments(&mut self, conn: u64, segs: Vec<Segment>) {
        let Some(sc) = self.conns.get_mut(&conn) else { return };
        let (link, service) = (sc.link, sc.protocol);
        let timer = sc.end.timer_request();
        for seg in segs {
            self.send(link, Direction::Down, Packet::Segment { conn, service, seg });
        }
        if let Some((at, gen)) = timer {
            self.schedule(at, Event::ConnRto(conn, gen));
        }
    }
}

fn write_message(end: &mut StreamEnd, txn_id: u64, body: &[u8]) {
    end.write(&StreamPreamble { txn_id, total_size: body.len() as u32 }.encode());
    end.write(body);
}

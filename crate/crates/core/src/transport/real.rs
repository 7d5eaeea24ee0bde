//! Socket backend: the acknowledgement server and per-link clients.
//!
//! The server listens for UDP and TCP on one port and for the secure
//! protocol on the next. Clients bind to a link's local address so that
//! traffic leaves through that link's interface.

use std::fs::File;
use std::io::{self, BufWriter, ErrorKind, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use socket2::{Domain, SockAddr, Socket, Type};

use super::server::{HandshakeResponder, Ingest, ServerLogEntry, StreamIntake, UdpIntake};
use super::wire::{datagrams, handshake, Reply, StreamPreamble, REPLY_LEN};
use super::{Leg, LinkSet, Protocol, Timestamp, TransactionRecord, TransactionStatus, TransportConfig};
use crate::message::WarningMessage;
use crate::scheduler::{LinkMetadata, MetadataSource};

const POLL: Duration = Duration::from_millis(20);
const READ_SLICE: Duration = Duration::from_millis(25);
/// How long an answered connection may stay open waiting for the client.
const LINGER: Duration = Duration::from_secs(30);
const MAX_HTTP_HEADER: usize = 16 * 1024;

// ---- server ----

struct Shared {
    origin: Instant,
    stall: f64,
    stop: AtomicBool,
    entries: Mutex<Vec<ServerLogEntry>>,
    file: Option<Mutex<BufWriter<File>>>,
}

impl Shared {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }

    fn log(&self, entry: ServerLogEntry) {
        if let Some(file) = &self.file {
            let mut f = file.lock().unwrap_or_else(|e| e.into_inner());
            let written = serde_json::to_writer(&mut *f, &entry).map_err(io::Error::from).and_then(|()| {
                f.write_all(b"\n")?;
                f.flush()
            });
            if let Err(e) = written {
                log::error!("server log write failed: {e}");
            }
        }
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).push(entry);
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::Relaxed)
    }
}

/// A running server. Dropping it stops the listeners.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    /// UDP and TCP endpoint.
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn secure_addr(&self) -> SocketAddr {
        secure_addr(self.addr)
    }

    pub fn log_entries(&self) -> Vec<ServerLogEntry> {
        self.shared.entries.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    fn stop_threads(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

pub fn secure_addr(addr: SocketAddr) -> SocketAddr {
    SocketAddr::new(addr.ip(), addr.port().wrapping_add(1))
}

fn bind_all(addr: SocketAddr) -> io::Result<(UdpSocket, TcpListener, TcpListener)> {
    if addr.port() != 0 {
        return Ok((UdpSocket::bind(addr)?, TcpListener::bind(addr)?, TcpListener::bind(secure_addr(addr))?));
    }
    // Ephemeral: find a port free for UDP, TCP and TCP + 1.
    let mut last = None;
    for _ in 0..64 {
        let udp = UdpSocket::bind(addr)?;
        let port_addr = udp.local_addr()?;
        if port_addr.port() == u16::MAX {
            continue;
        }
        match (TcpListener::bind(port_addr), TcpListener::bind(secure_addr(port_addr))) {
            (Ok(t), Ok(s)) => return Ok((udp, t, s)),
            (Err(e), _) | (_, Err(e)) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| io::Error::new(ErrorKind::AddrInUse, "no free port pair")))
}

/// Starts the acknowledgement server. Port 0 picks free ports.
pub fn serve(addr: SocketAddr, stall_timeout: f64, log_file: Option<&Path>) -> io::Result<ServerHandle> {
    let (udp, tcp, secure) = bind_all(addr)?;
    let addr = udp.local_addr()?;
    let file = log_file.map(|p| File::options().create(true).append(true).open(p)).transpose()?;
    let shared = Arc::new(Shared {
        origin: Instant::now(),
        stall: stall_timeout,
        stop: AtomicBool::new(false),
        entries: Mutex::new(Vec::new()),
        file: file.map(|f| Mutex::new(BufWriter::new(f))),
    });
    udp.set_read_timeout(Some(POLL))?;
    tcp.set_nonblocking(true)?;
    secure.set_nonblocking(true)?;
    let mut threads = Vec::new();
    let s = shared.clone();
    threads.push(thread::Builder::new().name("udp-server".into()).spawn(move || udp_loop(udp, s))?);
    for (listener, proto) in [(tcp, Protocol::Tcp), (secure, Protocol::Secure)] {
        let s = shared.clone();
        threads.push(thread::Builder::new().name(format!("{proto}-accept")).spawn(move || accept_loop(listener, proto, s))?);
    }
    log::info!("serving on {addr} (secure on {})", secure_addr(addr));
    Ok(ServerHandle { addr, shared, threads })
}

fn udp_loop(sock: UdpSocket, shared: Arc<Shared>) {
    let mut intake = UdpIntake::<SocketAddr>::new(shared.stall);
    let mut buf = vec![0u8; 65_536];
    while !shared.stopped() {
        match sock.recv_from(&mut buf) {
            Ok((n, peer)) => match intake.on_datagram(shared.now(), peer, &buf[..n]) {
                Ingest::Complete(out) => {
                    if let Err(e) = sock.send_to(&out.reply.encode(), out.peer) {
                        log::warn!("udp reply to {} failed: {e}", out.peer);
                    }
                    shared.log(out.log);
                }
                Ingest::Malformed(entry) => {
                    log::warn!("malformed datagram from {peer}: {:?}", entry.malformed);
                    shared.log(entry);
                }
                Ingest::Pending | Ingest::Ignored => {}
            },
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            // ICMP errors from earlier replies surface here on some systems.
            Err(e) if e.kind() == ErrorKind::ConnectionReset => {}
            Err(e) => {
                log::error!("udp receive failed: {e}");
                thread::sleep(POLL);
            }
        }
        for out in intake.poll_stalled(shared.now()) {
            if let Err(e) = sock.send_to(&out.reply.encode(), out.peer) {
                log::warn!("udp reply to {} failed: {e}", out.peer);
            }
            shared.log(out.log);
        }
    }
}

fn accept_loop(listener: TcpListener, protocol: Protocol, shared: Arc<Shared>) {
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    while !shared.stopped() {
        match listener.accept() {
            Ok((stream, peer)) => {
                let s = shared.clone();
                match thread::Builder::new().name(format!("{protocol}-{peer}")).spawn(move || {
                    if let Err(e) = serve_stream(stream, peer, protocol, &s) {
                        log::debug!("{protocol} connection from {peer}: {e}");
                    }
                }) {
                    Ok(h) => workers.push(h),
                    Err(e) => log::error!("cannot spawn connection thread: {e}"),
                }
                workers.retain(|h| !h.is_finished());
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                log::error!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
    for h in workers {
        let _ = h.join();
    }
}

/// Application framing of the secure service: a minimal HTTP/1.1 exchange.
#[derive(Default)]
struct HttpIntake {
    head: Vec<u8>,
    parsed: bool,
}

impl HttpIntake {
    /// Turns request bytes into the preamble-framed stream that
    /// [`StreamIntake`] expects.
    fn push(&mut self, bytes: &[u8]) -> Result<Vec<u8>, String> {
        if self.parsed {
            return Ok(bytes.to_vec());
        }
        self.head.extend_from_slice(bytes);
        let mut headers = [httparse::EMPTY_HEADER; 32];
        let mut req = httparse::Request::new(&mut headers);
        let body_at = match req.parse(&self.head).map_err(|e| e.to_string())? {
            httparse::Status::Complete(n) => n,
            httparse::Status::Partial if self.head.len() > MAX_HTTP_HEADER => return Err("request head too large".into()),
            httparse::Status::Partial => return Ok(Vec::new()),
        };
        if req.method != Some("POST") {
            return Err(format!("unexpected method {:?}", req.method));
        }
        let header = |name: &str| -> Result<u64, String> {
            let h = req
                .headers
                .iter()
                .find(|h| h.name.eq_ignore_ascii_case(name))
                .ok_or_else(|| format!("missing {name}"))?;
            std::str::from_utf8(h.value)
                .ok()
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| format!("bad {name}"))
        };
        let total = header("Content-Length")?;
        let txn_id = header("X-Transaction-Id")?;
        if total == 0 || total > u32::MAX as u64 {
            return Err(format!("unsupported content length {total}"));
        }
        self.parsed = true;
        let mut framed = StreamPreamble { txn_id, total_size: total as u32 }.encode().to_vec();
        framed.extend_from_slice(&self.head[body_at..]);
        self.head.clear();
        Ok(framed)
    }
}

fn http_response(reply: &Reply) -> Vec<u8> {
    let body = reply.received.to_string();
    format!(
        "HTTP/1.1 200 OK\r\nContent-Type: text/plain\r\nContent-Length: {}\r\nX-Transaction-Id: {}\r\nConnection: close\r\n\r\n{body}",
        body.len(),
        reply.txn_id
    )
    .into_bytes()
}

fn serve_stream(mut stream: TcpStream, peer: SocketAddr, protocol: Protocol, shared: &Shared) -> io::Result<()> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(POLL))?;
    let mut intake = StreamIntake::new();
    let mut handshake = (protocol == Protocol::Secure).then(HandshakeResponder::new);
    let mut http = HttpIntake::default();
    let mut last_data = shared.now();
    let mut replied: Option<Instant> = None;
    let mut buf = vec![0u8; 64 * 1024];
    let respond = |stream: &mut TcpStream, reply: &Reply| -> io::Result<()> {
        match protocol {
            Protocol::Secure => stream.write_all(&http_response(reply)),
            _ => stream.write_all(&reply.encode()),
        }
    };
    loop {
        if shared.stopped() || replied.is_some_and(|t| t.elapsed() > LINGER) {
            break;
        }
        let n = match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                let now = shared.now();
                if replied.is_none() && now - last_data >= shared.stall {
                    let reply = intake.premature_reply();
                    if let Some(r) = &reply {
                        respond(&mut stream, r)?;
                        replied = Some(Instant::now());
                    }
                    shared.log(intake.log_entry(protocol, peer.to_string(), reply.map(|_| now), true));
                    if replied.is_none() {
                        break;
                    }
                }
                continue;
            }
            Err(e) => {
                if replied.is_none() {
                    shared.log(intake.log_entry(protocol, peer.to_string(), None, false));
                }
                return Err(e);
            }
        };
        let now = shared.now();
        last_data = now;
        if replied.is_some() {
            continue;
        }
        let mut app = buf[..n].to_vec();
        if let Some(h) = handshake.as_mut().filter(|h| !h.is_done()) {
            match h.push(&app) {
                Ok((flights, rest)) => {
                    for f in flights {
                        stream.write_all(&f)?;
                    }
                    app = rest;
                }
                Err(reason) => {
                    shared.log(ServerLogEntry::malformed(protocol, peer.to_string(), now, reason));
                    return Ok(());
                }
            }
        }
        if protocol == Protocol::Secure && !app.is_empty() {
            match http.push(&app) {
                Ok(framed) => app = framed,
                Err(reason) => {
                    shared.log(ServerLogEntry::malformed(protocol, peer.to_string(), now, reason));
                    let _ = stream.write_all(b"HTTP/1.1 400 Bad Request\r\nContent-Length: 0\r\nConnection: close\r\n\r\n");
                    return Ok(());
                }
            }
        }
        match intake.push(now, &app) {
            Ok(Some(reply)) => {
                respond(&mut stream, &reply)?;
                replied = Some(Instant::now());
                shared.log(intake.log_entry(protocol, peer.to_string(), Some(now), false));
            }
            Ok(None) => {}
            Err(e) => {
                shared.log(ServerLogEntry::malformed(protocol, peer.to_string(), now, e.to_string()));
                return Ok(());
            }
        }
    }
    if replied.is_none() && intake.received() > 0 && !intake.is_done() {
        shared.log(intake.log_entry(protocol, peer.to_string(), None, false));
    }
    Ok(())
}

// ---- client ----

/// A network path identified by the local address its sockets bind to.
#[derive(Debug, Clone, PartialEq)]
pub struct RealLink {
    pub id: String,
    pub bind: Option<IpAddr>,
    pub metadata: MetadataSource,
}

enum Failure {
    Timeout,
    Down(io::Error),
    Other(String),
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            ErrorKind::WouldBlock | ErrorKind::TimedOut => Failure::Timeout,
            _ => Failure::Other(e.to_string()),
        }
    }
}

struct Deadline(Instant);

impl Deadline {
    fn remaining(&self) -> Result<Duration, Failure> {
        self.0.checked_duration_since(Instant::now()).filter(|d| !d.is_zero()).ok_or(Failure::Timeout)
    }

    /// Socket receive timeouts overshoot by a few percent on some kernels, so
    /// reads wait in short slices and recheck the deadline.
    fn slice(&self) -> Result<Duration, Failure> {
        Ok(self.remaining()?.min(READ_SLICE))
    }
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted)
}

fn local_for(bind: Option<IpAddr>, server: SocketAddr) -> SocketAddr {
    let ip = bind.unwrap_or(match server {
        SocketAddr::V4(_) => IpAddr::V4(Ipv4Addr::UNSPECIFIED),
        SocketAddr::V6(_) => IpAddr::V6(Ipv6Addr::UNSPECIFIED),
    });
    SocketAddr::new(ip, 0)
}

fn udp_client(bind: Option<IpAddr>, server: SocketAddr, txn_id: u64, body: &[u8], payload: usize, deadline: &Deadline) -> Result<u64, Failure> {
    let sock = UdpSocket::bind(local_for(bind, server)).map_err(Failure::Down)?;
    for d in datagrams(txn_id, body, payload) {
        sock.send_to(&d, server).map_err(Failure::Down)?;
    }
    let mut buf = [0u8; 512];
    loop {
        sock.set_read_timeout(Some(deadline.slice()?)).map_err(Failure::Down)?;
        match sock.recv_from(&mut buf) {
            Ok((n, from)) if from == server && n >= REPLY_LEN => {
                if let Ok(r) = Reply::decode(&buf[..n]) {
                    if r.txn_id == txn_id {
                        return Ok(r.received);
                    }
                }
            }
            Ok(_) => {}
            // An ICMP unreachable does not end the transaction; only the timeout does.
            Err(e) if matches!(e.kind(), ErrorKind::ConnectionRefused | ErrorKind::ConnectionReset) => {
                thread::sleep(POLL.min(deadline.remaining()?));
            }
            Err(e) if is_timeout(&e) => {}
            Err(e) => return Err(e.into()),
        }
    }
}

fn connect(bind: Option<IpAddr>, server: SocketAddr, deadline: &Deadline) -> Result<TcpStream, Failure> {
    loop {
        let sock = Socket::new(Domain::for_address(server), Type::STREAM, None).map_err(Failure::Down)?;
        if bind.is_some() {
            sock.bind(&SockAddr::from(local_for(bind, server))).map_err(Failure::Down)?;
        }
        match sock.connect_timeout(&SockAddr::from(server), deadline.remaining()?) {
            Ok(()) => {
                let stream = TcpStream::from(sock);
                stream.set_nodelay(true).map_err(Failure::Down)?;
                return Ok(stream);
            }
            Err(e) if e.kind() == ErrorKind::ConnectionRefused => {
                thread::sleep(POLL.min(deadline.remaining()?));
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => return Err(Failure::Timeout),
            Err(e) => return Err(Failure::Down(e)),
        }
    }
}

fn write_by(stream: &mut TcpStream, bytes: &[u8], deadline: &Deadline) -> Result<(), Failure> {
    stream.set_write_timeout(Some(deadline.remaining()?))?;
    stream.write_all(bytes)?;
    Ok(())
}

fn read_exact_by(stream: &mut TcpStream, buf: &mut [u8], deadline: &Deadline) -> Result<(), Failure> {
    let mut got = 0;
    while got < buf.len() {
        stream.set_read_timeout(Some(deadline.slice()?))?;
        match stream.read(&mut buf[got..]) {
            Ok(0) => return Err(Failure::Other("connection closed before reply".into())),
            Ok(n) => got += n,
            Err(e) if is_timeout(&e) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn close_later(stream: TcpStream, delay: f64) {
    if delay <= 0.0 {
        let _ = stream.shutdown(std::net::Shutdown::Both);
        return;
    }
    thread::spawn(move || {
        thread::sleep(Duration::from_secs_f64(delay));
        let _ = stream.shutdown(std::net::Shutdown::Both);
    });
}

fn tcp_client(bind: Option<IpAddr>, server: SocketAddr, txn_id: u64, body: &[u8], teardown: f64, deadline: &Deadline) -> Result<u64, Failure> {
    let mut stream = connect(bind, server, deadline)?;
    let mut out = StreamPreamble { txn_id, total_size: body.len() as u32 }.encode().to_vec();
    out.extend_from_slice(body);
    write_by(&mut stream, &out, deadline)?;
    let mut reply = [0u8; REPLY_LEN];
    read_exact_by(&mut stream, &mut reply, deadline)?;
    let r = Reply::decode(&reply).map_err(|e| Failure::Other(e.to_string()))?;
    close_later(stream, teardown);
    if r.txn_id != txn_id {
        return Err(Failure::Other("reply for another transaction".into()));
    }
    Ok(r.received)
}

fn read_http_response(stream: &mut TcpStream, deadline: &Deadline) -> Result<(u64, u64), Failure> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    loop {
        let mut headers = [httparse::EMPTY_HEADER; 16];
        let mut resp = httparse::Response::new(&mut headers);
        if let httparse::Status::Complete(at) = resp.parse(&buf).map_err(|e| Failure::Other(e.to_string()))? {
            if resp.code != Some(200) {
                return Err(Failure::Other(format!("http status {:?}", resp.code)));
            }
            let find = |name: &str| {
                resp.headers
                    .iter()
                    .find(|h| h.name.eq_ignore_ascii_case(name))
                    .and_then(|h| std::str::from_utf8(h.value).ok())
                    .and_then(|v| v.trim().parse::<u64>().ok())
            };
            let len = find("Content-Length").ok_or_else(|| Failure::Other("response without length".into()))? as usize;
            let txn = find("X-Transaction-Id").unwrap_or(0);
            if buf.len() >= at + len {
                let body = std::str::from_utf8(&buf[at..at + len]).map_err(|e| Failure::Other(e.to_string()))?;
                let count = body.trim().parse().map_err(|_| Failure::Other(format!("bad count `{body}`")))?;
                return Ok((txn, count));
            }
        }
        if buf.len() > MAX_HTTP_HEADER {
            return Err(Failure::Other("response too large".into()));
        }
        stream.set_read_timeout(Some(deadline.slice()?))?;
        match stream.read(&mut chunk) {
            Ok(0) => return Err(Failure::Other("connection closed before reply".into())),
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(e) if is_timeout(&e) => {}
            Err(e) => return Err(e.into()),
        }
    }
}

fn secure_client(bind: Option<IpAddr>, server: SocketAddr, txn_id: u64, body: &[u8], teardown: f64, deadline: &Deadline) -> Result<u64, Failure> {
    let mut stream = connect(bind, secure_addr(server), deadline)?;
    for round in 0..handshake::ROUND_TRIPS {
        write_by(&mut stream, &handshake::record(2 * round), deadline)?;
        let mut flight = vec![0u8; handshake::record_len(2 * round + 1)];
        read_exact_by(&mut stream, &mut flight, deadline)?;
        handshake::check(&flight, 2 * round + 1).map_err(|e| Failure::Other(format!("handshake: {e}")))?;
    }
    let mut req = format!(
        "POST /warnings HTTP/1.1\r\nHost: {server}\r\nContent-Type: application/xml\r\nContent-Length: {}\r\nX-Transaction-Id: {txn_id}\r\n\r\n",
        body.len()
    )
    .into_bytes();
    req.extend_from_slice(body);
    write_by(&mut stream, &req, deadline)?;
    let (txn, count) = read_http_response(&mut stream, deadline)?;
    close_later(stream, teardown);
    if txn != txn_id {
        return Err(Failure::Other("reply for another transaction".into()));
    }
    Ok(count)
}

/// Client side of the socket backend.
pub struct RealLinks {
    links: Vec<RealLink>,
    server: SocketAddr,
    origin: Instant,
    origin_wall_ms: i64,
    next_txn: AtomicU64,
}

impl RealLinks {
    pub fn new(links: Vec<RealLink>, server: SocketAddr) -> Self {
        Self {
            links,
            server,
            origin: Instant::now(),
            origin_wall_ms: chrono::Utc::now().timestamp_millis(),
            // Random base so ids from separate runs do not collide at the server.
            next_txn: AtomicU64::new(rand::random::<u64>() >> 1),
        }
    }

    fn transact(&self, link: usize, protocol: Protocol, body: &[u8], cfg: &TransportConfig, txn_id: u64) -> (Timestamp, f64, TransactionStatus, u64) {
        let l = &self.links[link];
        let start = Instant::now();
        let mono = start.duration_since(self.origin).as_secs_f64();
        let ts = Timestamp { mono, wall_ms: self.wall_ms(mono) };
        let deadline = Deadline(start + Duration::from_secs_f64(cfg.client_timeout));
        let result = match protocol {
            Protocol::Udp => udp_client(l.bind, self.server, txn_id, body, cfg.udp_payload_size, &deadline),
            Protocol::Tcp => tcp_client(l.bind, self.server, txn_id, body, cfg.teardown_delay, &deadline),
            Protocol::Secure => secure_client(l.bind, self.server, txn_id, body, cfg.teardown_delay, &deadline),
        };
        let elapsed = start.elapsed().as_secs_f64();
        match result {
            Ok(acked) => (ts, elapsed, TransactionStatus::from_reply(acked, body.len() as u64), acked),
            Err(Failure::Timeout) => (ts, cfg.client_timeout, TransactionStatus::ClientTimeout, 0),
            Err(Failure::Down(e)) => {
                log::warn!("link {} down: {e}", l.id);
                (ts, elapsed, TransactionStatus::LinkDown, 0)
            }
            Err(Failure::Other(detail)) => (ts, elapsed, TransactionStatus::Error(detail), 0),
        }
    }
}

impl LinkSet for RealLinks {
    fn link_ids(&self) -> Vec<String> {
        self.links.iter().map(|l| l.id.clone()).collect()
    }

    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }

    fn wall_ms(&self, t: f64) -> i64 {
        self.origin_wall_ms + (t * 1000.0).round() as i64
    }

    fn wait_until(&mut self, at: f64) {
        let target = self.origin + Duration::from_secs_f64(at.max(0.0));
        if let Some(d) = target.checked_duration_since(Instant::now()) {
            thread::sleep(d);
        }
    }

    fn probe(&mut self, link: usize) -> bool {
        match UdpSocket::bind(local_for(self.links[link].bind, self.server)) {
            Ok(_) => true,
            Err(e) => {
                log::warn!("link {} cannot bind: {e}", self.links[link].id);
                false
            }
        }
    }

    fn collect_metadata(&mut self, link: usize) -> LinkMetadata {
        let l = &self.links[link];
        l.metadata.read(&l.id, self.now())
    }

    fn execute(&mut self, protocol: Protocol, msg: &WarningMessage, cfg: &TransportConfig, legs: &[Leg]) -> Vec<TransactionRecord> {
        let this = &*self;
        thread::scope(|scope| {
            let handles: Vec<_> = legs
                .iter()
                .map(|leg| {
                    let leg = *leg;
                    scope.spawn(move || {
                        if leg.start_delay > 0.0 {
                            thread::sleep(Duration::from_secs_f64(leg.start_delay));
                        }
                        let l = &this.links[leg.link];
                        let meta = l.metadata.read(&l.id, this.now());
                        let txn_id = this.next_txn.fetch_add(1, Ordering::Relaxed);
                        let (start, duration, status, acked) = this.transact(leg.link, protocol, msg.body(), cfg, txn_id);
                        TransactionRecord {
                            txn_id,
                            protocol,
                            link_id: l.id.clone(),
                            start,
                            duration,
                            status,
                            bytes_sent: msg.len() as u64,
                            bytes_acked: acked,
                            meta,
                        }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("leg thread panicked")).collect()
        })
    }
}

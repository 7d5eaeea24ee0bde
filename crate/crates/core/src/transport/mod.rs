//! Upload-and-acknowledge transactions over UDP, TCP and a secure channel.
//!
//! A transaction uploads one [`WarningMessage`] and waits for the server's
//! byte-count reply. It succeeds only if the reply arrives before the client
//! timeout and echoes the number of bytes sent.
//!
//! The protocols run on a [`LinkSet`]: either the deterministic emulator
//! ([`crate::emulator::EmulatedLinks`]) or real sockets ([`real::RealLinks`]).

use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::WarningMessage;
use crate::scheduler::LinkMetadata;

pub mod real;
pub mod server;
pub mod wire;

pub use wire::Reply;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Protocol {
    Udp,
    Tcp,
    Secure,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Udp, Protocol::Tcp, Protocol::Secure];

    pub const fn as_str(self) -> &'static str {
        match self {
            Protocol::Udp => "UDP",
            Protocol::Tcp => "TCP",
            Protocol::Secure => "SECURE",
        }
    }

    /// Round trips of a loss-free transaction whose message fits the
    /// initial congestion window.
    pub const fn round_trips(self) -> u32 {
        match self {
            Protocol::Udp => 1,
            Protocol::Tcp => 2,
            Protocol::Secure => 5,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "UDP" => Ok(Protocol::Udp),
            "TCP" => Ok(Protocol::Tcp),
            "SECURE" | "HTTPS" => Ok(Protocol::Secure),
            other => Err(format!("unknown protocol `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TransactionStatus {
    Success,
    ClientTimeout,
    ByteMismatch,
    LinkDown,
    Error(String),
}

impl TransactionStatus {
    pub fn is_success(&self) -> bool {
        matches!(self, TransactionStatus::Success)
    }

    pub fn code(&self) -> &'static str {
        match self {
            TransactionStatus::Success => "SUCCESS",
            TransactionStatus::ClientTimeout => "CLIENT_TIMEOUT",
            TransactionStatus::ByteMismatch => "BYTE_MISMATCH",
            TransactionStatus::LinkDown => "LINK_DOWN",
            TransactionStatus::Error(_) => "ERROR",
        }
    }

    pub fn detail(&self) -> Option<&str> {
        match self {
            TransactionStatus::Error(d) => Some(d),
            _ => None,
        }
    }

    pub fn from_code(code: &str, detail: Option<String>) -> Result<Self, String> {
        Ok(match code {
            "SUCCESS" => TransactionStatus::Success,
            "CLIENT_TIMEOUT" => TransactionStatus::ClientTimeout,
            "BYTE_MISMATCH" => TransactionStatus::ByteMismatch,
            "LINK_DOWN" => TransactionStatus::LinkDown,
            "ERROR" => TransactionStatus::Error(detail.unwrap_or_default()),
            other => return Err(format!("unknown status `{other}`")),
        })
    }

    /// Status implied by a server reply that arrived in time.
    pub fn from_reply(acked: u64, sent: u64) -> Self {
        if acked == sent {
            TransactionStatus::Success
        } else {
            TransactionStatus::ByteMismatch
        }
    }
}

impl fmt::Display for TransactionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransactionStatus::Error(d) => write!(f, "ERROR({d})"),
            other => f.write_str(other.code()),
        }
    }
}

/// Start of a transaction: seconds since experiment start and wall clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timestamp {
    pub mono: f64,
    pub wall_ms: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransactionRecord {
    pub txn_id: u64,
    pub protocol: Protocol,
    pub link_id: String,
    pub start: Timestamp,
    /// Seconds from the first byte (or connection initiation) to the reply.
    pub duration: f64,
    pub status: TransactionStatus,
    pub bytes_sent: u64,
    pub bytes_acked: u64,
    pub meta: LinkMetadata,
}

impl TransactionRecord {
    pub fn is_success(&self) -> bool {
        self.status.is_success()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("timeouts must satisfy client ({client}) > server stall ({stall}) > 0")]
    Timeouts { client: f64, stall: f64 },
    #[error("udp payload size {0} outside 1..=65000")]
    PayloadSize(usize),
    #[error("teardown delay must be non-negative, got {0}")]
    Teardown(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub client_timeout: f64,
    pub server_stall_timeout: f64,
    pub udp_payload_size: usize,
    /// Server endpoint for the socket backend. UDP and TCP use this port,
    /// the secure protocol the next one.
    pub server_address: Option<SocketAddr>,
    /// Pause between the reply and connection teardown (TCP/SECURE).
    pub teardown_delay: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            client_timeout: 6.0,
            server_stall_timeout: 5.0,
            udp_payload_size: 1400,
            server_address: None,
            teardown_delay: 0.0,
        }
    }
}

impl TransportConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.client_timeout > self.server_stall_timeout && self.server_stall_timeout > 0.0) {
            return Err(ConfigError::Timeouts {
                client: self.client_timeout,
                stall: self.server_stall_timeout,
            });
        }
        if !(1..=65_000).contains(&self.udp_payload_size) {
            return Err(ConfigError::PayloadSize(self.udp_payload_size));
        }
        if !(self.teardown_delay >= 0.0) {
            return Err(ConfigError::Teardown(self.teardown_delay));
        }
        Ok(())
    }
}

/// One transaction to launch within a concurrent batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leg {
    pub link: usize,
    /// Extra delay before this leg starts; zero except for skew injection.
    pub start_delay: f64,
}

impl Leg {
    pub fn on(link: usize) -> Self {
        Self { link, start_delay: 0.0 }
    }
}

/// A set of links able to carry transactions, real or emulated.
pub trait LinkSet {
    fn link_ids(&self) -> Vec<String>;

    /// Seconds since the experiment origin.
    fn now(&self) -> f64;

    /// Wall-clock milliseconds corresponding to experiment time `t`.
    fn wall_ms(&self, t: f64) -> i64;

    /// Blocks (real) or advances the clock (virtual) until experiment time `at`.
    fn wait_until(&mut self, at: f64);

    /// Whether the link looks usable before an experiment starts.
    fn probe(&mut self, _link: usize) -> bool {
        true
    }

    /// Snapshot of the link's radio state.
    fn collect_metadata(&mut self, link: usize) -> LinkMetadata;

    /// Runs one transaction per leg concurrently and returns the records in
    /// leg order. Metadata is sampled right before each leg starts.
    fn execute(
        &mut self,
        protocol: Protocol,
        msg: &WarningMessage,
        cfg: &TransportConfig,
        legs: &[Leg],
    ) -> Vec<TransactionRecord>;
}

fn single<L: LinkSet + ?Sized>(
    links: &mut L,
    link: usize,
    protocol: Protocol,
    msg: &WarningMessage,
    cfg: &TransportConfig,
) -> TransactionRecord {
    links
        .execute(protocol, msg, cfg, &[Leg::on(link)])
        .pop()
        .expect("one record per leg")
}

/// Uploads `msg` as datagrams; one round trip when nothing is lost.
pub fn udp_transact<L: LinkSet + ?Sized>(
    links: &mut L,
    link: usize,
    msg: &WarningMessage,
    cfg: &TransportConfig,
) -> TransactionRecord {
    single(links, link, Protocol::Udp, msg, cfg)
}

/// Uploads `msg` over a fresh stream connection; closure is not timed.
pub fn tcp_transact<L: LinkSet + ?Sized>(
    links: &mut L,
    link: usize,
    msg: &WarningMessage,
    cfg: &TransportConfig,
) -> TransactionRecord {
    single(links, link, Protocol::Tcp, msg, cfg)
}

/// Like [`tcp_transact`] with a three round trip handshake before the data.
pub fn secure_transact<L: LinkSet + ?Sized>(
    links: &mut L,
    link: usize,
    msg: &WarningMessage,
    cfg: &TransportConfig,
) -> TransactionRecord {
    single(links, link, Protocol::Secure, msg, cfg)
}

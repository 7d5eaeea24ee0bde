//! Byte layouts shared by clients and servers.
//!
//! All integers are big-endian.
//!
//! ```text
//! UDP datagram:  txn_id u64 | total_size u32 | seq u32 | payload
//! Stream start:  txn_id u64 | total_size u32 | message bytes
//! Reply:         txn_id u64 | received_bytes u64
//! ```

use thiserror::Error;

pub const DATAGRAM_HEADER_LEN: usize = 16;
pub const STREAM_PREAMBLE_LEN: usize = 12;
pub const REPLY_LEN: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("need {need} bytes, got {got}")]
    Short { need: usize, got: usize },
    #[error("declared total size is zero")]
    ZeroSize,
    #[error("sequence {seq} past end of a {total}-byte message")]
    SequenceOutOfRange { seq: u32, total: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatagramHeader {
    pub txn_id: u64,
    pub total_size: u32,
    pub seq: u32,
}

impl DatagramHeader {
    pub fn encode(&self) -> [u8; DATAGRAM_HEADER_LEN] {
        let mut out = [0u8; DATAGRAM_HEADER_LEN];
        out[..8].copy_from_slice(&self.txn_id.to_be_bytes());
        out[8..12].copy_from_slice(&self.total_size.to_be_bytes());
        out[12..].copy_from_slice(&self.seq.to_be_bytes());
        out
    }

    /// Decodes the header and returns it with the payload slice.
    pub fn decode(datagram: &[u8]) -> Result<(Self, &[u8]), WireError> {
        if datagram.len() < DATAGRAM_HEADER_LEN {
            return Err(WireError::Short { need: DATAGRAM_HEADER_LEN, got: datagram.len() });
        }
        let header = DatagramHeader {
            txn_id: u64::from_be_bytes(datagram[..8].try_into().unwrap()),
            total_size: u32::from_be_bytes(datagram[8..12].try_into().unwrap()),
            seq: u32::from_be_bytes(datagram[12..16].try_into().unwrap()),
        };
        if header.total_size == 0 {
            return Err(WireError::ZeroSize);
        }
        Ok((header, &datagram[DATAGRAM_HEADER_LEN..]))
    }
}

/// Splits `body` into datagrams of at most `payload_size` payload bytes.
pub fn datagrams(txn_id: u64, body: &[u8], payload_size: usize) -> Vec<Vec<u8>> {
    let total_size = body.len() as u32;
    body.chunks(payload_size.max(1))
        .enumerate()
        .map(|(seq, chunk)| {
            let header = DatagramHeader { txn_id, total_size, seq: seq as u32 };
            let mut d = Vec::with_capacity(DATAGRAM_HEADER_LEN + chunk.len());
            d.extend_from_slice(&header.encode());
            d.extend_from_slice(chunk);
            d
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamPreamble {
    pub txn_id: u64,
    pub total_size: u32,
}

impl StreamPreamble {
    pub fn encode(&self) -> [u8; STREAM_PREAMBLE_LEN] {
        let mut out = [0u8; STREAM_PREAMBLE_LEN];
        out[..8].copy_from_slice(&self.txn_id.to_be_bytes());
        out[8..].copy_from_slice(&self.total_size.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < STREAM_PREAMBLE_LEN {
            return Err(WireError::Short { need: STREAM_PREAMBLE_LEN, got: bytes.len() });
        }
        let p = StreamPreamble {
            txn_id: u64::from_be_bytes(bytes[..8].try_into().unwrap()),
            total_size: u32::from_be_bytes(bytes[8..12].try_into().unwrap()),
        };
        if p.total_size == 0 {
            return Err(WireError::ZeroSize);
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reply {
    pub txn_id: u64,
    pub received: u64,
}

impl Reply {
    pub fn encode(&self) -> [u8; REPLY_LEN] {
        let mut out = [0u8; REPLY_LEN];
        out[..8].copy_from_slice(&self.txn_id.to_be_bytes());
        out[8..].copy_from_slice(&self.received.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < REPLY_LEN {
            return Err(WireError::Short { need: REPLY_LEN, got: bytes.len() });
        }
        Ok(Reply {
            txn_id: u64::from_be_bytes(bytes[..8].try_into().unwrap()),
            received: u64::from_be_bytes(bytes[8..16].try_into().unwrap()),
        })
    }
}

/// Dummy handshake flights for the secure protocol.
///
/// Each record is `kind u8 | len u16 | len bytes`. The client sends flights
/// 1, 3, 5 and the server answers each with 2, 4, 6, giving three round trips
/// before any application data moves.
pub mod handshake {
    /// Record body sizes, loosely shaped after a mutual-auth TLS exchange.
    pub const FLIGHT_SIZES: [usize; 6] = [512, 3_072, 1_792, 256, 96, 96];
    pub const ROUND_TRIPS: usize = FLIGHT_SIZES.len() / 2;
    pub const RECORD_HEADER_LEN: usize = 3;

    pub fn record(flight: usize) -> Vec<u8> {
        let len = FLIGHT_SIZES[flight];
        let mut out = Vec::with_capacity(RECORD_HEADER_LEN + len);
        out.push(flight as u8 + 1);
        out.extend_from_slice(&(len as u16).to_be_bytes());
        out.extend((0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(flight as u8)));
        out
    }

    pub fn record_len(flight: usize) -> usize {
        RECORD_HEADER_LEN + FLIGHT_SIZES[flight]
    }

    /// Checks that `bytes` starts with a complete record of the expected flight.
    pub fn check(bytes: &[u8], flight: usize) -> Result<(), String> {
        if bytes.len() < RECORD_HEADER_LEN {
            return Err("short handshake record".into());
        }
        if bytes[0] as usize != flight + 1 {
            return Err(format!("expected handshake flight {}, got kind {}", flight + 1, bytes[0]));
        }
        let len = u16::from_be_bytes([bytes[1], bytes[2]]) as usize;
        if len != FLIGHT_SIZES[flight] {
            return Err(format!("handshake flight {} has length {len}", flight + 1));
        }
        Ok(())
    }
}

//! Benchmarking of multi-link (multi-access) uploads of road-hazard warnings.
//!
//! Each transaction uploads one warning message over UDP, TCP or a secure
//! stream and waits for a byte-count acknowledgement. Links are either real
//! network interfaces or emulated links with configurable delay mixtures,
//! loss and outages.

pub mod analysis;
pub mod emulator;
pub mod message;
pub mod multiaccess;
pub mod persistence;
pub mod scheduler;
pub mod transport;

//! Deterministic link emulation.
//!
//! Links are described by [`LinkProfile`]s. The same protocol and server
//! logic used over real sockets runs here on a discrete-event clock, either
//! as fast as possible (virtual time) or paced to the wall clock.

use std::sync::Arc;

use crate::message::WarningMessage;
use crate::scheduler::{LinkMetadata, MetadataSource};
use crate::transport::{Leg, LinkSet, Protocol, Timestamp, TransactionRecord, TransportConfig};

pub mod fit;
pub mod profile;
mod sim;
mod stream;

pub use fit::{fit_profile_to_targets, CalibrationError, FitTargets};
pub use profile::{
    sample_one_way_delay, transmit, ComponentDraw, Delivery, Direction, DropReason, LatencyMixture,
    LinkProfile, LogNormalComponent, Outage, ProfileError, RsrpModel,
};
pub use sim::{ClockMode, Outcome, Simulation, TraceEvent, TraceKind};

/// Emulator time in nanoseconds since the experiment origin.
pub type Nanos = u64;

pub fn nanos(seconds: f64) -> Nanos {
    (seconds.max(0.0) * 1e9).round() as Nanos
}

pub fn secs(t: Nanos) -> f64 {
    t as f64 / 1e9
}

/// A [`LinkSet`] backed by the emulator.
pub struct EmulatedLinks {
    sim: Simulation,
    metadata: Vec<MetadataSource>,
    epoch_ms: i64,
}

impl EmulatedLinks {
    pub fn new(profiles: Vec<LinkProfile>, seed: u64) -> Result<Self, ProfileError> {
        Self::with_mode(profiles, seed, ClockMode::Virtual)
    }

    pub fn with_mode(profiles: Vec<LinkProfile>, seed: u64, mode: ClockMode) -> Result<Self, ProfileError> {
        let mut sim = Simulation::new(seed, mode);
        for p in profiles {
            p.validate()?;
            sim.add_link(p);
        }
        let metadata = vec![MetadataSource::Synthetic; sim.link_count()];
        Ok(Self { sim, metadata, epoch_ms: 0 })
    }

    /// Wall-clock milliseconds reported for experiment time zero.
    pub fn set_epoch_ms(&mut self, epoch_ms: i64) {
        self.epoch_ms = epoch_ms;
    }

    pub fn set_metadata_source(&mut self, link: usize, source: MetadataSource) {
        self.metadata[link] = source;
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    pub fn simulation_mut(&mut self) -> &mut Simulation {
        &mut self.sim
    }
}

impl LinkSet for EmulatedLinks {
    fn link_ids(&self) -> Vec<String> {
        (0..self.sim.link_count()).map(|i| self.sim.profile(i).link_id.clone()).collect()
    }

    fn now(&self) -> f64 {
        secs(self.sim.now())
    }

    fn wall_ms(&self, t: f64) -> i64 {
        self.epoch_ms + (t * 1000.0).round() as i64
    }

    fn wait_until(&mut self, at: f64) {
        self.sim.run_until(nanos(at));
    }

    fn probe(&mut self, link: usize) -> bool {
        !self.sim.profile(link).in_outage(self.now())
    }

    fn collect_metadata(&mut self, link: usize) -> LinkMetadata {
        match &self.metadata[link] {
            MetadataSource::Synthetic => self.sim.synthetic_metadata(link),
            source => {
                let id = self.sim.profile(link).link_id.clone();
                source.read(&id, self.now())
            }
        }
    }

    fn execute(
        &mut self,
        protocol: Protocol,
        msg: &WarningMessage,
        cfg: &TransportConfig,
        legs: &[Leg],
    ) -> Vec<TransactionRecord> {
        let body: Arc<[u8]> = Arc::from(msg.body());
        let now = self.sim.now();
        let mut started = Vec::with_capacity(legs.len());
        for leg in legs {
            let meta = self.collect_metadata(leg.link);
            let id = self.sim.spawn(leg.link, protocol, body.clone(), cfg, now + nanos(leg.start_delay));
            started.push((id, meta));
        }
        let ids: Vec<usize> = started.iter().map(|(id, _)| *id).collect();
        self.sim.run_clients(&ids);
        started
            .into_iter()
            .map(|(id, meta)| {
                let o = self.sim.outcome(id).expect("client finished").clone();
                let mono = secs(o.start);
                TransactionRecord {
                    txn_id: o.txn_id,
                    protocol,
                    link_id: self.sim.profile(o.link).link_id.clone(),
                    start: Timestamp { mono, wall_ms: self.wall_ms(mono) },
                    duration: o.duration,
                    status: o.status,
                    bytes_sent: o.bytes_sent,
                    bytes_acked: o.bytes_acked,
                    meta,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::{build_warning_message, EventType, SizeClass, WarningEvent};
    use crate::transport::{secure_transact, tcp_transact, udp_transact, TransactionStatus};
    use chrono::{TimeZone, Utc};

    fn message(size: SizeClass) -> WarningMessage {
        let ts = Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 0).unwrap();
        let ev = WarningEvent::new("t", EventType::Accident, ts, 60.1, 18.0).unwrap();
        build_warning_message(&ev, size).unwrap()
    }

    fn fixed(delay: f64) -> EmulatedLinks {
        EmulatedLinks::new(vec![LinkProfile::fixed("a", delay)], 1).unwrap()
    }

    #[test]
    fn round_trip_counts_on_fixed_delay() {
        let cfg = TransportConfig::default();
        let msg = message(SizeClass::Small);
        let mut links = fixed(0.05);
        let u = udp_transact(&mut links, 0, &msg, &cfg);
        let t = tcp_transact(&mut links, 0, &msg, &cfg);
        let s = secure_transact(&mut links, 0, &msg, &cfg);
        for (r, rtts) in [(&u, 1.0), (&t, 2.0), (&s, 5.0)] {
            assert_eq!(r.status, TransactionStatus::Success, "{r:?}");
            assert!((r.duration - 0.1 * rtts).abs() < 1e-6, "{:?} took {}", r.protocol, r.duration);
            assert_eq!(r.bytes_acked, 5600);
        }
    }

    #[test]
    fn large_message_needs_slow_start_rounds() {
        let cfg = TransportConfig::default();
        let mut links = fixed(0.05);
        let t = tcp_transact(&mut links, 0, &message(SizeClass::Large), &cfg);
        assert!(t.is_success());
        assert!((t.duration - 0.4).abs() < 1e-6, "{}", t.duration);
    }

    #[test]
    fn outage_times_out_at_client_timeout() {
        let cfg = TransportConfig::default();
        let mut p = LinkProfile::fixed("a", 0.02);
        p.outages.push(Outage { start: 0.0, duration: 100.0 });
        let mut links = EmulatedLinks::new(vec![p], 1).unwrap();
        for proto in Protocol::ALL {
            let r = links.execute(proto, &message(SizeClass::Small), &cfg, &[Leg::on(0)]).remove(0);
            assert_eq!(r.status, TransactionStatus::ClientTimeout);
            assert_eq!(r.duration, 6.0);
        }
    }

    #[test]
    fn lost_datagram_yields_premature_partial_reply() {
        let cfg = TransportConfig::default();
        let mut p = LinkProfile::fixed("a", 0.02);
        // Find a seed that drops exactly one uplink datagram.
        p.loss_rate = 0.2;
        let msg = message(SizeClass::Small);
        let mut found = false;
        for seed in 0..200 {
            let mut links = EmulatedLinks::new(vec![p.clone()], seed).unwrap();
            links.simulation_mut().enable_trace();
            let r = udp_transact(&mut links, 0, &msg, &cfg);
            let dropped: Vec<_> = links.simulation().trace().iter().filter(|e| e.kind == TraceKind::DroppedLoss).collect();
            if dropped.len() == 1 && dropped[0].dir == Direction::Up {
                assert_eq!(r.status, TransactionStatus::ByteMismatch);
                assert_eq!(r.bytes_acked, 4200);
                assert!((r.duration - 5.04).abs() < 1e-6, "{}", r.duration);
                found = true;
                break;
            }
        }
        assert!(found);
    }

    #[test]
    fn same_seed_same_trace() {
        let cfg = TransportConfig::default();
        let mix = LatencyMixture {
            components: vec![
                LogNormalComponent::from_median(0.8, 0.03, 0.3),
                LogNormalComponent::from_median(0.2, 0.3, 0.5),
            ],
        };
        let run = |seed| {
            let mut p = LinkProfile::with_mixture("a", mix.clone());
            p.loss_rate = 0.05;
            let mut links = EmulatedLinks::new(vec![p, LinkProfile::fixed("b", 0.04)], seed).unwrap();
            links.simulation_mut().enable_trace();
            let mut durations = Vec::new();
            for i in 0..30 {
                links.wait_until(i as f64 * 10.0);
                for r in links.execute(Protocol::ALL[i % 3], &message(SizeClass::Small), &cfg, &[Leg::on(0), Leg::on(1)]) {
                    durations.push((r.duration, r.status));
                }
            }
            (durations, links.simulation().trace().to_vec())
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9).0, run(10).0);
    }
}

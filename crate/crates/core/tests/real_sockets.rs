use chrono::{TimeZone, Utc};
use mabench::emulator::{ClockMode, EmulatedLinks, LinkProfile};
use mabench::message::{build_warning_message, EventType, SizeClass, WarningEvent, WarningMessage};
use mabench::scheduler::MetadataSource;
use mabench::transport::real::{serve, RealLink, RealLinks};
use mabench::transport::{Leg, LinkSet, Protocol, TransactionStatus, TransportConfig};

fn message(size: SizeClass) -> WarningMessage {
    let ts = Utc.with_ymd_and_hms(2024, 5, 2, 12, 0, 0).unwrap();
    let ev = WarningEvent::new("loop", EventType::GeneralObstruction, ts, 57.7, 11.97).unwrap();
    build_warning_message(&ev, size).unwrap()
}

fn link(id: &str) -> RealLink {
    RealLink { id: id.into(), bind: None, metadata: MetadataSource::Unavailable }
}

#[test]
fn loopback_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("server.log");
    let server = serve("127.0.0.1:0".parse().unwrap(), 5.0, Some(&log)).unwrap();
    let mut links = RealLinks::new(vec![link("a"), link("b")], server.addr());
    let cfg = TransportConfig::default();
    let mut n = 0;
    for size in [SizeClass::Small, SizeClass::Large] {
        let msg = message(size);
        for protocol in Protocol::ALL {
            let recs = links.execute(protocol, &msg, &cfg, &[Leg::on(0), Leg::on(1)]);
            for r in recs {
                assert_eq!(r.status, TransactionStatus::Success, "{protocol} {size:?}");
                assert_eq!(r.bytes_acked, msg.len() as u64);
                assert!(r.duration < 1.0, "{protocol} took {}", r.duration);
                n += 1;
            }
        }
    }
    let entries = server.log_entries();
    assert_eq!(entries.iter().filter(|e| e.replied_at.is_some() && !e.premature).count(), n);
    server.shutdown();
    assert!(std::fs::read_to_string(&log).unwrap().lines().count() >= n);
}

#[test]
fn start_delay_is_applied() {
    let server = serve("127.0.0.1:0".parse().unwrap(), 5.0, None).unwrap();
    let mut links = RealLinks::new(vec![link("a"), link("b")], server.addr());
    let recs = links.execute(
        Protocol::Udp,
        &message(SizeClass::Small),
        &TransportConfig::default(),
        &[Leg::on(0), Leg { link: 1, start_delay: 0.05 }],
    );
    let skew = recs[1].start.mono - recs[0].start.mono;
    assert!((0.045..0.1).contains(&skew), "skew {skew}");
}

#[test]
fn real_time_emulation_tracks_the_clock() {
    let mut links = EmulatedLinks::with_mode(vec![LinkProfile::fixed("e", 0.02)], 1, ClockMode::RealTime).unwrap();
    let msg = message(SizeClass::Small);
    let cfg = TransportConfig::default();
    let t = std::time::Instant::now();
    let r = links.execute(Protocol::Tcp, &msg, &cfg, &[Leg::on(0)]).remove(0);
    let wall = t.elapsed().as_secs_f64();
    assert_eq!(r.status, TransactionStatus::Success);
    assert!((r.duration - 0.08).abs() < 0.005, "duration {}", r.duration);
    assert!((0.075..0.2).contains(&wall), "wall {wall}");
}

//! Experiment configuration and the round scheduler.
//!
//! A run is divided into fixed-length rounds. In every round each protocol
//! fires once, at its own offset, on all links at the same instant. Every
//! leg is appended to the record sink as soon as its batch completes.

use std::collections::HashSet;
use std::fmt;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emulator::{
    fit_profile_to_targets, CalibrationError, EmulatedLinks, FitTargets, LinkProfile, ProfileError, RsrpModel,
};
use crate::message::{build_warning_message, EventType, MessageError, SizeClass, WarningEvent};
use crate::multiaccess::run_round;
use crate::persistence::{LogRecord, PersistError, RecordSink};
use crate::transport::{ConfigError, Leg, LinkSet, Protocol, TransportConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum RadioTech {
    #[serde(rename = "LTE")]
    Lte,
    #[serde(rename = "3G")]
    ThreeG,
    #[default]
    #[serde(rename = "unknown")]
    Unknown,
}

impl RadioTech {
    pub fn as_str(self) -> &'static str {
        match self {
            RadioTech::Lte => "LTE",
            RadioTech::ThreeG => "3G",
            RadioTech::Unknown => "unknown",
        }
    }
}

impl fmt::Display for RadioTech {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RadioTech {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "LTE" | "lte" | "4G" => Ok(RadioTech::Lte),
            "3G" | "3g" | "UMTS" | "HSPA" => Ok(RadioTech::ThreeG),
            "unknown" | "" => Ok(RadioTech::Unknown),
            other => Err(format!("unknown radio technology `{other}`")),
        }
    }
}

/// Reportable RSRP range in dBm.
pub const RSRP_RANGE: (f64, f64) = (-150.0, -40.0);

/// Radio state of a link at the start of a transaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkMetadata {
    pub link_id: String,
    pub rsrp: Option<f64>,
    pub rssi: Option<f64>,
    pub radio_tech: RadioTech,
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
    /// Experiment time of the sample, seconds.
    pub sampled_at: f64,
}

impl LinkMetadata {
    pub fn unavailable(link_id: impl Into<String>, at: f64) -> Self {
        Self {
            link_id: link_id.into(),
            rsrp: None,
            rssi: None,
            radio_tech: RadioTech::Unknown,
            latitude: None,
            longitude: None,
            sampled_at: at,
        }
    }
}

/// Contents of a modem status file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default)]
struct StatusFile {
    rsrp: Option<f64>,
    rssi: Option<f64>,
    radio_tech: Option<String>,
    latitude: Option<f64>,
    longitude: Option<f64>,
}

/// Where link metadata comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum MetadataSource {
    /// Derived from the emulated link's state.
    Synthetic,
    /// A JSON status file, re-read on every sample.
    File(PathBuf),
    Unavailable,
}

impl MetadataSource {
    /// Reads a sample. Missing or unparsable files and out-of-range values
    /// degrade to absent fields rather than failing the transaction.
    pub fn read(&self, link_id: &str, at: f64) -> LinkMetadata {
        let mut meta = LinkMetadata::unavailable(link_id, at);
        let MetadataSource::File(path) = self else { return meta };
        let status: StatusFile = match std::fs::read_to_string(path).map_err(|e| e.to_string()).and_then(|s| serde_json::from_str(&s).map_err(|e| e.to_string())) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("metadata for {link_id} unavailable: {}: {e}", path.display());
                return meta;
            }
        };
        meta.rsrp = status.rsrp.filter(|v| (RSRP_RANGE.0..=RSRP_RANGE.1).contains(v));
        if status.rsrp.is_some() && meta.rsrp.is_none() {
            log::warn!("discarding out-of-range RSRP {:?} for {link_id}", status.rsrp);
        }
        meta.rssi = status.rssi;
        meta.radio_tech = status.radio_tech.as_deref().and_then(|s| s.parse().ok()).unwrap_or_default();
        meta.latitude = status.latitude.filter(|v| (-90.0..=90.0).contains(v));
        meta.longitude = status.longitude.filter(|v| (-180.0..=180.0).contains(v));
        meta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Offsets {
    pub udp: f64,
    pub tcp: f64,
    pub secure: f64,
}

impl Default for Offsets {
    fn default() -> Self {
        Self { udp: 10.0, tcp: 20.0, secure: 30.0 }
    }
}

impl Offsets {
    pub fn of(&self, p: Protocol) -> f64 {
        match p {
            Protocol::Udp => self.udp,
            Protocol::Tcp => self.tcp,
            Protocol::Secure => self.secure,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkewInjection {
    /// Fraction of protocol rounds whose last leg starts late.
    pub fraction: f64,
    /// Delay of that leg, seconds.
    pub skew: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSpec {
    pub median: f64,
    pub q90: f64,
    pub success_rate: f64,
    #[serde(default = "default_fit_samples")]
    pub samples: usize,
}

fn default_fit_samples() -> usize {
    4000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub id: String,
    /// Local address the link's sockets bind to.
    #[serde(default)]
    pub bind: Option<IpAddr>,
    /// JSON status file with the modem's radio state.
    #[serde(default)]
    pub metadata_file: Option<PathBuf>,
    /// Emulated link: inline profile.
    #[serde(default)]
    pub profile: Option<LinkProfile>,
    /// Emulated link: profile in a separate TOML file.
    #[serde(default)]
    pub profile_file: Option<PathBuf>,
    /// Emulated link: profile fitted to UDP statistics.
    #[serde(default)]
    pub fit: Option<FitSpec>,
    /// Emulated link: synthetic RSRP per mixture component, replacing the
    /// profile's own.
    #[serde(default)]
    pub rsrp: Option<Vec<RsrpModel>>,
}

fn default_start_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).single().expect("valid date")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub size_class: SizeClass,
    #[serde(default = "default_run_duration")]
    pub run_duration: f64,
    #[serde(default = "default_round_length")]
    pub round_length: f64,
    #[serde(default)]
    pub offsets: Offsets,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Wall-clock time that emulated runs report for their start.
    #[serde(default = "default_start_time")]
    pub start_time: DateTime<Utc>,
    #[serde(default)]
    pub transport: TransportConfig,
    #[serde(default)]
    pub skew_injection: Option<SkewInjection>,
    #[serde(default)]
    pub links: Vec<LinkConfig>,
}

fn default_run_id() -> String {
    "run".into()
}
fn default_run_duration() -> f64 {
    3600.0
}
fn default_round_length() -> f64 {
    30.0
}
fn default_output() -> PathBuf {
    PathBuf::from("records.jsonl")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Transport(#[from] ConfigError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("fitting link {link}: {source}")]
    Calibration { link: String, source: CalibrationError },
    #[error(transparent)]
    Message(#[from] MessageError),
    #[error("no reachable links")]
    NoLinks,
    #[error(transparent)]
    Persist(#[from] PersistError),
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        let cfg: Self = toml::from_str(text).map_err(|e| RunError::Parse { path: PathBuf::new(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a TOML file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|source| RunError::Io { path: path.into(), source })?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| RunError::Parse { path: path.into(), message: e.to_string() })?;
        if let Some(dir) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            for l in &mut cfg.links {
                l.metadata_file.as_mut().map(fix);
                l.profile_file.as_mut().map(fix);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn rounds(&self) -> u64 {
        (self.run_duration / self.round_length).round() as u64
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Invalid(m));
        self.transport.validate()?;
        if !(self.round_length > 0.0 && self.run_duration > 0.0) {
            return bad("run_duration and round_length must be positive".into());
        }
        let n = self.run_duration / self.round_length;
        if (n - n.round()).abs() > 1e-9 {
            return bad(format!("run_duration {} is not a multiple of round_length {}", self.run_duration, self.round_length));
        }
        let o = self.offsets;
        if !(0.0 <= o.udp && o.udp < o.tcp && o.tcp < o.secure && o.secure <= self.round_length) {
            return bad(format!("offsets must satisfy 0 <= udp < tcp < secure <= round_length, got {o:?}"));
        }
        if let Some(s) = self.skew_injection {
            if !(0.0..=1.0).contains(&s.fraction) || !(s.skew >= 0.0) {
                return bad(format!("skew injection {s:?} out of range"));
            }
        }
        let mut seen = HashSet::new();
        for l in &self.links {
            if l.id.is_empty() || l.id == crate::multiaccess::MA_LINK_ID || l.id.contains(',') {
                return bad(format!("invalid link id `{}`", l.id));
            }
            if !seen.insert(&l.id) {
                return bad(format!("duplicate link id `{}`", l.id));
            }
            let sources = l.profile.is_some() as u8 + l.profile_file.is_some() as u8 + l.fit.is_some() as u8;
            if sources > 1 {
                return bad(format!("link `{}` sets more than one of profile, profile_file, fit", l.id));
            }
        }
        Ok(())
    }

    /// Keeps only the named links, in configuration order.
    pub fn select_links(&mut self, ids: &[String]) -> Result<(), RunError> {
        for id in ids {
            if !self.links.iter().any(|l| &l.id == id) {
                return Err(RunError::Invalid(format!("unknown link `{id}`")));
            }
        }
        self.links.retain(|l| ids.contains(&l.id));
        Ok(())
    }

    /// Emulator profile for one link; links without one get a fixed 30 ms.
    pub fn link_profile(&self, link: &LinkConfig) -> Result<LinkProfile, RunError> {
        let mut profile = if let Some(p) = &link.profile {
            p.clone()
        } else if let Some(path) = &link.profile_file {
            let text = std::fs::read_to_string(path).map_err(|source| RunError::Io { path: path.clone(), source })?;
            toml::from_str(&text).map_err(|e| RunError::Parse { path: path.clone(), message: e.to_string() })?
        } else if let Some(f) = link.fit {
            let targets = FitTargets {
                median: f.median,
                q90: f.q90,
                success_rate: f.success_rate,
                size_class: SizeClass::Small,
                samples: f.samples,
            };
            fit_profile_to_targets(&link.id, &targets, &self.transport, self.seed)
                .map_err(|source| RunError::Calibration { link: link.id.clone(), source })?
        } else {
            LinkProfile::fixed(&link.id, 0.015)
        };
        profile.link_id = link.id.clone();
        if let Some(rsrp) = &link.rsrp {
            profile.rsrp = rsrp.clone();
        }
        profile.validate()?;
        Ok(profile)
    }

    /// Builds the emulated link set described by this configuration.
    pub fn emulated_links(&self) -> Result<EmulatedLinks, RunError> {
        let profiles = self.links.iter().map(|l| self.link_profile(l)).collect::<Result<Vec<_>, _>>()?;
        let mut links = EmulatedLinks::new(profiles, self.seed)?;
        links.set_epoch_ms(self.start_time.timestamp_millis());
        for (i, l) in self.links.iter().enumerate() {
            if let Some(path) = &l.metadata_file {
                links.set_metadata_source(i, MetadataSource::File(path.clone()));
            }
        }
        Ok(links)
    }
}

/// Protocol rounds whose last leg gets the injected delay, as
/// `(round, protocol)` pairs. Exactly `round(fraction * 3 * rounds)` are
/// chosen, uniformly without replacement.
pub fn skew_schedule(rounds: u64, fraction: f64, seed: u64) -> HashSet<(u64, Protocol)> {
    let mut all: Vec<(u64, Protocol)> = (0..rounds).flat_map(|r| Protocol::ALL.map(|p| (r, p))).collect();
    let k = (fraction * all.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5CE3);
    all.shuffle(&mut rng);
    all.truncate(k);
    all.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub rounds: u64,
    pub records: u64,
    pub links: Vec<String>,
    pub dropped: Vec<String>,
}

/// Probes links and returns the indices of the reachable ones.
pub fn reachable_links<L: LinkSet + ?Sized>(links: &mut L) -> (Vec<usize>, Vec<String>) {
    let ids = links.link_ids();
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        if links.probe(i) {
            keep.push(i);
        } else {
            log::warn!("link {id} is unreachable; excluded from this run");
            dropped.push(id.clone());
        }
    }
    (keep, dropped)
}

const EVENT_TYPES: [EventType; 5] = [
    EventType::VehicleObstruction,
    EventType::AnimalPresenceObstruction,
    EventType::GeneralObstruction,
    EventType::Accident,
    EventType::PoorEnvironmentConditions,
];

/// Runs a full experiment, appending one record per leg to `sink`.
pub fn run_experiment<L: LinkSet + ?Sized>(
    links: &mut L,
    cfg: &ExperimentConfig,
    sink: &dyn RecordSink,
) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    let (active, dropped) = reachable_links(links);
    if active.is_empty() {
        return Err(RunError::NoLinks);
    }
    let ids = links.link_ids();
    let rounds = cfg.rounds();
    let skewed = cfg.skew_injection.map(|s| (skew_schedule(rounds, s.fraction, cfg.seed), s.skew));
    let origin = links.now();
    let mut count = 0;
    let mut order = Protocol::ALL;
    order.sort_by(|a, b| cfg.offsets.of(*a).total_cmp(&cfg.offsets.of(*b)));

    for r in 0..rounds {
        for protocol in order {
            let at = origin + r as f64 * cfg.round_length + cfg.offsets.of(protocol);
            links.wait_until(at);
            let ts = Utc.timestamp_millis_opt(links.wall_ms(at)).single().unwrap_or_else(Utc::now);
            let event = WarningEvent::new(
                format!("{}-{r}-{}", cfg.run_id, protocol.as_str().to_ascii_lowercase()),
                EVENT_TYPES[(r as usize) % EVENT_TYPES.len()],
                ts,
                0.0,
                0.0,
            )?;
            let msg = build_warning_message(&event, cfg.size_class)?;
            let mut legs: Vec<Leg> = active.iter().map(|&i| Leg::on(i)).collect();
            if let Some((set, skew)) = &skewed {
                if set.contains(&(r, protocol)) && legs.len() > 1 {
                    legs.last_mut().expect("non-empty").start_delay = *skew;
                }
            }
            let round = run_round(links, protocol, &msg, &cfg.transport, &legs, r, at - origin);
            for rec in &round.legs {
                sink.append(&LogRecord::from_leg(&cfg.run_id, cfg.size_class, &round, rec))?;
                count += 1;
            }
            log::debug!("round {r} {protocol}: {} legs, skew {:.4}", round.legs.len(), round.start_skew);
        }
    }
    Ok(RunSummary {
        rounds,
        records: count,
        links: active.iter().map(|&i| ids[i].clone()).collect(),
        dropped,
    })
}

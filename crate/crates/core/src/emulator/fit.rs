//! Calibrating a link profile against observed UDP statistics.
//!
//! The fitted mixture has a fixed shape: a fast component carrying 80 % of
//! the transactions and a slow one carrying the rest, both log-normal with
//! the same spread. A single parameter walks from a narrow unimodal profile
//! to a wide bimodal one; bisection on it matches the q90/median ratio,
//! then a rescale matches the median and the loss rate matches the success
//! rate. All measurements run the emulator itself with a fixed seed.

use chrono::{TimeZone, Utc};
use thiserror::Error;

use super::profile::{LatencyMixture, LinkProfile, LogNormalComponent, ProfileError};
use super::EmulatedLinks;
use crate::message::{build_warning_message, EventType, SizeClass, WarningEvent, WarningMessage};
use crate::transport::{udp_transact, LinkSet, TransportConfig};

const SLOW_WEIGHT: f64 = 0.2;
const MIN_SPREAD: f64 = 0.02;
const MAX_SPREAD: f64 = 0.9;
const MAX_SLOW_RATIO: f64 = 50.0;
/// Fast-component median used while fitting the shape.
const BASE_MEDIAN: f64 = 0.01;
const BISECTION_STEPS: usize = 40;
const TOLERANCE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitTargets {
    /// Median duration of successful UDP transactions, seconds.
    pub median: f64,
    /// 90th percentile of the same, seconds.
    pub q90: f64,
    /// Fraction of UDP transactions that succeed.
    pub success_rate: f64,
    pub size_class: SizeClass,
    /// Transactions per measurement.
    pub samples: usize,
}

impl FitTargets {
    pub fn new(median: f64, q90: f64, success_rate: f64) -> Self {
        Self { median, q90, success_rate, size_class: SizeClass::Small, samples: 4000 }
    }
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("invalid targets: {0}")]
    Targets(String),
    #[error("q90/median ratio {target:.3} outside the reachable range {min:.3}..{max:.3}")]
    Unreachable { target: f64, min: f64, max: f64 },
    #[error("fitted profile misses the targets: median {median:.4}, q90 {q90:.4}, success {success:.4}")]
    Converge { median: f64, q90: f64, success: f64 },
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

#[derive(Debug, Clone, Copy)]
struct Measured {
    median: f64,
    q90: f64,
    success: f64,
}

fn shape(theta: f64, fast_median: f64) -> LatencyMixture {
    let (spread, ratio) = if theta <= 1.0 {
        (MIN_SPREAD + (MAX_SPREAD - MIN_SPREAD) * theta, 1.0)
    } else {
        (MAX_SPREAD, MAX_SLOW_RATIO.powf(theta - 1.0))
    };
    LatencyMixture {
        components: vec![
            LogNormalComponent::from_median(1.0 - SLOW_WEIGHT, fast_median, spread),
            LogNormalComponent::from_median(SLOW_WEIGHT, fast_median * ratio, spread),
        ],
    }
}

fn probe_message(size: SizeClass) -> WarningMessage {
    let ts = Utc.timestamp_opt(0, 0).single().expect("epoch");
    let event = WarningEvent::new("calibration", EventType::GeneralObstruction, ts, 0.0, 0.0).expect("valid event");
    build_warning_message(&event, size).expect("standard size")
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn measure(profile: &LinkProfile, cfg: &TransportConfig, msg: &WarningMessage, n: usize, seed: u64) -> Result<Measured, CalibrationError> {
    let mut links = EmulatedLinks::new(vec![profile.clone()], seed)?;
    let mut ok = Vec::with_capacity(n);
    let mut t = 0.0;
    for _ in 0..n {
        links.wait_until(t);
        let r = udp_transact(&mut links, 0, msg, cfg);
        if r.is_success() {
            ok.push(r.duration);
        }
        t += cfg.client_timeout + 1.0;
    }
    let success = ok.len() as f64 / n as f64;
    if ok.is_empty() {
        return Ok(Measured { median: f64::NAN, q90: f64::NAN, success });
    }
    ok.sort_by(f64::total_cmp);
    Ok(Measured { median: quantile(&ok, 0.5), q90: quantile(&ok, 0.9), success })
}

/// Fits a two-component profile whose emulated UDP transactions reproduce
/// `targets`. Errors if no profile of this shape gets within 10 %.
pub fn fit_profile_to_targets(
    link_id: &str,
    targets: &FitTargets,
    cfg: &TransportConfig,
    seed: u64,
) -> Result<LinkProfile, CalibrationError> {
    let FitTargets { median, q90, success_rate, size_class, samples } = *targets;
    if !(median > 0.0 && q90 >= median && median.is_finite() && q90.is_finite()) {
        return Err(CalibrationError::Targets(format!("need 0 < median <= q90, got {median}, {q90}")));
    }
    if !(success_rate > 0.0 && success_rate <= 1.0) {
        return Err(CalibrationError::Targets(format!("success rate {success_rate} outside (0, 1]")));
    }
    if samples < 100 {
        return Err(CalibrationError::Targets(format!("{samples} samples is too few")));
    }
    if q90 >= cfg.client_timeout {
        return Err(CalibrationError::Targets(format!("q90 {q90} is not below the client timeout")));
    }
    let msg = probe_message(size_class);
    let lossless = TransportConfig { client_timeout: 1e6, server_stall_timeout: 1e5, ..cfg.clone() };
    let ratio_at = |theta: f64| -> Result<(f64, f64), CalibrationError> {
        let p = LinkProfile::with_mixture(link_id, shape(theta, BASE_MEDIAN));
        let m = measure(&p, &lossless, &msg, samples, seed)?;
        Ok((m.q90 / m.median, m.median))
    };

    let target_ratio = q90 / median;
    let (mut lo, mut hi) = (0.0, 2.0);
    let (min_ratio, _) = ratio_at(lo)?;
    let (max_ratio, _) = ratio_at(hi)?;
    if target_ratio < min_ratio * (1.0 - TOLERANCE) || target_ratio > max_ratio * (1.0 + TOLERANCE) {
        return Err(CalibrationError::Unreachable { target: target_ratio, min: min_ratio, max: max_ratio });
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let (r, _) = ratio_at(mid)?;
        if r < target_ratio {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-4 {
            break;
        }
    }
    let theta = 0.5 * (lo + hi);
    let (_, base_median) = ratio_at(theta)?;
    // Delays scale linearly with the component medians, so one rescale
    // lands the median.
    let fast = BASE_MEDIAN * median / base_median;
    let mut profile = LinkProfile::with_mixture(link_id, shape(theta, fast));
    profile.validate()?;

    // Timeouts alone, then per-packet loss for the remaining failures.
    let no_loss = measure(&profile, cfg, &msg, samples, seed)?;
    let packets = msg.len().div_ceil(cfg.udp_payload_size) + 1;
    let keep = (success_rate / no_loss.success.max(1e-9)).min(1.0);
    profile.loss_rate = 1.0 - keep.powf(1.0 / packets as f64);

    let check = measure(&profile, cfg, &msg, samples, seed)?;
    let close = |got: f64, want: f64| (got - want).abs() <= TOLERANCE * want;
    if !(close(check.median, median) && close(check.q90, q90) && (check.success - success_rate).abs() <= 0.02) {
        return Err(CalibrationError::Converge { median: check.median, q90: check.q90, success: check.success });
    }
    Ok(profile)
}

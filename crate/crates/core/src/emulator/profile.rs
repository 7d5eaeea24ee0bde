//! Link profiles: log-normal delay mixtures, loss and outage windows.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("mixture has no components")]
    EmptyMixture,
    #[error("mixture weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("component {index}: {reason}")]
    Component { index: usize, reason: String },
    #[error("loss rate {0} outside [0, 1]")]
    LossRate(f64),
    #[error("outage {0} has negative start or non-positive duration")]
    Outage(usize),
    #[error("outages {0} and {1} overlap")]
    OverlappingOutages(usize, usize),
    #[error("bandwidth cap must be positive, got {0}")]
    Bandwidth(f64),
    #[error("link_id must not be empty")]
    EmptyLinkId,
    #[error("{0} rsrp models given for {1} components")]
    RsrpModels(usize, usize),
}

/// One log-normal mode of the one-way delay, in seconds.
///
/// `location` and `scale` are the mean and standard deviation of the
/// logarithm of the delay. A zero scale gives a fixed delay of `exp(location)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogNormalComponent {
    pub weight: f64,
    pub location: f64,
    pub scale: f64,
}

impl LogNormalComponent {
    pub fn from_median(weight: f64, median: f64, scale: f64) -> Self {
        Self { weight, location: median.ln(), scale }
    }

    /// Component whose density peaks at `mode` seconds.
    pub fn from_mode(weight: f64, mode: f64, scale: f64) -> Self {
        Self { weight, location: mode.ln() + scale * scale, scale }
    }

    pub fn fixed(delay: f64) -> Self {
        Self::from_median(1.0, delay, 0.0)
    }

    pub fn median(&self) -> f64 {
        self.location.exp()
    }

    pub fn mode(&self) -> f64 {
        (self.location - self.scale * self.scale).exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.scale == 0.0 {
            return self.location.exp();
        }
        LogNormal::new(self.location, self.scale)
            .expect("validated component")
            .sample(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyMixture {
    pub components: Vec<LogNormalComponent>,
}

impl LatencyMixture {
    pub fn fixed(delay: f64) -> Self {
        Self { components: vec![LogNormalComponent::fixed(delay)] }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.components.is_empty() {
            return Err(ProfileError::EmptyMixture);
        }
        for (index, c) in self.components.iter().enumerate() {
            let bad = |reason: &str| ProfileError::Component { index, reason: reason.into() };
            if !(0.0..=1.0).contains(&c.weight) {
                return Err(bad("weight outside [0, 1]"));
            }
            if !c.location.is_finite() {
                return Err(bad("location must be finite"));
            }
            if !(c.scale >= 0.0 && c.scale.is_finite()) {
                return Err(bad("scale must be finite and non-negative"));
            }
        }
        let sum: f64 = self.components.iter().map(|c| c.weight).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ProfileError::WeightSum(sum));
        }
        Ok(())
    }

    /// Draws a component index by weight.
    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                return i;
            }
        }
        self.components.len() - 1
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let k = self.pick(rng);
        self.components[k].sample(rng)
    }

    /// Index of the component with the smallest median delay.
    pub fn fastest(&self) -> usize {
        self.components
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.location.total_cmp(&b.1.location))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// A window of experiment time during which every packet is dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outage {
    pub start: f64,
    pub duration: f64,
}

impl Outage {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.start + self.duration
    }
}

/// When the active mixture component is drawn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentDraw {
    /// Once per transaction; every packet of the transaction shares the mode.
    #[default]
    PerTransaction,
    /// Independently for every packet.
    PerPacket,
}

/// Signal strength model for one mixture component, in dBm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsrpModel {
    pub mean: f64,
    pub std_dev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkProfile {
    /// Filled from the link configuration when omitted.
    #[serde(default)]
    pub link_id: String,
    /// Uplink delay mixture; also used downlink unless `downlink` is set.
    pub mixture: LatencyMixture,
    #[serde(default)]
    pub downlink: Option<LatencyMixture>,
    #[serde(default)]
    pub loss_rate: f64,
    #[serde(default)]
    pub outages: Vec<Outage>,
    /// Bytes per second; unlimited when absent.
    #[serde(default)]
    pub bandwidth_cap: Option<f64>,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub component_draw: ComponentDraw,
    /// Per-component RSRP for synthetic metadata; empty means no RSRP.
    #[serde(default)]
    pub rsrp: Vec<RsrpModel>,
}

impl LinkProfile {
    /// Constant one-way delay, no loss.
    pub fn fixed(link_id: impl Into<String>, one_way_delay: f64) -> Self {
        Self::with_mixture(link_id, LatencyMixture::fixed(one_way_delay))
    }

    pub fn with_mixture(link_id: impl Into<String>, mixture: LatencyMixture) -> Self {
        Self {
            link_id: link_id.into(),
            mixture,
            downlink: None,
            loss_rate: 0.0,
            outages: Vec::new(),
            bandwidth_cap: None,
            rng_seed: 0,
            component_draw: ComponentDraw::default(),
            rsrp: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.link_id.is_empty() {
            return Err(ProfileError::EmptyLinkId);
        }
        self.mixture.validate()?;
        if let Some(d) = &self.downlink {
            d.validate()?;
        }
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return Err(ProfileError::LossRate(self.loss_rate));
        }
        for (i, o) in self.outages.iter().enumerate() {
            if !(o.start >= 0.0 && o.duration > 0.0) {
                return Err(ProfileError::Outage(i));
            }
        }
        let mut order: Vec<usize> = (0..self.outages.len()).collect();
        order.sort_by(|&a, &b| self.outages[a].start.total_cmp(&self.outages[b].start));
        for w in order.windows(2) {
            let (a, b) = (&self.outages[w[0]], &self.outages[w[1]]);
            if b.start < a.start + a.duration {
                return Err(ProfileError::OverlappingOutages(w[0], w[1]));
            }
        }
        if let Some(cap) = self.bandwidth_cap {
            if !(cap > 0.0) {
                return Err(ProfileError::Bandwidth(cap));
            }
        }
        if !self.rsrp.is_empty() && self.rsrp.len() != self.mixture.components.len() {
            return Err(ProfileError::RsrpModels(self.rsrp.len(), self.mixture.components.len()));
        }
        Ok(())
    }

    pub fn in_outage(&self, t: f64) -> bool {
        self.outages.iter().any(|o| o.contains(t))
    }

    fn mixture_for(&self, dir: Direction) -> &LatencyMixture {
        match (dir, &self.downlink) {
            (Direction::Down, Some(d)) => d,
            _ => &self.mixture,
        }
    }

    /// Synthetic RSRP for component `k`, clamped to the reportable range.
    pub fn sample_rsrp<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Option<f64> {
        let m = self.rsrp.get(k)?;
        let v = if m.std_dev > 0.0 {
            Normal::new(m.mean, m.std_dev).expect("finite rsrp model").sample(rng)
        } else {
            m.mean
        };
        Some(v.clamp(-150.0, -40.0))
    }
}

/// One-way delay drawn from the uplink mixture: component by weight, then
/// a log-normal sample from it.
pub fn sample_one_way_delay<R: Rng + ?Sized>(profile: &LinkProfile, rng: &mut R) -> f64 {
    profile.mixture.sample(rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    Outage,
    Loss,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Delivery {
    Delivered { at: f64 },
    Dropped(DropReason),
}

/// Fate of a `size`-byte packet entering the link at `at`.
///
/// `component` pins the delay mode; `None` draws one for this packet.
pub fn transmit<R: Rng + ?Sized>(
    profile: &LinkProfile,
    rng: &mut R,
    dir: Direction,
    size: usize,
    at: f64,
    component: Option<usize>,
) -> Delivery {
    // Every draw is consumed whatever the outcome, so the random stream does
    // not depend on loss or outage placement.
    let lost = rng.random::<f64>() < profile.loss_rate;
    let mixture = profile.mixture_for(dir);
    let delay = match component {
        Some(k) if k < mixture.components.len() => mixture.components[k].sample(rng),
        _ => mixture.sample(rng),
    };
    if profile.in_outage(at) {
        return Delivery::Dropped(DropReason::Outage);
    }
    if lost {
        return Delivery::Dropped(DropReason::Loss);
    }
    let serialization = profile.bandwidth_cap.map_or(0.0, |cap| size as f64 / cap);
    Delivery::Delivered { at: at + delay + serialization }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bimodal() -> LinkProfile {
        LinkProfile::with_mixture(
            "op",
            LatencyMixture {
                components: vec![
                    LogNormalComponent::from_mode(0.7, 0.030, 0.25),
                    LogNormalComponent::from_mode(0.3, 0.120, 0.25),
                ],
            },
        )
    }

    #[test]
    fn degenerate_component_is_constant() {
        let p = LinkProfile::fixed("a", 0.050);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert!((sample_one_way_delay(&p, &mut rng) - 0.050).abs() < 1e-15);
        }
    }

    #[test]
    fn fixed_seed_reproduces_sequence() {
        let p = bimodal();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_one_way_delay(&p, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn histogram_is_bimodal_near_configured_modes() {
        // Monte Carlo: 100k draws, 2 ms bins, local maxima of a smoothed histogram.
        let p = bimodal();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let bin = 0.002;
        let mut hist = vec![0usize; 150];
        for _ in 0..100_000 {
            let d = sample_one_way_delay(&p, &mut rng);
            assert!(d > 0.0);
            let i = (d / bin) as usize;
            if i < hist.len() {
                hist[i] += 1;
            }
        }
        let smooth: Vec<f64> = (0..hist.len())
            .map(|i| {
                let lo = i.saturating_sub(3);
                let hi = (i + 4).min(hist.len());
                hist[lo..hi].iter().sum::<usize>() as f64 / (hi - lo) as f64
            })
            .collect();
        let peak_in = |lo: f64, hi: f64| {
            let (a, b) = ((lo / bin) as usize, (hi / bin) as usize);
            let i = (a..b).max_by(|&x, &y| smooth[x].total_cmp(&smooth[y])).unwrap();
            (i as f64 + 0.5) * bin
        };
        let m1 = peak_in(0.0, 0.070);
        let m2 = peak_in(0.080, 0.250);
        assert!((m1 - 0.030).abs() <= 0.003, "first mode {m1}");
        assert!((m2 - 0.120).abs() <= 0.012, "second mode {m2}");
        // a dip between the modes
        let valley = smooth[(0.070 / bin) as usize..(0.100 / bin) as usize]
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(valley < smooth[(m2 / bin) as usize]);
    }

    #[test]
    fn total_loss_and_outage_drop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = LinkProfile::fixed("a", 0.01);
        p.loss_rate = 1.0;
        for _ in 0..100 {
            assert_eq!(transmit(&p, &mut rng, Direction::Up, 100, 0.0, None), Delivery::Dropped(DropReason::Loss));
        }
        let mut p = LinkProfile::fixed("a", 0.01);
        p.outages.push(Outage { start: 10.0, duration: 5.0 });
        assert_eq!(
            transmit(&p, &mut rng, Direction::Up, 100, 12.0, None),
            Delivery::Dropped(DropReason::Outage)
        );
        assert_eq!(
            transmit(&p, &mut rng, Direction::Up, 100, 15.0, None),
            Delivery::Delivered { at: 15.01 }
        );
    }

    #[test]
    fn loss_fraction_concentrates() {
        // Binomial(10k, 0.1): sd = 0.003, so +-0.01 is over three sd.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = LinkProfile::fixed("a", 0.01);
        p.loss_rate = 0.1;
        let dropped = (0..10_000)
            .filter(|_| matches!(transmit(&p, &mut rng, Direction::Up, 100, 0.0, None), Delivery::Dropped(_)))
            .count();
        let frac = dropped as f64 / 10_000.0;
        assert!((frac - 0.1).abs() <= 0.01, "{frac}");
    }

    #[test]
    fn serialization_time_adds_to_delay() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = LinkProfile::fixed("a", 0.05);
        p.bandwidth_cap = Some(100_000.0);
        let Delivery::Delivered { at } = transmit(&p, &mut rng, Direction::Down, 1000, 1.0, None) else { panic!() };
        assert!((at - 1.06).abs() < 1e-12);
    }

    #[test]
    fn downlink_override() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = LinkProfile::fixed("a", 0.05);
        p.downlink = Some(LatencyMixture::fixed(0.02));
        let Delivery::Delivered { at } = transmit(&p, &mut rng, Direction::Down, 10, 0.0, None) else { panic!() };
        assert!((at - 0.02).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        let mut p = bimodal();
        p.validate().unwrap();
        p.mixture.components[0].weight = 0.6;
        assert!(matches!(p.validate(), Err(ProfileError::WeightSum(_))));
        let mut p = bimodal();
        p.loss_rate = 1.5;
        assert_eq!(p.validate(), Err(ProfileError::LossRate(1.5)));
        let mut p = bimodal();
        p.outages = vec![Outage { start: 0.0, duration: 10.0 }, Outage { start: 5.0, duration: 1.0 }];
        assert_eq!(p.validate(), Err(ProfileError::OverlappingOutages(0, 1)));
        let mut p = bimodal();
        p.mixture.components.clear();
        assert_eq!(p.validate(), Err(ProfileError::EmptyMixture));
    }

    #[test]
    fn profile_toml_round_trip() {
        let mut p = bimodal();
        p.outages.push(Outage { start: 100.0, duration: 30.0 });
        p.rsrp = vec![RsrpModel { mean: -85.0, std_dev: 6.0 }, RsrpModel { mean: -105.0, std_dev: 6.0 }];
        let text = toml::to_string(&p).unwrap();
        let back: LinkProfile = toml::from_str(&text).unwrap();
        assert_eq!(back, p);
    }
}

//! Seeded rack telemetry simulator with injected violation episodes.
//!
//! Each channel follows a daily sinusoid around its baseline plus Gaussian
//! sensor noise. An episode blends the signal towards a target value inside
//! the requested band of the customer's rule for that channel: a linear
//! ramp in, a plateau, and a linear ramp out.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Channel, TelemetryPoint, CHANNEL_ORDER};
use crate::rulesdb::{Interval, Metric, RuleSet, RuleSpec, ViolationLevel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub mean: f64,
    pub daily_amplitude: f64,
    pub noise_std: f64,
}

/// Which interval of a two-sided band an episode targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandSide {
    #[default]
    Upper,
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub channel: Channel,
    /// Zero-based rack index.
    #[serde(default)]
    pub rack: usize,
    /// Offset from the simulation start, seconds.
    pub start_s: i64,
    pub length_s: i64,
    pub band: ViolationLevel,
    #[serde(default)]
    pub side: BandSide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub customer: String,
    pub start_ts: i64,
    pub duration_s: i64,
    pub cadence_s: u64,
    pub racks: usize,
    pub pdus_per_rack: usize,
    pub temp_sensors: usize,
    pub humidity_sensors: usize,
    pub power: Baseline,
    pub temperature: Baseline,
    pub humidity: Baseline,
    /// Length of the ramp into and out of each episode.
    pub ramp_s: i64,
    /// Probability that a single sensor reading is dropped.
    pub dropout_prob: f64,
    pub episodes: Vec<Episode>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            customer: "Customer_A".into(),
            start_ts: 1_735_689_600, // 2025-01-01T00:00:00Z
            duration_s: 86_400,
            cadence_s: 30,
            racks: 1,
            pdus_per_rack: 2,
            temp_sensors: 3,
            humidity_sensors: 1,
            power: Baseline { mean: 24.0, daily_amplitude: 1.0, noise_std: 0.4 },
            temperature: Baseline { mean: 22.5, daily_amplitude: 0.5, noise_std: 0.3 },
            humidity: Baseline { mean: 50.0, daily_amplitude: 1.5, noise_std: 0.5 },
            ramp_s: 5_400,
            dropout_prob: 0.0,
            episodes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("episode {index} lies outside the simulated duration")]
    EpisodeOutOfRange { index: usize },
    #[error("episode {index} targets rack {rack}, only {racks} racks simulated")]
    UnknownRack { index: usize, rack: usize, racks: usize },
    #[error("episode {index} must target band l1 or l2")]
    NoneBandEpisode { index: usize },
    #[error("no rule for channel {0} to derive an episode target")]
    NoRuleForChannel(Metric),
    #[error("invalid simulator config: {0}")]
    Invalid(&'static str),
}

impl SimConfig {
    pub fn baseline(&self, channel: Channel) -> Baseline {
        match channel {
            Metric::PowerKw => self.power,
            Metric::TemperatureC => self.temperature,
            Metric::HumidityRh => self.humidity,
        }
    }

    pub fn steps(&self) -> usize {
        (self.duration_s / self.cadence_s.max(1) as i64).max(0) as usize
    }

    pub fn rack_id(rack: usize) -> String {
        format!("R{}", rack + 1)
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.cadence_s == 0 || self.duration_s <= 0 {
            return Err(SimError::Invalid("cadence and duration must be positive"));
        }
        if self.racks == 0 || self.pdus_per_rack == 0 || self.temp_sensors == 0 || self.humidity_sensors == 0 {
            return Err(SimError::Invalid("every rack needs at least one sensor per channel"));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(SimError::Invalid("dropout_prob must be in [0, 1)"));
        }
        for (index, ep) in self.episodes.iter().enumerate() {
            if ep.start_s < 0 || ep.length_s <= 0 || ep.start_s + ep.length_s > self.duration_s {
                return Err(SimError::EpisodeOutOfRange { index });
            }
            if ep.rack >= self.racks {
                return Err(SimError::UnknownRack { index, rack: ep.rack, racks: self.racks });
            }
            if ep.band == ViolationLevel::None {
                return Err(SimError::NoneBandEpisode { index });
            }
        }
        Ok(())
    }

    /// A config with episodes scheduled across racks and channels.
    ///
    /// Time is cut into slots of `slot_s`; each (rack, slot) gets one
    /// episode on a channel chosen round-robin, with a seeded band, side,
    /// start jitter and length. Episodes keep clear of slot edges so the
    /// signal returns to baseline between them.
    pub fn scheduled(seed: u64, racks: usize, duration_s: i64, slot_s: i64) -> SimConfig {
        let mut cfg = SimConfig { seed, racks, duration_s, ..SimConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_E915_0DE5);
        let slots = duration_s / slot_s;
        for rack in 0..racks {
            for slot in 0..slots {
                let channel = CHANNEL_ORDER[(slot as usize + rack) % CHANNEL_ORDER.len()];
                let band = if rng.gen_bool(0.5) { ViolationLevel::L1 } else { ViolationLevel::L2 };
                let side = if channel != Metric::PowerKw && rng.gen_bool(0.5) {
                    BandSide::Lower
                } else {
                    BandSide::Upper
                };
                // long enough that both ramps run their full length
                let min_len = (slot_s / 4).max(3 * cfg.ramp_s);
                let length_s = rng.gen_range(min_len..=(slot_s / 2).max(min_len + cfg.ramp_s));
                let slack = slot_s - length_s - slot_s / 4;
                let start_s = slot * slot_s + slot_s / 8 + rng.gen_range(0..=slack.max(0));
                if start_s + length_s <= duration_s {
                    cfg.episodes.push(Episode { channel, rack, start_s, length_s, band, side });
                }
            }
        }
        cfg
    }
}

/// Value an episode drives a channel to: the midpoint of the chosen
/// interval, or for an unbounded interval its endpoint pushed out by half
/// the width of the bounded interval it touches.
pub fn episode_target(rule: &RuleSpec, band: ViolationLevel, side: BandSide) -> f64 {
    let intervals = rule.bands.band(band);
    let pick = match side {
        BandSide::Upper => intervals.iter().max_by(|a, b| a.cmp_lower(b)),
        BandSide::Lower => intervals.iter().min_by(|a, b| a.cmp_lower(b)),
    };
    let Some(iv) = pick else {
        return f64::NAN;
    };
    match (iv.lo, iv.hi) {
        (Some(lo), Some(hi)) => 0.5 * (lo + hi),
        (Some(lo), None) => lo + 0.5 * neighbour_width(rule, lo),
        (None, Some(hi)) => hi - 0.5 * neighbour_width(rule, hi),
        (None, None) => f64::NAN,
    }
}

fn neighbour_width(rule: &RuleSpec, endpoint: f64) -> f64 {
    rule.bands
        .tagged()
        .map(|(_, iv)| iv)
        .filter(|iv: &&Interval| iv.is_bounded() && iv.endpoints().any(|e| e == endpoint))
        .filter_map(|iv| iv.width())
        .next()
        .unwrap_or(2.0)
}

struct ResolvedEpisode {
    rack: usize,
    channel: Channel,
    start: i64,
    end: i64,
    ramp: i64,
    target: f64,
}

impl ResolvedEpisode {
    /// Blend weight in [0, 1] at offset `t` from the simulation start.
    fn weight(&self, t: i64) -> f64 {
        if t < self.start || t >= self.end {
            return 0.0;
        }
        let ramp = self.ramp.min((self.end - self.start) / 2).max(1) as f64;
        let from_start = (t - self.start) as f64;
        let to_end = (self.end - t) as f64;
        (from_start / ramp).min(to_end / ramp).min(1.0)
    }
}

/// Generate telemetry. Output is ordered by time, rack, channel and sensor
/// and depends only on `config` and `rules`.
pub fn simulate(config: &SimConfig, rules: &RuleSet) -> Result<Vec<TelemetryPoint>, SimError> {
    config.validate()?;
    let mut episodes = Vec::with_capacity(config.episodes.len());
    for ep in &config.episodes {
        let rule = rules
            .iter()
            .find(|r| r.metric == ep.channel && r.customer == config.customer)
            .or_else(|| rules.iter().find(|r| r.metric == ep.channel))
            .ok_or(SimError::NoRuleForChannel(ep.channel))?;
        episodes.push(ResolvedEpisode {
            rack: ep.rack,
            channel: ep.channel,
            start: ep.start_s,
            end: ep.start_s + ep.length_s,
            ramp: config.ramp_s,
            target: episode_target(rule, ep.band, ep.side),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rack_ids: Vec<String> = (0..config.racks).map(SimConfig::rack_id).collect();
    let mut out = Vec::with_capacity(
        config.steps() * config.racks * (config.pdus_per_rack + config.temp_sensors + config.humidity_sensors),
    );
    for step in 0..config.steps() {
        let offset = step as i64 * config.cadence_s as i64;
        let timestamp = config.start_ts + offset;
        for (rack, rack_id) in rack_ids.iter().enumerate() {
            for channel in CHANNEL_ORDER {
                let base = config.baseline(channel);
                let phase = 2.0 * PI * offset as f64 / 86_400.0 + 0.7 * rack as f64;
                let mut signal = base.mean + base.daily_amplitude * phase.sin();
                let strongest = episodes
                    .iter()
                    .filter(|e| e.rack == rack && e.channel == channel)
                    .map(|e| (e.weight(offset), e.target))
                    .filter(|(w, _)| *w > 0.0)
                    .max_by(|a, b| a.0.total_cmp(&b.0));
                if let Some((w, target)) = strongest {
                    signal = (1.0 - w) * signal + w * target;
                }
                let (n, prefix) = match channel {
                    Metric::PowerKw => (config.pdus_per_rack, "PDU"),
                    Metric::TemperatureC => (config.temp_sensors, "T"),
                    Metric::HumidityRh => (config.humidity_sensors, "H"),
                };
                for i in 0..n {
                    let z: f64 = rng.sample(StandardNormal);
                    let dropped = config.dropout_prob > 0.0 && rng.gen_bool(config.dropout_prob);
                    let value = match channel {
                        // PDUs split the rack load; their noise sums to noise_std
                        Metric::PowerKw => signal / n as f64 + z * base.noise_std / (n as f64).sqrt(),
                        // fixed offsets between inlet probes, zero on average
                        Metric::TemperatureC => {
                            signal + 0.4 * (i as f64 - (n as f64 - 1.0) / 2.0) + z * base.noise_std
                        }
                        Metric::HumidityRh => signal + z * base.noise_std,
                    };
                    if dropped {
                        continue;
                    }
                    out.push(TelemetryPoint {
                        timestamp,
                        customer: config.customer.clone(),
                        rack_id: rack_id.clone(),
                        channel,
                        sensor_id: format!("{rack_id}-{prefix}{}", i + 1),
                        value,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rulesdb::{band_of, example_rules};
    use crate::telemetry::{build_matrix, rack_power_aggregate};

    #[test]
    fn seeded_runs_are_identical() {
        let cfg = SimConfig::scheduled(42, 2, 21_600, 7_200);
        let rules = example_rules();
        assert_eq!(simulate(&cfg, &rules).unwrap(), simulate(&cfg, &rules).unwrap());
        let other = SimConfig { seed: 43, ..cfg.clone() };
        assert_ne!(simulate(&cfg, &rules).unwrap(), simulate(&other, &rules).unwrap());
    }

    #[test]
    fn targets_sit_inside_requested_band() {
        let rules = example_rules();
        for rule in &rules {
            for band in [ViolationLevel::L1, ViolationLevel::L2] {
                for side in [BandSide::Upper, BandSide::Lower] {
                    let t = episode_target(rule, band, side);
                    assert_eq!(band_of(rule, t), band, "{} {band} {side:?} -> {t}", rule.rule_id);
                }
            }
        }
        let pwr = rules.get("CUST_A_PWR_01").unwrap();
        assert_eq!(episode_target(pwr, ViolationLevel::L1, BandSide::Upper), 32.5);
        assert_eq!(episode_target(pwr, ViolationLevel::L2, BandSide::Upper), 37.5);
    }

    #[test]
    fn power_l2_episode_exceeds_threshold() {
        let cfg = SimConfig {
            duration_s: 6 * 3600,
            episodes: vec![Episode {
                channel: Metric::PowerKw,
                rack: 0,
                start_s: 3600,
                length_s: 4 * 3600,
                band: ViolationLevel::L2,
                side: BandSide::Upper,
            }],
            ..SimConfig::default()
        };
        let rules = example_rules();
        let rule = rules.get("CUST_A_PWR_01").unwrap();
        let pts: Vec<_> = simulate(&cfg, &rules)
            .unwrap()
            .into_iter()
            .filter(|p| p.channel == Metric::PowerKw)
            .collect();
        let agg = rack_power_aggregate(&pts, 30).unwrap().series;
        // 5-min means across the plateau, between the two ramps
        let ramp = cfg.ramp_s as usize;
        let plateau_start = (3600 + ramp) / 30;
        let plateau_end = (3600 + 4 * 3600 - ramp) / 30;
        let mut means = Vec::new();
        for s in (plateau_start..plateau_end).step_by(10) {
            let m: f64 = (s..s + 10).map(|i| agg.values[i].unwrap()).sum::<f64>() / 10.0;
            means.push(m);
        }
        assert!(!means.is_empty());
        assert!(means.iter().all(|&m| m > 35.0 && band_of(rule, m) == ViolationLevel::L2), "{means:?}");
    }

    #[test]
    fn no_gaps_without_dropout() {
        let cfg = SimConfig { duration_s: 3600, racks: 1, ..SimConfig::default() };
        let pts = simulate(&cfg, &example_rules()).unwrap();
        let m = build_matrix(&pts, 30).unwrap();
        assert_eq!(m.steps(), 120);
        assert!(m.rows.iter().all(Option::is_some));
        assert!(m.partial.iter().all(|p| !p));
    }

    #[test]
    fn dropout_produces_partial_bins() {
        let cfg = SimConfig { duration_s: 3600, dropout_prob: 0.2, ..SimConfig::default() };
        let pts = simulate(&cfg, &example_rules()).unwrap();
        let m = build_matrix(&pts, 30).unwrap();
        assert!(m.partial.iter().any(|&p| p));
    }

    #[test]
    fn bad_episodes_rejected() {
        let mut cfg = SimConfig::default();
        cfg.episodes.push(Episode {
            channel: Metric::HumidityRh,
            rack: 0,
            start_s: 86_000,
            length_s: 1_000,
            band: ViolationLevel::L1,
            side: BandSide::Upper,
        });
        assert_eq!(simulate(&cfg, &example_rules()), Err(SimError::EpisodeOutOfRange { index: 0 }));
        cfg.episodes[0].start_s = 0;
        cfg.episodes[0].rack = 3;
        assert!(matches!(simulate(&cfg, &example_rules()), Err(SimError::UnknownRack { .. })));
    }
}

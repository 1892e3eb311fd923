//! Measurable variables of the moving and idle energy models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trip_data::{interval_km, Segment, SpeedSample};

const KMH_TO_MS: f64 = 1.0 / 3.6;

/// Duration, mean magnitude and standard deviation of the accelerating (or
/// decelerating) sample intervals of a segment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AccelTuple {
    /// s
    pub duration: f64,
    /// m/s², magnitude
    pub mean: f64,
    /// m/s²
    pub std: f64,
}

impl AccelTuple {
    pub fn components(&self) -> [f64; 3] {
        [self.duration, self.mean, self.std]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentFeatures {
    /// Continuous average speed (idle excluded), km/h.
    pub speed: f64,
    pub decel: AccelTuple,
    pub accel: AccelTuple,
    /// Mean |gyro| over moving samples, rad/s.
    pub gyro: f64,
    /// Auxiliary idle load, kW.
    pub idle_load: f64,
    /// Total idle duration, s.
    pub idle_time: f64,
    /// Outdoor temperature, °C.
    pub temperature: f64,
}

/// One scalar feature channel of [`SegmentFeatures`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Speed,
    DecelDuration,
    DecelMean,
    DecelStd,
    AccelDuration,
    AccelMean,
    AccelStd,
    Gyro,
    IdleTime,
    IdleLoad,
    Temperature,
}

impl Channel {
    pub const ALL: [Channel; 11] = [
        Channel::Speed,
        Channel::DecelDuration,
        Channel::DecelMean,
        Channel::DecelStd,
        Channel::AccelDuration,
        Channel::AccelMean,
        Channel::AccelStd,
        Channel::Gyro,
        Channel::IdleTime,
        Channel::IdleLoad,
        Channel::Temperature,
    ];

    /// Channels that are interpolated from other pairs' data. The idle load
    /// always comes from the target itself and temperature is a property of
    /// the environment only.
    pub const INTERPOLATED: [Channel; 9] = [
        Channel::Speed,
        Channel::DecelDuration,
        Channel::DecelMean,
        Channel::DecelStd,
        Channel::AccelDuration,
        Channel::AccelMean,
        Channel::AccelStd,
        Channel::Gyro,
        Channel::IdleTime,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Speed => "v",
            Channel::DecelDuration => "tau_d",
            Channel::DecelMean => "mu_d",
            Channel::DecelStd => "sigma_d",
            Channel::AccelDuration => "tau_a",
            Channel::AccelMean => "mu_a",
            Channel::AccelStd => "sigma_a",
            Channel::Gyro => "g",
            Channel::IdleTime => "mu_idle",
            Channel::IdleLoad => "l",
            Channel::Temperature => "omega",
        }
    }

    pub fn from_name(name: &str) -> Option<Channel> {
        Channel::ALL.into_iter().find(|c| c.name() == name)
    }

    /// Lower physical bound, if any.
    pub fn floor(self) -> Option<f64> {
        match self {
            Channel::Temperature => None,
            _ => Some(0.0),
        }
    }
}

impl SegmentFeatures {
    pub fn get(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Speed => self.speed,
            Channel::DecelDuration => self.decel.duration,
            Channel::DecelMean => self.decel.mean,
            Channel::DecelStd => self.decel.std,
            Channel::AccelDuration => self.accel.duration,
            Channel::AccelMean => self.accel.mean,
            Channel::AccelStd => self.accel.std,
            Channel::Gyro => self.gyro,
            Channel::IdleTime => self.idle_time,
            Channel::IdleLoad => self.idle_load,
            Channel::Temperature => self.temperature,
        }
    }

    pub fn set(&mut self, channel: Channel, value: f64) {
        let slot = match channel {
            Channel::Speed => &mut self.speed,
            Channel::DecelDuration => &mut self.decel.duration,
            Channel::DecelMean => &mut self.decel.mean,
            Channel::DecelStd => &mut self.decel.std,
            Channel::AccelDuration => &mut self.accel.duration,
            Channel::AccelMean => &mut self.accel.mean,
            Channel::AccelStd => &mut self.accel.std,
            Channel::Gyro => &mut self.gyro,
            Channel::IdleTime => &mut self.idle_time,
            Channel::IdleLoad => &mut self.idle_load,
            Channel::Temperature => &mut self.temperature,
        };
        *slot = value;
    }

    /// Channel-wise arithmetic mean. `None` for an empty input.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a SegmentFeatures>) -> Option<Self> {
        Self::weighted_mean(items.into_iter().map(|f| (f, 1.0)))
    }

    pub fn weighted_mean<'a>(
        items: impl IntoIterator<Item = (&'a SegmentFeatures, f64)>,
    ) -> Option<Self> {
        let mut acc = SegmentFeatures::default();
        let mut total = 0.0;
        for (f, w) in items {
            for c in Channel::ALL {
                acc.set(c, acc.get(c) + w * f.get(c));
            }
            total += w;
        }
        if total <= 0.0 {
            return None;
        }
        for c in Channel::ALL {
            acc.set(c, acc.get(c) / total);
        }
        Some(acc)
    }

    pub fn is_finite(&self) -> bool {
        Channel::ALL.iter().all(|&c| self.get(c).is_finite())
    }
}

/// Fallbacks for channels a trace does not carry, and the idle detector
/// thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureDefaults {
    /// kW, used when no aux channel is present.
    pub idle_load: f64,
    /// °C, used when the trip has no ambient temperature.
    pub temperature: f64,
    /// Speeds below this (km/h) count as stationary.
    pub idle_speed: f64,
    /// Minimum duration (s) of a stationary run to count as idling.
    pub idle_min_duration: f64,
}

impl Default for FeatureDefaults {
    fn default() -> Self {
        Self {
            idle_load: 0.5,
            temperature: 25.0,
            idle_speed: 1.0,
            idle_min_duration: 3.0,
        }
    }
}

/// Maximal runs of consecutive stationary samples lasting at least
/// `idle_min_duration`, as inclusive index ranges.
pub fn idle_runs(samples: &[SpeedSample], defaults: &FeatureDefaults) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < samples.len() {
        if samples[i].speed >= defaults.idle_speed {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < samples.len() && samples[i + 1].speed < defaults.idle_speed {
            i += 1;
        }
        if samples[i].t - samples[start].t >= defaults.idle_min_duration {
            runs.push((start, i));
        }
        i += 1;
    }
    runs
}

/// Per-sample and per-interval idle membership derived from [`idle_runs`].
struct IdleMask {
    sample: Vec<bool>,
    /// `interval[j]` covers samples `j` and `j + 1`.
    interval: Vec<bool>,
    time: f64,
}

fn idle_mask(samples: &[SpeedSample], defaults: &FeatureDefaults) -> IdleMask {
    let mut sample = vec![false; samples.len()];
    let mut interval = vec![false; samples.len().saturating_sub(1)];
    let mut time = 0.0;
    for (a, b) in idle_runs(samples, defaults) {
        sample[a..=b].iter_mut().for_each(|s| *s = true);
        interval[a..b].iter_mut().for_each(|s| *s = true);
        time += samples[b].t - samples[a].t;
    }
    IdleMask {
        sample,
        interval,
        time,
    }
}

fn accel_tuple(parts: &[(f64, f64)]) -> AccelTuple {
    // (magnitude, dt) pairs, time-weighted
    let duration: f64 = parts.iter().map(|&(_, dt)| dt).sum();
    if duration <= 0.0 {
        return AccelTuple::default();
    }
    let mean = parts.iter().map(|&(a, dt)| a * dt).sum::<f64>() / duration;
    let var = parts
        .iter()
        .map(|&(a, dt)| (a - mean).powi(2) * dt)
        .sum::<f64>()
        / duration;
    AccelTuple {
        duration,
        mean,
        std: var.max(0.0).sqrt(),
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn extract_features(seg: &Segment, defaults: &FeatureDefaults) -> Result<SegmentFeatures> {
    let samples = &seg.samples;
    if samples.len() < 2 {
        return Err(Error::DegenerateSegment(seg.key.to_string()));
    }
    let idle = idle_mask(samples, defaults);
    let moving_time = seg.duration() - idle.time;
    if moving_time <= 0.0 {
        return Err(Error::DegenerateSegment(seg.key.to_string()));
    }

    let mut acc = Vec::new();
    let mut dec = Vec::new();
    for w in samples.windows(2) {
        let dt = w[1].t - w[0].t;
        let a = (w[1].speed - w[0].speed) * KMH_TO_MS / dt;
        if a > 0.0 {
            acc.push((a, dt));
        } else if a < 0.0 {
            dec.push((-a, dt));
        }
    }

    let gyro = mean_of(
        samples
            .iter()
            .zip(&idle.sample)
            .filter(|(_, &is_idle)| !is_idle)
            .filter_map(|(s, _)| s.gyro.map(f64::abs)),
    )
    .unwrap_or(0.0);

    let idle_load = mean_of(
        samples
            .iter()
            .zip(&idle.sample)
            .filter(|(_, &is_idle)| is_idle)
            .filter_map(|(s, _)| s.aux_load),
    )
    .or_else(|| mean_of(samples.iter().filter_map(|s| s.aux_load)))
    .unwrap_or(defaults.idle_load);

    Ok(SegmentFeatures {
        speed: seg.distance / (moving_time / 3600.0),
        decel: accel_tuple(&dec),
        accel: accel_tuple(&acc),
        gyro,
        idle_load,
        idle_time: idle.time,
        temperature: seg.ambient_temp.unwrap_or(defaults.temperature),
    })
}

/// Measured energy of a segment split into moving and idle parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergySplit {
    pub total: f64,
    pub idle: f64,
}

impl EnergySplit {
    pub fn moving(&self) -> f64 {
        self.total - self.idle
    }
}

/// Ground-truth energy of a segment from its cumulative energy channel. Idle
/// energy is whatever was consumed inside detected idle runs.
pub fn measured_energy(seg: &Segment, defaults: &FeatureDefaults) -> Option<EnergySplit> {
    let samples = &seg.samples;
    let first = samples.first()?.energy_cum?;
    let last = samples.last()?.energy_cum?;
    let mask = idle_mask(samples, defaults);
    let mut idle = 0.0;
    for (j, w) in samples.windows(2).enumerate() {
        if mask.interval[j] {
            idle += w[1].energy_cum? - w[0].energy_cum?;
        }
    }
    Some(EnergySplit {
        total: last - first,
        idle,
    })
}

/// Speed resampled against travelled distance on a uniform grid (metres),
/// starting at 0 and ending at or before the segment end.
pub fn speed_distance_profile(samples: &[SpeedSample], grid_m: f64) -> Vec<f64> {
    if samples.is_empty() {
        return Vec::new();
    }
    let mut cum = Vec::with_capacity(samples.len());
    cum.push(0.0);
    for w in samples.windows(2) {
        cum.push(cum.last().unwrap() + interval_km(&w[0], &w[1]) * 1000.0);
    }
    let total = *cum.last().unwrap();
    let n = (total / grid_m + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for i in 0..n {
        let x = i as f64 * grid_m;
        while j + 1 < cum.len() && cum[j + 1] < x {
            j += 1;
        }
        if j + 1 >= cum.len() {
            out.push(samples[j].speed);
            continue;
        }
        let span = cum[j + 1] - cum[j];
        let s = if span > 0.0 { (x - cum[j]) / span } else { 0.0 };
        out.push(samples[j].speed + (samples[j + 1].speed - samples[j].speed) * s.clamp(0.0, 1.0));
    }
    out
}

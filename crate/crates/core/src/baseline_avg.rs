//! Fleet-average features per segment and the personal quadratic adjustment
//! that maps them onto one (driver, vehicle) pair.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::energy_model::ridge_lstsq;
use crate::error::{Error, Result};
use crate::features::{Channel, SegmentFeatures};
use crate::trip_data::PairKey;

/// Channel-wise mean over every pair's features on `segment_id`.
pub fn segment_average(dataset: &Dataset, segment_id: &str) -> Result<SegmentFeatures> {
    SegmentFeatures::mean(
        dataset
            .observers_of(segment_id)
            .filter_map(|p| dataset.observation(p, segment_id))
            .map(|o| &o.features),
    )
    .ok_or_else(|| Error::MissingData(format!("segment {segment_id} has no observations")))
}

/// `η1 f̄² + η2 f̄ + η3` for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentFn {
    pub eta: [f64; 3],
    pub channel: Channel,
}

impl AdjustmentFn {
    pub fn identity(channel: Channel) -> Self {
        Self {
            eta: [0.0, 1.0, 0.0],
            channel,
        }
    }

    fn raw(&self, avg: f64) -> f64 {
        let [a, b, c] = self.eta;
        a * avg * avg + b * avg + c
    }
}

/// Least-squares quadratic of personal on average values. With only two
/// distinct averages the quadratic term is dropped.
pub fn fit_adjustment(pairs: &[(f64, f64)], channel: Channel) -> Result<AdjustmentFn> {
    if pairs.len() < 3 {
        return Err(Error::Argument(format!(
            "{}: adjustment needs at least 3 pairs, got {}",
            channel.name(),
            pairs.len()
        )));
    }
    if pairs.iter().any(|(a, p)| !a.is_finite() || !p.is_finite()) {
        return Err(Error::Argument(format!(
            "{}: non-finite adjustment data",
            channel.name()
        )));
    }
    let mut distinct: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let rank_err = |e: Error| match e {
        Error::Numeric(m) => Error::Rank(format!("{}: {m}", channel.name())),
        other => other,
    };
    let eta = match distinct.len() {
        1 => {
            return Err(Error::Rank(format!(
                "{}: all average values are equal",
                channel.name()
            )))
        }
        2 => {
            let rows: Vec<Vec<f64>> = pairs.iter().map(|(a, _)| vec![*a, 1.0]).collect();
            let s = ridge_lstsq(&rows, &y, 0.0).map_err(rank_err)?;
            [0.0, s[0], s[1]]
        }
        _ => {
            let rows: Vec<Vec<f64>> = pairs.iter().map(|(a, _)| vec![a * a, *a, 1.0]).collect();
            let s = ridge_lstsq(&rows, &y, 0.0).map_err(rank_err)?;
            [s[0], s[1], s[2]]
        }
    };
    Ok(AdjustmentFn { eta, channel })
}

/// Evaluates the adjustment and clamps to the channel's physical floor.
/// Returns the value and whether it was clamped.
pub fn apply_adjustment(f: &AdjustmentFn, avg: f64) -> (f64, bool) {
    let v = f.raw(avg);
    match f.channel.floor() {
        Some(floor) if v < floor => (floor, true),
        _ => (v, false),
    }
}

/// One adjustment per interpolated channel for a single pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalAdjustment {
    pub pair: PairKey,
    pub functions: BTreeMap<Channel, AdjustmentFn>,
    pub warnings: Vec<String>,
}

impl PersonalAdjustment {
    /// Fits `pair`'s adjustments against the mean of the *other* pairs on
    /// every segment `pair` observed. Channels that cannot be fitted fall
    /// back to the identity.
    pub fn fit(dataset: &Dataset, pair: &PairKey) -> Result<Self> {
        let mut rows: Vec<(SegmentFeatures, SegmentFeatures)> = Vec::new();
        for obs in dataset.observations_of(pair) {
            let seg = &obs.key.segment_id;
            let others = SegmentFeatures::mean(
                dataset
                    .observers_of(seg)
                    .filter(|p| *p != pair)
                    .filter_map(|p| dataset.observation(p, seg))
                    .map(|o| &o.features),
            );
            if let Some(avg) = others {
                rows.push((avg, obs.features));
            }
        }
        let mut functions = BTreeMap::new();
        let mut warnings = Vec::new();
        for channel in Channel::INTERPOLATED {
            let pairs: Vec<(f64, f64)> = rows
                .iter()
                .map(|(a, p)| (a.get(channel), p.get(channel)))
                .collect();
            let f = match fit_adjustment(&pairs, channel) {
                Ok(f) => f,
                Err(e) => {
                    warnings.push(format!("{pair}: {e}; using identity"));
                    AdjustmentFn::identity(channel)
                }
            };
            functions.insert(channel, f);
        }
        Ok(Self {
            pair: pair.clone(),
            functions,
            warnings,
        })
    }

    /// Applies every fitted channel to `avg`; other channels pass through.
    pub fn apply(&self, avg: &SegmentFeatures) -> (SegmentFeatures, Vec<Channel>) {
        let mut out = *avg;
        let mut clamped = Vec::new();
        for (channel, f) in &self.functions {
            let (v, c) = apply_adjustment(f, avg.get(*channel));
            if c {
                clamped.push(*channel);
            }
            out.set(*channel, v);
        }
        (out, clamped)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn identity_relation() {
        let pairs: Vec<_> = [10.0, 20.0, 35.0, 50.0].iter().map(|&a| (a, a)).collect();
        let f = fit_adjustment(&pairs, Channel::Speed).unwrap();
        assert!(close(f.eta, [0.0, 1.0, 0.0], 1e-9));
    }

    #[test]
    fn linear_relation() {
        let pairs: Vec<_> = [10.0, 20.0, 35.0].iter().map(|&a| (a, 1.1 * a)).collect();
        let f = fit_adjustment(&pairs, Channel::Speed).unwrap();
        assert!(close(f.eta, [0.0, 1.1, 0.0], 1e-6));
        assert!(
            (apply_adjustment(
                &AdjustmentFn {
                    eta: [0.0, 1.1, 0.0],
                    channel: Channel::Speed
                },
                50.0
            )
            .0 - 55.0)
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn quadratic_relation() {
        let pairs: Vec<_> = [0.5, 1.0, 2.0, 3.0].iter().map(|&a| (a, a * a)).collect();
        let f = fit_adjustment(&pairs, Channel::AccelMean).unwrap();
        assert!(close(f.eta, [1.0, 0.0, 0.0], 1e-6));
    }

    #[test]
    fn degenerate_design() {
        let pairs = [(3.0, 1.0), (3.0, 2.0), (3.0, 4.0)];
        assert!(matches!(
            fit_adjustment(&pairs, Channel::Gyro),
            Err(Error::Rank(_))
        ));
        assert!(fit_adjustment(&pairs[..2], Channel::Gyro).is_err());
    }

    #[test]
    fn clamp_to_floor() {
        let f = AdjustmentFn {
            eta: [0.0, 0.0, -0.2],
            channel: Channel::Gyro,
        };
        assert_eq!(apply_adjustment(&f, 1.0), (0.0, true));
        let t = AdjustmentFn {
            eta: [0.0, 0.0, -0.2],
            channel: Channel::Temperature,
        };
        assert_eq!(apply_adjustment(&t, 1.0), (-0.2, false));
        assert_eq!(
            apply_adjustment(&AdjustmentFn::identity(Channel::Speed), 42.0).0,
            42.0
        );
    }
}

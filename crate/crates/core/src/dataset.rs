//! The participatory-sensing dataset: one observation per
//! (driver, vehicle, segment) data point.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::energy_model::TrainingSample;
use crate::error::{Error, Result};
use crate::features::{
    extract_features, measured_energy, speed_distance_profile, EnergySplit, FeatureDefaults,
    SegmentFeatures,
};
use crate::trip_data::{DataPointKey, PairKey, Segment};

/// Spacing of the speed-vs-distance profiles used for profile matching.
pub const PROFILE_GRID_M: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub key: DataPointKey,
    pub features: SegmentFeatures,
    pub energy: Option<EnergySplit>,
    /// Speed (km/h) on a [`PROFILE_GRID_M`] distance grid.
    pub profile: Vec<f64>,
    /// km
    pub distance: f64,
    pub sample_count: usize,
}

impl Observation {
    pub fn from_segment(seg: &Segment, defaults: &FeatureDefaults) -> Result<Self> {
        Ok(Self {
            key: seg.key.clone(),
            features: extract_features(seg, defaults)?,
            energy: measured_energy(seg, defaults),
            profile: speed_distance_profile(&seg.samples, PROFILE_GRID_M),
            distance: seg.distance,
            sample_count: seg.samples.len(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    observations: BTreeMap<DataPointKey, Observation>,
    by_segment: BTreeMap<String, BTreeSet<PairKey>>,
    by_pair: BTreeMap<PairKey, BTreeSet<String>>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a dataset from segments, skipping (and reporting) degenerate ones.
    pub fn from_segments<'a>(
        segments: impl IntoIterator<Item = &'a Segment>,
        defaults: &FeatureDefaults,
    ) -> Result<(Self, Vec<String>)> {
        let mut ds = Self::new();
        let mut warnings = Vec::new();
        for seg in segments {
            match Observation::from_segment(seg, defaults) {
                Ok(obs) => ds.insert(obs)?,
                Err(Error::DegenerateSegment(key)) => {
                    warnings.push(format!("skipped degenerate segment {key}"))
                }
                Err(e) => return Err(e),
            }
        }
        Ok((ds, warnings))
    }

    pub fn insert(&mut self, obs: Observation) -> Result<()> {
        if self.observations.contains_key(&obs.key) {
            return Err(Error::Argument(format!("duplicate data point {}", obs.key)));
        }
        let pair = obs.key.pair();
        self.by_segment
            .entry(obs.key.segment_id.clone())
            .or_default()
            .insert(pair.clone());
        self.by_pair
            .entry(pair)
            .or_default()
            .insert(obs.key.segment_id.clone());
        self.observations.insert(obs.key.clone(), obs);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn get(&self, key: &DataPointKey) -> Option<&Observation> {
        self.observations.get(key)
    }

    pub fn observation(&self, pair: &PairKey, segment_id: &str) -> Option<&Observation> {
        self.observations.get(&pair.on(segment_id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Observation> {
        self.observations.values()
    }

    /// Pairs in lexicographic order.
    pub fn pairs(&self) -> impl Iterator<Item = &PairKey> {
        self.by_pair.keys()
    }

    /// Segment ids in lexicographic order.
    pub fn segment_ids(&self) -> impl Iterator<Item = &String> {
        self.by_segment.keys()
    }

    /// Segment ids observed by `pair`.
    pub fn segments_of(&self, pair: &PairKey) -> impl Iterator<Item = &String> {
        self.by_pair.get(pair).into_iter().flatten()
    }

    /// Pairs that observed `segment_id`.
    pub fn observers_of(&self, segment_id: &str) -> impl Iterator<Item = &PairKey> {
        self.by_segment.get(segment_id).into_iter().flatten()
    }

    pub fn observations_of<'a>(
        &'a self,
        pair: &'a PairKey,
    ) -> impl Iterator<Item = &'a Observation> {
        self.segments_of(pair)
            .filter_map(move |s| self.observations.get(&pair.on(s.as_str())))
    }

    /// A copy without the given data points.
    pub fn without<'a>(&self, keys: impl IntoIterator<Item = &'a DataPointKey>) -> Self {
        let drop: BTreeSet<&DataPointKey> = keys.into_iter().collect();
        let mut out = Self::new();
        for obs in self.observations.values() {
            if !drop.contains(&obs.key) {
                out.insert(obs.clone()).expect("keys are unique");
            }
        }
        out
    }

    /// Observations of `pair` that carry measured energy.
    pub fn training_samples(&self, pair: &PairKey) -> Vec<TrainingSample> {
        self.observations_of(pair)
            .filter_map(|o| {
                o.energy.map(|energy| TrainingSample {
                    features: o.features,
                    energy,
                })
            })
            .collect()
    }

    /// Mean observed distance of a segment, km.
    pub fn segment_distance(&self, segment_id: &str) -> Option<f64> {
        let ds: Vec<f64> = self
            .observers_of(segment_id)
            .filter_map(|p| self.observation(p, segment_id))
            .map(|o| o.distance)
            .collect();
        (!ds.is_empty()).then(|| ds.iter().sum::<f64>() / ds.len() as f64)
    }
}

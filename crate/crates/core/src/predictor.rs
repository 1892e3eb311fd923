//! Route energy prediction for one (driver, vehicle) pair by substituting
//! parameters from other data points, and distance-to-empty.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baseline_avg::{segment_average, PersonalAdjustment};
use crate::collab_filter::{impute_features, MfParams};
use crate::dataset::Dataset;
use crate::energy_model::{error_metrics, predict_total, EnergyModel, ErrorMetrics};
use crate::error::{Error, Result};
use crate::features::{Channel, SegmentFeatures};
use crate::similarity::{habit_tuple, knn_by_habit, knn_by_profile, HabitTuple, Neighbors};
use crate::trip_data::{DataPointKey, PairKey};

/// What a parameter or coefficient depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dependence {
    Driver,
    Vehicle,
    Environment,
}

/// Parameters and coefficients of the energy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Speed,
    Decel,
    Accel,
    Gyro,
    IdleLoad,
    IdleTime,
    Temperature,
    AlphaSpeed,
    AlphaDecel,
    AlphaAccel,
    AlphaGyro,
    AlphaLoad,
    Constant,
    Beta1,
    Beta2,
}

impl Factor {
    pub const PARAMETERS: [Factor; 7] = [
        Factor::Speed,
        Factor::Decel,
        Factor::Accel,
        Factor::Gyro,
        Factor::IdleLoad,
        Factor::IdleTime,
        Factor::Temperature,
    ];
    pub const COEFFICIENTS: [Factor; 8] = [
        Factor::AlphaSpeed,
        Factor::AlphaDecel,
        Factor::AlphaAccel,
        Factor::AlphaGyro,
        Factor::AlphaLoad,
        Factor::Constant,
        Factor::Beta1,
        Factor::Beta2,
    ];

    /// Feature channels carried by a parameter.
    pub fn channels(self) -> &'static [Channel] {
        match self {
            Factor::Speed => &[Channel::Speed],
            Factor::Decel => &[
                Channel::DecelDuration,
                Channel::DecelMean,
                Channel::DecelStd,
            ],
            Factor::Accel => &[
                Channel::AccelDuration,
                Channel::AccelMean,
                Channel::AccelStd,
            ],
            Factor::Gyro => &[Channel::Gyro],
            Factor::IdleLoad => &[Channel::IdleLoad],
            Factor::IdleTime => &[Channel::IdleTime],
            Factor::Temperature => &[Channel::Temperature],
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependenceTable {
    pub flags: BTreeMap<Factor, BTreeSet<Dependence>>,
    /// Environment-dependent parameters that are still taken from the target.
    pub target_retained: BTreeSet<Factor>,
}

impl Default for DependenceTable {
    fn default() -> Self {
        use Dependence::*;
        let de = BTreeSet::from([Driver, Environment]);
        let mut flags = BTreeMap::new();
        for f in [
            Factor::Speed,
            Factor::Decel,
            Factor::Accel,
            Factor::Gyro,
            Factor::IdleLoad,
        ] {
            flags.insert(f, de.clone());
        }
        for f in [Factor::IdleTime, Factor::Temperature] {
            flags.insert(f, BTreeSet::from([Environment]));
        }
        for f in &Factor::COEFFICIENTS[..6] {
            flags.insert(*f, BTreeSet::from([Vehicle]));
        }
        for f in [Factor::Beta1, Factor::Beta2] {
            flags.insert(f, BTreeSet::from([Driver, Vehicle]));
        }
        Self {
            flags,
            target_retained: BTreeSet::from([Factor::IdleLoad]),
        }
    }
}

impl DependenceTable {
    pub fn validate(&self) -> Result<()> {
        for f in Factor::PARAMETERS.iter().chain(&Factor::COEFFICIENTS) {
            if !self.flags.contains_key(f) {
                return Err(Error::Argument(format!("dependence table lacks {f:?}")));
            }
        }
        for f in Factor::COEFFICIENTS {
            if self.flags[&f].contains(&Dependence::Environment) {
                return Err(Error::Argument(format!(
                    "coefficient {f:?} cannot depend on the environment"
                )));
            }
        }
        Ok(())
    }

    /// Whether parameter `f` is read from the donor.
    pub fn from_donor(&self, f: Factor) -> bool {
        self.flags
            .get(&f)
            .is_some_and(|s| s.contains(&Dependence::Environment))
            && !self.target_retained.contains(&f)
    }
}

/// The target's own idle load on a segment: its observation there, else the
/// mean over its history.
pub fn target_idle_load(dataset: &Dataset, target: &DataPointKey) -> Option<f64> {
    if let Some(o) = dataset.get(target) {
        return Some(o.features.idle_load);
    }
    let pair = target.pair();
    SegmentFeatures::mean(dataset.observations_of(&pair).map(|o| &o.features)).map(|m| m.idle_load)
}

/// Combines source features (from a donor or an aggregate) with the target's
/// retained parameters.
pub fn assemble(
    source: &SegmentFeatures,
    target_own: &SegmentFeatures,
    table: &DependenceTable,
) -> SegmentFeatures {
    let mut out = *target_own;
    for f in Factor::PARAMETERS {
        if table.from_donor(f) {
            for &c in f.channels() {
                out.set(c, source.get(c));
            }
        }
    }
    out
}

/// Model and inputs for predicting `target` from `donor`'s observation on
/// the same segment.
pub fn substitute(
    target: &DataPointKey,
    donor: &DataPointKey,
    table: &DependenceTable,
    dataset: &Dataset,
    models: &BTreeMap<PairKey, EnergyModel>,
) -> Result<(EnergyModel, SegmentFeatures)> {
    table.validate()?;
    if donor.segment_id != target.segment_id {
        return Err(Error::Argument(format!(
            "donor segment {} differs from target segment {}",
            donor.segment_id, target.segment_id
        )));
    }
    let model = models
        .get(&target.pair())
        .ok_or_else(|| Error::Untrained(target.pair().to_string()))?;
    let obs = dataset.get(donor).ok_or_else(|| Error::MissingDonor {
        donor: donor.pair().to_string(),
        segment: donor.segment_id.clone(),
    })?;
    let own = target_features(dataset, target)?;
    Ok((model.clone(), assemble(&obs.features, &own, table)))
}

/// Target-side values for the retained parameters.
fn target_features(dataset: &Dataset, target: &DataPointKey) -> Result<SegmentFeatures> {
    if let Some(o) = dataset.get(target) {
        return Ok(o.features);
    }
    let load = target_idle_load(dataset, target)
        .ok_or_else(|| Error::MissingData(format!("{} has no history", target.pair())))?;
    Ok(SegmentFeatures {
        idle_load: load,
        ..SegmentFeatures::default()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Approach {
    Spm { k: usize },
    Dhm { k: usize },
    Mf,
    Avg,
    Adj,
    SelfEst,
}

impl Approach {
    pub fn tag(&self) -> &'static str {
        match self {
            Approach::Spm { .. } => "spm",
            Approach::Dhm { .. } => "dhm",
            Approach::Mf => "mf",
            Approach::Avg => "avg",
            Approach::Adj => "adj",
            Approach::SelfEst => "self",
        }
    }

    /// Parses a tag; `k` applies to the neighbor approaches.
    pub fn parse(tag: &str, k: usize) -> Result<Self> {
        let a = match tag.to_ascii_lowercase().as_str() {
            "spm" => Approach::Spm { k },
            "dhm" => Approach::Dhm { k },
            "mf" => Approach::Mf,
            "avg" => Approach::Avg,
            "adj" => Approach::Adj,
            "self" | "self-est" | "selfest" => Approach::SelfEst,
            other => {
                return Err(Error::Argument(format!(
                    "unknown approach '{other}' (expected spm, dhm, mf, avg, adj, self)"
                )))
            }
        };
        if let Approach::Spm { k: 0 } | Approach::Dhm { k: 0 } = a {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        Ok(a)
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Approach::Spm { k } | Approach::Dhm { k } => write!(f, "{}({k})", self.tag()),
            _ => f.write_str(self.tag()),
        }
    }
}

impl FromStr for Approach {
    type Err = Error;

    /// Accepts `spm`, `spm(3)`, `dhm(2)`, `mf`, `avg`, `adj`, `self`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((tag, rest)) = s.split_once('(') {
            let k = rest
                .strip_suffix(')')
                .and_then(|k| k.trim().parse().ok())
                .ok_or_else(|| Error::Argument(format!("malformed approach '{s}'")))?;
            Approach::parse(tag, k)
        } else {
            Approach::parse(s, 3)
        }
    }
}

/// How the features of several neighbors on one segment are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    InverseDistance,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "inverse-distance" | "idw" => Ok(Aggregation::InverseDistance),
            _ => Err(Error::Argument(format!("unknown aggregation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictParams {
    pub mf: MfParams,
    pub aggregation: Aggregation,
    pub table: DependenceTable,
}

impl Default for PredictParams {
    fn default() -> Self {
        Self {
            mf: MfParams::default(),
            aggregation: Aggregation::Mean,
            table: DependenceTable::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPrediction {
    pub segment_id: String,
    /// kWh; `None` for an excluded segment.
    pub e_hat: Option<f64>,
    /// kWh, when the target observed the segment.
    pub e_true: Option<f64>,
    pub eps: Option<f64>,
    /// km
    pub distance: Option<f64>,
    pub excluded: bool,
    /// Where the features came from.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub target: PairKey,
    pub approach: String,
    pub segments: Vec<SegmentPrediction>,
    /// Sum of `e_hat` over included segments, kWh.
    pub total_hat: f64,
    /// Sum of `e_true` over included segments, when every one has it.
    pub total_true: Option<f64>,
    /// Distance of the included segments, km.
    pub distance: f64,
    /// Errors over included segments, when every one has ground truth.
    pub metrics: Option<ErrorMetrics>,
    pub provenance: Vec<String>,
    pub warnings: Vec<String>,
}

impl PredictionReport {
    /// Predicted average energy intensity over the route, kWh/km.
    pub fn power_intensity(&self) -> Result<f64> {
        if self.distance <= 0.0 {
            return Err(Error::Argument("report covers no distance".into()));
        }
        Ok(self.total_hat / self.distance)
    }

    /// Measured intensity over the same included segments, kWh/km.
    pub fn true_power_intensity(&self) -> Option<f64> {
        (self.distance > 0.0)
            .then_some(self.total_true?)
            .map(|t| t / self.distance)
    }
}

/// Writes one row per segment.
pub fn write_report_csv<W: Write>(writer: W, report: &PredictionReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "segment_id",
        "approach",
        "E_hat_kwh",
        "E_true_kwh",
        "eps_i",
        "excluded",
        "source",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in &report.segments {
        w.write_record([
            s.segment_id.clone(),
            report.approach.clone(),
            opt(s.e_hat),
            opt(s.e_true),
            opt(s.eps),
            s.excluded.to_string(),
            s.source.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn combine(
    sources: &[(&SegmentFeatures, f64)],
    aggregation: Aggregation,
) -> Option<SegmentFeatures> {
    match aggregation {
        Aggregation::Mean => SegmentFeatures::mean(sources.iter().map(|(f, _)| *f)),
        Aggregation::InverseDistance => {
            SegmentFeatures::weighted_mean(sources.iter().map(|(f, d)| (*f, 1.0 / (d + 1e-12))))
        }
    }
}

/// Features per route segment from the `k` nearest neighbors that observed
/// it, walking down the full ranking.
fn neighbor_sources(
    ranking: &Neighbors,
    k: usize,
    route: &[String],
    dataset: &Dataset,
    aggregation: Aggregation,
) -> Vec<Option<(SegmentFeatures, String)>> {
    route
        .iter()
        .map(|seg| {
            let picked: Vec<(&PairKey, &SegmentFeatures, f64)> = ranking
                .ranked
                .iter()
                .filter_map(|(p, d)| dataset.observation(p, seg).map(|o| (p, &o.features, *d)))
                .take(k)
                .collect();
            let feats: Vec<(&SegmentFeatures, f64)> =
                picked.iter().map(|(_, f, d)| (*f, *d)).collect();
            let names: Vec<String> = picked.iter().map(|(p, _, _)| p.to_string()).collect();
            combine(&feats, aggregation).map(|f| (f, format!("donors {}", names.join(" "))))
        })
        .collect()
}

/// Predicts the target's energy on every route segment.
///
/// All approaches except self-estimation ignore the target's own
/// observations on the route, so they behave as they would on a route the
/// target never drove.
pub fn predict(
    target: &PairKey,
    route: &[String],
    approach: Approach,
    dataset: &Dataset,
    models: &BTreeMap<PairKey, EnergyModel>,
    params: &PredictParams,
) -> Result<PredictionReport> {
    if route.is_empty() {
        return Err(Error::Argument("route is empty".into()));
    }
    params.table.validate()?;
    let model = models
        .get(target)
        .ok_or_else(|| Error::Untrained(target.to_string()))?;
    let route_keys: Vec<DataPointKey> = route.iter().map(|s| target.on(s.as_str())).collect();
    let masked = dataset.without(&route_keys);
    let mut provenance = Vec::new();
    let mut warnings = Vec::new();

    let sources: Vec<Option<(SegmentFeatures, String)>> = match approach {
        Approach::SelfEst => {
            provenance.push(format!("self {target}"));
            route_keys
                .iter()
                .map(|k| dataset.get(k).map(|o| (o.features, "self".to_string())))
                .collect()
        }
        Approach::Spm { k } => {
            let candidates: Vec<PairKey> =
                masked.pairs().filter(|p| *p != target).cloned().collect();
            let ranking = knn_by_profile(target, &candidates, candidates.len(), &masked);
            provenance.push(format!(
                "profile ranking {}",
                ranking
                    .ranked
                    .iter()
                    .map(|(p, d)| format!("{p}:{d:.6}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            ));
            neighbor_sources(&ranking, k, route, &masked, params.aggregation)
        }
        Approach::Dhm { k } => {
            let own: Vec<SegmentFeatures> =
                masked.observations_of(target).map(|o| o.features).collect();
            let target_habit = if own.is_empty() {
                HabitTuple::default()
            } else {
                habit_tuple(&own)?
            };
            let candidates: Vec<(PairKey, HabitTuple)> = masked
                .pairs()
                .filter(|p| *p != target)
                .filter_map(|p| {
                    let hist: Vec<SegmentFeatures> =
                        masked.observations_of(p).map(|o| o.features).collect();
                    habit_tuple(&hist).ok().map(|h| (p.clone(), h))
                })
                .collect();
            let ranking = knn_by_habit(&target_habit, &candidates, candidates.len());
            provenance.push(format!(
                "habit ranking {}",
                ranking
                    .ranked
                    .iter()
                    .map(|(p, d)| format!("{p}:{d:.6}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            ));
            neighbor_sources(&ranking, k, route, &masked, params.aggregation)
        }
        Approach::Mf => {
            let imputed = impute_features(&masked, &route_keys, &params.mf)?;
            provenance.push(format!(
                "factorization rank {} lr {} lambda {}/{} seed {}",
                params.mf.rank,
                params.mf.learning_rate,
                params.mf.lambda_p,
                params.mf.lambda_q,
                params.mf.seed
            ));
            warnings.extend(imputed.warnings);
            route_keys
                .iter()
                .map(|k| {
                    imputed
                        .features
                        .get(k)
                        .map(|f| (*f, "factorization".to_string()))
                })
                .collect()
        }
        Approach::Avg | Approach::Adj => {
            let adjustment = if approach == Approach::Adj {
                let a = PersonalAdjustment::fit(&masked, target)?;
                warnings.extend(a.warnings.iter().cloned());
                provenance.push(format!(
                    "adjustment {}",
                    a.functions
                        .values()
                        .map(|f| format!(
                            "{}:[{:.6},{:.6},{:.6}]",
                            f.channel.name(),
                            f.eta[0],
                            f.eta[1],
                            f.eta[2]
                        ))
                        .collect::<Vec<_>>()
                        .join(" ")
                ));
                Some(a)
            } else {
                provenance.push("segment average".to_string());
                None
            };
            route
                .iter()
                .map(|seg| {
                    let avg = segment_average(&masked, seg).ok()?;
                    Some(match &adjustment {
                        Some(a) => {
                            let (f, clamped) = a.apply(&avg);
                            for c in clamped {
                                warnings.push(format!("{seg}: adjusted {} clamped", c.name()));
                            }
                            (f, "adjusted average".to_string())
                        }
                        None => (avg, "average".to_string()),
                    })
                })
                .collect()
        }
    };

    let mut segments = Vec::with_capacity(route.len());
    let (mut hats, mut truths) = (Vec::new(), Vec::new());
    let mut all_truth = true;
    let mut distance = 0.0;
    for ((seg, key), source) in route.iter().zip(&route_keys).zip(sources) {
        let own = dataset.get(key);
        let e_true = own.and_then(|o| o.energy).map(|e| e.total);
        let seg_distance = own
            .map(|o| o.distance)
            .or_else(|| dataset.segment_distance(seg));
        let prediction = match (source, seg_distance) {
            (Some((features, label)), Some(d)) => {
                let inputs = if approach == Approach::SelfEst {
                    features
                } else {
                    let own = target_features(&masked, key)?;
                    assemble(&features, &own, &params.table)
                };
                Some((predict_total(model, &inputs), label, d))
            }
            (Some(_), None) => {
                warnings.push(format!("{seg}: unknown segment length"));
                None
            }
            (None, _) => None,
        };
        match prediction {
            Some((e_hat, source, d)) => {
                hats.push(e_hat);
                match e_true {
                    Some(t) => truths.push(t),
                    None => all_truth = false,
                }
                distance += d;
                segments.push(SegmentPrediction {
                    segment_id: seg.clone(),
                    e_hat: Some(e_hat),
                    e_true,
                    eps: e_true.filter(|t| *t != 0.0).map(|t| (t - e_hat) / t),
                    distance: Some(d),
                    excluded: false,
                    source,
                });
            }
            None => {
                warnings.push(format!("{seg}: no usable source; excluded"));
                segments.push(SegmentPrediction {
                    segment_id: seg.clone(),
                    e_hat: None,
                    e_true,
                    eps: None,
                    distance: seg_distance,
                    excluded: true,
                    source: String::new(),
                });
            }
        }
    }
    if hats.is_empty() {
        return Err(Error::EmptyCoverage);
    }
    let (total_true, metrics) = if all_truth {
        let m = error_metrics(&hats, &truths).ok();
        (Some(truths.iter().sum()), m)
    } else {
        (None, None)
    };
    Ok(PredictionReport {
        target: target.clone(),
        approach: approach.to_string(),
        segments,
        total_hat: hats.iter().sum(),
        total_true,
        distance,
        metrics,
        provenance,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryState {
    /// State of charge, fraction.
    pub soc: f64,
    /// Ah
    pub capacity_ah: f64,
    /// V
    pub pack_voltage: f64,
}

impl BatteryState {
    pub fn new(soc: f64, capacity_ah: f64, pack_voltage: f64) -> Result<Self> {
        let b = Self {
            soc,
            capacity_ah,
            pack_voltage,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.soc) {
            return Err(Error::Argument(format!(
                "state of charge {} outside [0, 1]",
                self.soc
            )));
        }
        if !(self.capacity_ah > 0.0 && self.capacity_ah.is_finite())
            || !(self.pack_voltage > 0.0 && self.pack_voltage.is_finite())
        {
            return Err(Error::Argument(
                "capacity and pack voltage must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Energy left in the battery, kWh.
pub fn remaining_energy(b: &BatteryState) -> f64 {
    b.soc * b.capacity_ah * b.pack_voltage / 1000.0
}

/// Estimated distance to empty, km, at average intensity `intensity` kWh/km.
pub fn dte(b: &BatteryState, intensity: f64) -> Result<f64> {
    b.validate()?;
    dte_from_energy(remaining_energy(b), intensity)
}

pub fn dte_from_energy(energy: f64, intensity: f64) -> Result<f64> {
    if !(intensity > 0.0 && intensity.is_finite()) {
        return Err(Error::Argument(format!(
            "average power intensity must be positive, got {intensity}"
        )));
    }
    Ok(energy / intensity)
}

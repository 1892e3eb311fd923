//! Synthetic fleets with planted driver personas, vehicle models and route
//! profiles. Every generated trace comes with the exact energy the planted
//! model assigns to it, so estimators can be checked against known truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::energy_model::{predict_idle, predict_moving, EnergyModel, ModelOrder};
use crate::error::{Error, Result};
use crate::features::{extract_features, idle_runs, FeatureDefaults};
use crate::trip_data::{
    segment_trip, write_trip, DataPointKey, PairKey, Segment, SpeedSample, Trip,
};

const DT: f64 = 1.0;
const TAIL_KM: f64 = 0.05;
/// Speed below which acceleration habits switch to the low-speed rates.
const HIGH_SPEED_KMH: f64 = 80.0;

/// How a driver drives. Acceleration and braking rates grow with
/// `aggression`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    /// 0 (gentle) to 1 (aggressive).
    pub aggression: f64,
    /// Multiplier on the speed limit.
    pub speed_factor: f64,
    /// Amplitude of cruise-speed oscillation, km/h.
    pub jitter_kmh: f64,
    /// s
    pub jitter_period: f64,
    /// Whole seconds stopped at each stop.
    pub stop_dwell: u32,
    /// Auxiliary load, kW.
    pub aux_kw: f64,
}

impl Persona {
    pub fn from_aggression(aggression: f64) -> Self {
        Self {
            aggression,
            speed_factor: 0.9 + 0.15 * aggression,
            jitter_kmh: 2.0 + 5.0 * aggression,
            jitter_period: 40.0 - 15.0 * aggression,
            stop_dwell: 6,
            aux_kw: 1.0,
        }
    }

    /// m/s²
    pub fn accel_rate(&self, speed_kmh: f64) -> f64 {
        if speed_kmh < HIGH_SPEED_KMH {
            0.8 + 1.6 * self.aggression
        } else {
            0.6 + 0.9 * self.aggression
        }
    }

    /// m/s², magnitude
    pub fn decel_rate(&self, speed_kmh: f64) -> f64 {
        if speed_kmh < HIGH_SPEED_KMH {
            1.0 + 1.5 * self.aggression
        } else {
            0.8 + 1.0 * self.aggression
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.aggression)
            && self.speed_factor > 0.0
            && self.jitter_kmh >= 0.0
            && self.jitter_period > 0.0
            && self.stop_dwell >= 4
            && self.aux_kw > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid persona {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteSegmentSpec {
    pub id: String,
    /// km/h
    pub speed_limit: f64,
    /// Fraction of the segment at which the vehicle stops, if it does.
    pub stop_at: Option<f64>,
    /// Typical |yaw rate|, rad/s.
    pub curvature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteSpec {
    pub id: String,
    pub segments: Vec<RouteSegmentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetSpec {
    pub personas: Vec<Persona>,
    pub vehicles: Vec<EnergyModel>,
    /// (driver index, vehicle index) combinations that exist.
    pub pairs: Vec<(usize, usize)>,
    pub routes: Vec<RouteSpec>,
    /// Fraction of (pair, route) combinations driven; every pair drives at
    /// least one route.
    pub density: f64,
    /// Standard deviation of the additive Gaussian noise on moving energy,
    /// as a fraction of the trip's mean planted segment energy.
    pub noise: f64,
    /// Coefficient of an extra `v³` moving-energy term outside the model
    /// family; 0 disables it.
    pub misspecification: f64,
    pub seed: u64,
}

/// Linear slope plus a parabola of curvature `quad` centred on `centre`,
/// expanded into (x, x²) coefficients and a constant.
fn parabola(lin: f64, quad: f64, centre: f64) -> (f64, f64, f64) {
    (lin - 2.0 * quad * centre, quad, quad * centre * centre)
}

/// A vehicle of order (2,2,2) whose quadratic terms carry a clearly
/// measurable share of the energy, scaled by `scale`.
pub fn reference_vehicle(scale: f64) -> EnergyModel {
    vehicle_with(scale, |x| x)
}

/// Like [`reference_vehicle`], with every slope and curvature independently
/// scaled by a factor in `1 ± spread`. Energy stays positive.
pub fn random_vehicle(rng: &mut impl Rng, spread: f64) -> EnergyModel {
    let scale = rng.random_range(0.8..1.3);
    vehicle_with(scale, |x| x * (1.0 + rng.random_range(-spread..spread)))
}

fn vehicle_with(scale: f64, mut jitter: impl FnMut(f64) -> f64) -> EnergyModel {
    let mut m = EnergyModel::zeros(ModelOrder::default());
    let mut constant = 0.1;
    let mut term = |lin: f64, quad: f64, centre: f64| {
        let (a, b, c) = parabola(jitter(lin), jitter(quad), centre);
        constant += c;
        (a * scale, b * scale)
    };
    let v = term(4e-3, 1.5e-3, 45.0);
    let decel = [
        term(1e-3, 8e-5, 45.0),
        term(0.05, 1.0, 0.7),
        term(0.03, 0.3, 0.8),
    ];
    let accel = [
        term(2e-3, 8e-5, 50.0),
        term(0.08, 2.0, 0.7),
        term(0.04, 1.0, 0.5),
    ];
    m.speed = vec![v.0, v.1];
    m.decel = vec![decel.map(|t| t.0), decel.map(|t| t.1)];
    m.accel = vec![accel.map(|t| t.0), accel.map(|t| t.1)];
    m.gyro = jitter(0.5) * scale;
    m.load = jitter(0.02) * scale;
    m.constant = constant * scale;
    m.idle_load = jitter(2.8e-4) * scale;
    m.temperature = jitter(1e-4) * scale;
    m
}

impl FleetSpec {
    /// A fleet with evenly spread aggressions, perturbed reference vehicles,
    /// driver `i` on vehicle `i mod n_vehicles`, and `n_routes` routes of
    /// `segments_per_route` segments. A third of the routes are highways
    /// without stops.
    pub fn standard(
        n_drivers: usize,
        n_vehicles: usize,
        n_routes: usize,
        segments_per_route: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1ee7);
        let personas = (0..n_drivers)
            .map(|i| {
                let a = if n_drivers > 1 {
                    i as f64 / (n_drivers - 1) as f64
                } else {
                    0.5
                };
                let mut p = Persona::from_aggression(a);
                p.speed_factor *= rng.random_range(0.95..1.05);
                p.stop_dwell = rng.random_range(5..12);
                p.aux_kw = rng.random_range(0.6..2.0);
                p
            })
            .collect();
        let vehicles = (0..n_vehicles)
            .map(|_| random_vehicle(&mut rng, 0.15))
            .collect();
        let pairs = (0..n_drivers).map(|i| (i, i % n_vehicles.max(1))).collect();
        let routes = (0..n_routes)
            .map(|r| {
                let highway = n_routes >= 3 && r % 3 == 2;
                RouteSpec {
                    id: format!("r{r:02}"),
                    segments: (0..segments_per_route)
                        .map(|s| RouteSegmentSpec {
                            id: format!("r{r:02}s{s:02}"),
                            speed_limit: if highway {
                                rng.random_range(100.0..130.0)
                            } else {
                                [20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0][rng.random_range(0..7)]
                            },
                            stop_at: (!highway).then(|| rng.random_range(0.3..0.8)),
                            curvature: rng.random_range(0.01..0.15),
                        })
                        .collect(),
                }
            })
            .collect();
        Self {
            personas,
            vehicles,
            pairs,
            routes,
            density: 1.0,
            noise: 0.0,
            misspecification: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Argument(format!(
                "density {} outside (0, 1]",
                self.density
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !self.misspecification.is_finite() {
            return Err(Error::Argument("noise must be non-negative".into()));
        }
        if self.pairs.is_empty() || self.routes.is_empty() {
            return Err(Error::Argument("fleet needs pairs and routes".into()));
        }
        for p in &self.personas {
            p.validate()?;
        }
        for v in &self.vehicles {
            v.validate()?;
        }
        for &(d, v) in &self.pairs {
            if d >= self.personas.len() || v >= self.vehicles.len() {
                return Err(Error::Argument(format!("pair ({d}, {v}) out of range")));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.routes {
            if r.segments.is_empty() {
                return Err(Error::Argument(format!("route {} is empty", r.id)));
            }
            for s in &r.segments {
                if !seen.insert(s.id.as_str()) {
                    return Err(Error::Argument(format!("duplicate segment id {}", s.id)));
                }
                if s.speed_limit.is_nan()
                    || s.speed_limit <= 0.0
                    || s.stop_at.is_some_and(|f| !(0.0..1.0).contains(&f))
                {
                    return Err(Error::Argument(format!("invalid segment {}", s.id)));
                }
            }
        }
        Ok(())
    }

    pub fn driver_name(i: usize) -> String {
        format!("D{i:02}")
    }

    pub fn vehicle_name(i: usize) -> String {
        format!("V{i:02}")
    }

    pub fn pair_key(&self, pair: usize) -> PairKey {
        let (d, v) = self.pairs[pair];
        PairKey::new(Self::driver_name(d), Self::vehicle_name(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTrip {
    pub trip: Trip,
    pub route: String,
    pub segment_ids: Vec<String>,
}

/// Energy the planted model assigned to one data point, kWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEnergy {
    pub key: DataPointKey,
    pub trip_id: String,
    pub moving: f64,
    pub idle: f64,
    /// Noise-free model value.
    pub model_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: FleetSpec,
    pub pair_models: BTreeMap<String, EnergyModel>,
    pub planted: Vec<PlantedEnergy>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedFleet {
    pub trips: Vec<GeneratedTrip>,
    pub manifest: Manifest,
}

/// Entry of `trips.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripIndexEntry {
    pub file: String,
    pub trip_id: String,
    pub driver: String,
    pub vehicle: String,
    pub ambient_temp: Option<f64>,
    pub segment_ids: Vec<String>,
}

impl GeneratedFleet {
    pub fn segments(&self) -> Result<Vec<Segment>> {
        let mut out = Vec::new();
        for t in &self.trips {
            out.extend(segment_trip(&t.trip, Some(&t.segment_ids))?);
        }
        Ok(out)
    }

    pub fn dataset(&self, defaults: &FeatureDefaults) -> Result<Dataset> {
        let segs = self.segments()?;
        Ok(Dataset::from_segments(&segs, defaults)?.0)
    }

    /// Planted model of every pair, keyed by pair.
    pub fn models(&self) -> BTreeMap<PairKey, EnergyModel> {
        let spec = &self.manifest.spec;
        (0..spec.pairs.len())
            .map(|i| (spec.pair_key(i), spec.vehicles[spec.pairs[i].1].clone()))
            .collect()
    }

    /// Writes `traces/<trip>.csv`, `trips.json` and `manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let traces = dir.join("traces");
        fs::create_dir_all(&traces)?;
        let mut index = Vec::with_capacity(self.trips.len());
        for t in &self.trips {
            let file = format!("traces/{}.csv", t.trip.id);
            write_trip(fs::File::create(dir.join(&file))?, &t.trip)?;
            index.push(TripIndexEntry {
                file,
                trip_id: t.trip.id.clone(),
                driver: t.trip.driver.clone(),
                vehicle: t.trip.vehicle.clone(),
                ambient_temp: t.trip.ambient_temp,
                segment_ids: t.segment_ids.clone(),
            });
        }
        fs::write(
            dir.join("trips.json"),
            serde_json::to_string_pretty(&index)? + "\n",
        )?;
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)? + "\n",
        )?;
        Ok(())
    }
}

/// Per-trip randomness.
struct TripDraw {
    phase: f64,
    aux_kw: f64,
    temperature: f64,
}

fn simulate(
    persona: &Persona,
    route: &RouteSpec,
    draw: &TripDraw,
    rng: &mut ChaCha8Rng,
) -> Vec<SpeedSample> {
    let n = route.segments.len();
    let total = n as f64 + TAIL_KM;
    let stops: Vec<f64> = route
        .segments
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.stop_at.map(|f| i as f64 + f))
        .collect();
    let mut next_stop = 0usize;
    let (mut t, mut x, mut v) = (0.0_f64, 0.0_f64, 0.0_f64);
    let sample = |t: f64, v: f64, seg: &RouteSegmentSpec, rng: &mut ChaCha8Rng| SpeedSample {
        t,
        speed: v,
        gyro: Some(seg.curvature * (0.5 + rng.random::<f64>())),
        aux_load: Some(draw.aux_kw),
        energy_cum: None,
    };
    let mut out = vec![sample(0.0, 0.0, &route.segments[0], rng)];
    while x < total {
        let seg = &route.segments[(x as usize).min(n - 1)];
        let wave = (2.0 * std::f64::consts::PI * t / persona.jitter_period + draw.phase).sin();
        let mut desired = seg.speed_limit * persona.speed_factor + persona.jitter_kmh * wave;
        let stop = stops.get(next_stop).copied();
        if let Some(s) = stop {
            let d_m = ((s - x) * 1000.0 - 1.0).max(0.0);
            let brake = 0.9 * persona.decel_rate(v);
            desired = desired.min((2.0 * brake * d_m).sqrt() * 3.6);
        }
        let up = persona.accel_rate(v) * 3.6 * DT;
        let down = persona.decel_rate(v) * 3.6 * DT;
        let mut v_new = desired.clamp(v - down, v + up).max(0.0);
        let mut arrived = false;
        if let Some(s) = stop {
            let ahead_m = (s - x) * 1000.0;
            if ahead_m < 15.0 && v_new < 3.0 || x + 0.5 * (v + v_new) * DT / 3600.0 >= s {
                v_new = 0.0;
                arrived = true;
            }
        }
        t += DT;
        x += 0.5 * (v + v_new) * DT / 3600.0;
        v = v_new;
        out.push(sample(t, v, seg, rng));
        if arrived {
            for _ in 0..persona.stop_dwell {
                t += DT;
                out.push(sample(t, 0.0, seg, rng));
            }
            next_stop += 1;
        }
    }
    out
}

/// Interval-wise energy for one segment: moving energy spread over moving
/// intervals, idle energy over idle intervals, both in proportion to time.
fn allocate(
    samples: &[SpeedSample],
    moving: f64,
    idle: f64,
    defaults: &FeatureDefaults,
) -> Vec<f64> {
    let mut is_idle = vec![false; samples.len().saturating_sub(1)];
    for (a, b) in idle_runs(samples, defaults) {
        is_idle[a..b].iter_mut().for_each(|s| *s = true);
    }
    let dt = |j: usize| samples[j + 1].t - samples[j].t;
    let idle_time: f64 = (0..is_idle.len()).filter(|&j| is_idle[j]).map(dt).sum();
    let moving_time: f64 = (0..is_idle.len()).filter(|&j| !is_idle[j]).map(dt).sum();
    // Without an idle run the idle share rides on the moving intervals.
    let (moving, idle) = if idle_time > 0.0 {
        (moving, idle)
    } else {
        (moving + idle, 0.0)
    };
    (0..is_idle.len())
        .map(|j| {
            if is_idle[j] {
                idle * dt(j) / idle_time
            } else {
                moving * dt(j) / moving_time
            }
        })
        .collect()
}

pub fn generate(spec: &FleetSpec) -> Result<GeneratedFleet> {
    spec.validate()?;
    let defaults = FeatureDefaults::default();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut trips = Vec::new();
    let mut planted = Vec::new();

    for (pi, &(d, vi)) in spec.pairs.iter().enumerate() {
        let pair = spec.pair_key(pi);
        let persona = &spec.personas[d];
        let model = &spec.vehicles[vi];
        let mut driven: Vec<usize> = (0..spec.routes.len())
            .filter(|_| rng.random::<f64>() < spec.density)
            .collect();
        if driven.is_empty() {
            driven.push(rng.random_range(0..spec.routes.len()));
        }
        for ri in driven {
            let route = &spec.routes[ri];
            let draw = TripDraw {
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                aux_kw: persona.aux_kw * rng.random_range(0.85..1.15),
                temperature: rng.random_range(5.0..35.0),
            };
            let mut trip_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let raw = simulate(persona, route, &draw, &mut trip_rng);
            let trip_id = format!("{}-{}-{}", pair.driver, pair.vehicle, route.id);
            let mut ids: Vec<String> = route.segments.iter().map(|s| s.id.clone()).collect();
            ids.push(format!("{}tail", route.id));
            let trip = Trip::new(&trip_id, &pair.driver, &pair.vehicle, raw)?
                .with_ambient_temp(Some(draw.temperature));
            let segments = segment_trip(&trip, Some(&ids))?;

            let planted_parts = segments
                .iter()
                .map(|seg| {
                    let f = extract_features(seg, &defaults)?;
                    let e_mv = predict_moving(model, &f) + spec.misspecification * f.speed.powi(3);
                    Ok((e_mv, predict_idle(model, &f)))
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = planted_parts.iter().map(|(m, i)| m + i).sum::<f64>()
                / planted_parts.len().max(1) as f64;

            let mut dense: Vec<SpeedSample> = Vec::new();
            let mut cum = 0.0;
            let mut seg_ids = Vec::new();
            for (seg, &(e_mv, e_id)) in segments.iter().zip(&planted_parts) {
                let mv = e_mv + spec.noise * scale * normal.sample(&mut rng);
                let id = e_id;
                if !(mv > 0.0 && id >= 0.0) {
                    return Err(Error::Numeric(format!(
                        "planted energy for {} is not positive ({mv}, {id})",
                        seg.key
                    )));
                }
                let inc = allocate(&seg.samples, mv, id, &defaults);
                let start = if dense.is_empty() { 0 } else { 1 };
                if start == 0 {
                    let mut s0 = seg.samples[0];
                    s0.energy_cum = Some(0.0);
                    dense.push(s0);
                }
                for (j, s) in seg.samples.iter().enumerate().skip(1) {
                    cum += inc[j - 1];
                    let mut s = *s;
                    s.energy_cum = Some(cum);
                    dense.push(s);
                }
                debug_assert!(start <= 1);
                seg_ids.push(seg.key.segment_id.clone());
                planted.push(PlantedEnergy {
                    key: seg.key.clone(),
                    trip_id: trip_id.clone(),
                    moving: mv,
                    idle: id,
                    model_total: e_mv + e_id,
                });
            }
            // trailing samples past the last kept segment
            let end_t = dense.last().map_or(0.0, |s| s.t);
            for s in trip.samples.iter().filter(|s| s.t > end_t) {
                let mut s = *s;
                s.energy_cum = Some(cum);
                dense.push(s);
            }
            let trip = Trip::new(&trip_id, &pair.driver, &pair.vehicle, dense)?
                .with_ambient_temp(Some(draw.temperature));
            trips.push(GeneratedTrip {
                trip,
                route: route.id.clone(),
                segment_ids: ids,
            });
            debug_assert!(seg_ids.len() <= route.segments.len() + 1);
        }
    }
    let pair_models = (0..spec.pairs.len())
        .map(|i| {
            (
                spec.pair_key(i).to_string(),
                spec.vehicles[spec.pairs[i].1].clone(),
            )
        })
        .collect();
    Ok(GeneratedFleet {
        trips,
        manifest: Manifest {
            spec: spec.clone(),
            pair_models,
            planted,
        },
    })
}

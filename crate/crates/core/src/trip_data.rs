//! Trace ingestion and segmentation of trips into 1-km segments.
//!
//! Distances are obtained by trapezoidal integration of speed over time, so
//! vehicles with and without GPS share one distance definition. A sample
//! interval that straddles a kilometre boundary is split at the point where
//! the integrated distance reaches the boundary exactly, with speed, time and
//! the optional channels interpolated linearly inside the interval.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nominal segment length in km.
pub const SEGMENT_KM: f64 = 1.0;
/// Trailing remainders shorter than this are dropped.
pub const MIN_PARTIAL_KM: f64 = 0.1;
/// A sample closer than this to a kilometre boundary is treated as lying on it.
pub const BOUNDARY_SNAP_KM: f64 = 1e-9;

/// Kilowatt hours of electricity equivalent to one US gallon of gasoline.
pub const KWH_PER_GALLON: f64 = 33.7;
pub const LITERS_PER_GALLON: f64 = 3.785_411_784;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedSample {
    /// Seconds since trip start.
    pub t: f64,
    /// km/h.
    pub speed: f64,
    /// Absolute angular rate about the moving axis, rad/s.
    pub gyro: Option<f64>,
    /// Auxiliary load, kW.
    pub aux_load: Option<f64>,
    /// Cumulative energy since trip start, kWh.
    pub energy_cum: Option<f64>,
}

impl SpeedSample {
    pub fn new(t: f64, speed: f64) -> Self {
        Self {
            t,
            speed,
            gyro: None,
            aux_load: None,
            energy_cum: None,
        }
    }
}

/// A (driver, vehicle) pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairKey {
    pub driver: String,
    pub vehicle: String,
}

impl PairKey {
    pub fn new(driver: impl Into<String>, vehicle: impl Into<String>) -> Self {
        Self {
            driver: driver.into(),
            vehicle: vehicle.into(),
        }
    }

    pub fn on(&self, segment_id: impl Into<String>) -> DataPointKey {
        DataPointKey {
            driver: self.driver.clone(),
            vehicle: self.vehicle.clone(),
            segment_id: segment_id.into(),
        }
    }
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.driver, self.vehicle)
    }
}

/// A (driver, vehicle, road segment) data point key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DataPointKey {
    pub driver: String,
    pub vehicle: String,
    pub segment_id: String,
}

impl DataPointKey {
    pub fn new(
        driver: impl Into<String>,
        vehicle: impl Into<String>,
        segment_id: impl Into<String>,
    ) -> Result<Self> {
        let key = Self {
            driver: driver.into(),
            vehicle: vehicle.into(),
            segment_id: segment_id.into(),
        };
        if key.driver.is_empty() || key.vehicle.is_empty() || key.segment_id.is_empty() {
            return Err(Error::Argument(format!(
                "data point key has an empty component: {key}"
            )));
        }
        Ok(key)
    }

    pub fn pair(&self) -> PairKey {
        PairKey::new(self.driver.clone(), self.vehicle.clone())
    }
}

impl fmt::Display for DataPointKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.driver, self.vehicle, self.segment_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub id: String,
    pub driver: String,
    pub vehicle: String,
    pub samples: Vec<SpeedSample>,
    /// Outdoor temperature, °C.
    pub ambient_temp: Option<f64>,
    /// Geo-coordinates aligned one-to-one with `samples`.
    pub route_points: Option<Vec<GeoPoint>>,
}

impl Trip {
    pub fn new(
        id: impl Into<String>,
        driver: impl Into<String>,
        vehicle: impl Into<String>,
        samples: Vec<SpeedSample>,
    ) -> Result<Self> {
        let trip = Self {
            id: id.into(),
            driver: driver.into(),
            vehicle: vehicle.into(),
            samples,
            ambient_temp: None,
            route_points: None,
        };
        trip.validate()?;
        Ok(trip)
    }

    pub fn with_ambient_temp(mut self, temp: Option<f64>) -> Self {
        self.ambient_temp = temp;
        self
    }

    pub fn with_route_points(mut self, points: Vec<GeoPoint>) -> Result<Self> {
        if points.len() != self.samples.len() {
            return Err(Error::Argument(format!(
                "{} route points for {} samples",
                points.len(),
                self.samples.len()
            )));
        }
        self.route_points = Some(points);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.driver.is_empty() || self.vehicle.is_empty() {
            return Err(Error::Argument("trip needs a driver and a vehicle".into()));
        }
        if self.samples.len() < 2 {
            return Err(Error::Argument(format!(
                "trip {} has {} samples, need at least 2",
                self.id,
                self.samples.len()
            )));
        }
        for (i, s) in self.samples.iter().enumerate() {
            check_sample(s, i.checked_sub(1).map(|p| &self.samples[p])).map_err(|message| {
                Error::Parse {
                    row: i + 1,
                    message,
                }
            })?;
        }
        if let Some(points) = &self.route_points {
            if points.len() != self.samples.len() {
                return Err(Error::Argument(
                    "route points not aligned with samples".into(),
                ));
            }
        }
        Ok(())
    }

    /// Trapezoidal distance in km.
    pub fn distance_km(&self) -> f64 {
        trapezoid_km(&self.samples)
    }
}

fn check_sample(s: &SpeedSample, prev: Option<&SpeedSample>) -> std::result::Result<(), String> {
    if !s.t.is_finite() || !s.speed.is_finite() {
        return Err("non-finite time or speed".into());
    }
    if s.speed < 0.0 {
        return Err(format!("negative speed {}", s.speed));
    }
    for (name, v) in [
        ("gyro", s.gyro),
        ("aux", s.aux_load),
        ("energy", s.energy_cum),
    ] {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(format!("non-finite {name}"));
            }
        }
    }
    if let Some(p) = prev {
        if s.t <= p.t {
            return Err(format!("time {} does not increase past {}", s.t, p.t));
        }
        if let (Some(a), Some(b)) = (p.energy_cum, s.energy_cum) {
            if b < a {
                return Err(format!("cumulative energy decreases from {a} to {b}"));
            }
        }
    }
    Ok(())
}

pub(crate) fn interval_km(a: &SpeedSample, b: &SpeedSample) -> f64 {
    0.5 * (a.speed + b.speed) * (b.t - a.t) / 3600.0
}

pub fn trapezoid_km(samples: &[SpeedSample]) -> f64 {
    samples.windows(2).map(|w| interval_km(&w[0], &w[1])).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub key: DataPointKey,
    pub samples: Vec<SpeedSample>,
    /// km, in (0, 1].
    pub distance: f64,
    pub is_partial: bool,
    /// Outdoor temperature inherited from the trip.
    pub ambient_temp: Option<f64>,
    /// Ground-truth energy over the segment, kWh.
    pub measured_energy: Option<f64>,
}

impl Segment {
    pub fn duration(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }
}

fn lerp(a: f64, b: f64, s: f64) -> f64 {
    a + (b - a) * s
}

fn lerp_opt(a: Option<f64>, b: Option<f64>, s: f64) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) => Some(lerp(a, b, s)),
        _ => None,
    }
}

/// Fraction `s` of the interval `a -> b` at which the trapezoidal distance,
/// with speed linear in time, equals `need_km`.
fn split_fraction(a: &SpeedSample, b: &SpeedSample, need_km: f64) -> f64 {
    let dt = b.t - a.t;
    // dt * (v0 s + (v1 - v0) s^2 / 2) / 3600 = need
    let q = need_km * 3600.0 / dt;
    let quad = 0.5 * (b.speed - a.speed);
    let lin = a.speed;
    let disc = (lin * lin + 4.0 * quad * q).max(0.0);
    let denom = lin + disc.sqrt();
    let s = if denom > 0.0 { 2.0 * q / denom } else { 1.0 };
    s.clamp(0.0, 1.0)
}

fn split_sample(a: &SpeedSample, b: &SpeedSample, s: f64) -> SpeedSample {
    SpeedSample {
        t: lerp(a.t, b.t, s),
        speed: lerp(a.speed, b.speed, s),
        gyro: lerp_opt(a.gyro, b.gyro, s),
        aux_load: lerp_opt(a.aux_load, b.aux_load, s),
        energy_cum: lerp_opt(a.energy_cum, b.energy_cum, s),
    }
}

fn split_point(a: &GeoPoint, b: &GeoPoint, s: f64) -> GeoPoint {
    GeoPoint {
        lat: lerp(a.lat, b.lat, s),
        lon: lerp(a.lon, b.lon, s),
    }
}

struct RawSegment {
    samples: Vec<SpeedSample>,
    points: Vec<GeoPoint>,
    distance: f64,
    is_partial: bool,
}

/// Cuts a trip into consecutive 1-km segments.
///
/// Segment ids come from `segment_ids` (by position) when supplied, otherwise
/// from the quantized start and end coordinates when the trip carries route
/// points, otherwise from `<trip id>#<index>`.
pub fn segment_trip(trip: &Trip, segment_ids: Option<&[String]>) -> Result<Vec<Segment>> {
    trip.validate()?;
    let raw = split_kilometres(trip);
    if let Some(ids) = segment_ids {
        if ids.len() < raw.len() {
            return Err(Error::Argument(format!(
                "trip {} yields {} segments but only {} segment ids were given",
                trip.id,
                raw.len(),
                ids.len()
            )));
        }
    }
    raw.into_iter()
        .enumerate()
        .map(|(i, seg)| {
            let label = match segment_ids {
                Some(ids) => ids[i].clone(),
                None if !seg.points.is_empty() => geo_label(&seg.points),
                None => format!("{}#{}", trip.id, i),
            };
            let measured_energy = match (seg.samples.first(), seg.samples.last()) {
                (Some(a), Some(b)) => match (a.energy_cum, b.energy_cum) {
                    (Some(x), Some(y)) => Some(y - x),
                    _ => None,
                },
                _ => None,
            };
            Ok(Segment {
                key: DataPointKey::new(trip.driver.clone(), trip.vehicle.clone(), label)?,
                samples: seg.samples,
                distance: seg.distance,
                is_partial: seg.is_partial,
                ambient_temp: trip.ambient_temp,
                measured_energy,
            })
        })
        .collect()
}

fn geo_label(points: &[GeoPoint]) -> String {
    let a = points[0];
    let b = points[points.len() - 1];
    format!("geo:{:.3},{:.3}>{:.3},{:.3}", a.lat, a.lon, b.lat, b.lon)
}

fn split_kilometres(trip: &Trip) -> Vec<RawSegment> {
    let samples = &trip.samples;
    let points = trip.route_points.as_deref();
    let total = trip.distance_km();
    let mut out = Vec::new();

    let mut cur_samples = vec![samples[0]];
    let mut cur_points: Vec<GeoPoint> = points.map(|p| vec![p[0]]).unwrap_or_default();
    let mut boundary = SEGMENT_KM;
    let mut left = samples[0];
    let mut left_point = points.map(|p| p[0]);
    let mut pos = 0.0;

    for j in 1..samples.len() {
        let right = samples[j];
        let right_point = points.map(|p| p[j]);
        loop {
            let end = pos + interval_km(&left, &right);
            if end < boundary - BOUNDARY_SNAP_KM {
                pos = end;
                cur_samples.push(right);
                cur_points.extend(right_point);
                break;
            }
            let (cut, cut_point, at_sample) = if end <= boundary + BOUNDARY_SNAP_KM {
                (right, right_point, true)
            } else {
                let s = split_fraction(&left, &right, boundary - pos);
                let point = match (left_point, right_point) {
                    (Some(a), Some(b)) => Some(split_point(&a, &b, s)),
                    _ => None,
                };
                (split_sample(&left, &right, s), point, false)
            };
            cur_samples.push(cut);
            cur_points.extend(cut_point);
            out.push(RawSegment {
                samples: std::mem::replace(&mut cur_samples, vec![cut]),
                points: std::mem::replace(&mut cur_points, cut_point.into_iter().collect()),
                distance: SEGMENT_KM,
                is_partial: false,
            });
            pos = boundary;
            boundary += SEGMENT_KM;
            if at_sample {
                break;
            }
            left = cut;
            left_point = cut_point;
        }
        left = right;
        left_point = right_point;
    }

    let remainder = total - (out.len() as f64) * SEGMENT_KM;
    if cur_samples.len() >= 2 && remainder >= MIN_PARTIAL_KM {
        out.push(RawSegment {
            samples: cur_samples,
            points: cur_points,
            distance: remainder,
            is_partial: true,
        });
    }
    out
}

/// How the columns of a trace CSV are named and which unit the energy column
/// uses. Defaults to `t_s, speed_kmh, gyro_rads, aux_kw, energy_kwh, lat, lon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSchema {
    pub time: String,
    pub speed: String,
    pub gyro: String,
    pub aux: String,
    pub energy: String,
    pub lat: String,
    pub lon: String,
    pub energy_unit: EnergyUnit,
}

impl Default for TraceSchema {
    fn default() -> Self {
        Self {
            time: "t_s".into(),
            speed: "speed_kmh".into(),
            gyro: "gyro_rads".into(),
            aux: "aux_kw".into(),
            energy: "energy_kwh".into(),
            lat: "lat".into(),
            lon: "lon".into(),
            energy_unit: EnergyUnit::Kwh,
        }
    }
}

/// Unit of a raw energy column; everything is converted to kWh-equivalent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyUnit {
    #[default]
    Kwh,
    Gallons,
    Liters,
}

impl EnergyUnit {
    pub fn to_kwh(self, value: f64) -> f64 {
        match self {
            EnergyUnit::Kwh => value,
            EnergyUnit::Gallons => value * KWH_PER_GALLON,
            EnergyUnit::Liters => value / LITERS_PER_GALLON * KWH_PER_GALLON,
        }
    }
}

/// Identity of a trip read from a trace file; the trace itself carries only
/// per-sample columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripMeta {
    pub id: String,
    pub driver: String,
    pub vehicle: String,
    pub ambient_temp: Option<f64>,
}

pub fn ingest_trip(path: impl AsRef<Path>, schema: &TraceSchema, meta: &TripMeta) -> Result<Trip> {
    let file = std::fs::File::open(path)?;
    read_trip(file, schema, meta)
}

pub fn read_trip<R: Read>(reader: R, schema: &TraceSchema, meta: &TripMeta) -> Result<Trip> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let t_col = find(&schema.time)
        .ok_or_else(|| Error::Schema(format!("missing required column {}", schema.time)))?;
    let v_col = find(&schema.speed)
        .ok_or_else(|| Error::Schema(format!("missing required column {}", schema.speed)))?;
    let gyro_col = find(&schema.gyro);
    let aux_col = find(&schema.aux);
    let energy_col = find(&schema.energy);
    let lat_col = find(&schema.lat);
    let lon_col = find(&schema.lon);
    let has_geo = lat_col.is_some() && lon_col.is_some();

    let mut samples: Vec<SpeedSample> = Vec::new();
    let mut points = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let required = |col: usize, name: &str| -> Result<f64> {
            parse_field(record.get(col), row, name)?.ok_or_else(|| Error::Parse {
                row,
                message: format!("empty {name}"),
            })
        };
        let optional = |col: Option<usize>, name: &str| -> Result<Option<f64>> {
            match col {
                Some(c) => parse_field(record.get(c), row, name),
                None => Ok(None),
            }
        };
        let sample = SpeedSample {
            t: required(t_col, &schema.time)?,
            speed: required(v_col, &schema.speed)?,
            gyro: optional(gyro_col, &schema.gyro)?,
            aux_load: optional(aux_col, &schema.aux)?,
            energy_cum: optional(energy_col, &schema.energy)?.map(|e| schema.energy_unit.to_kwh(e)),
        };
        check_sample(&sample, samples.last()).map_err(|message| Error::Parse { row, message })?;
        if has_geo {
            let lat = optional(lat_col, &schema.lat)?;
            let lon = optional(lon_col, &schema.lon)?;
            match (lat, lon) {
                (Some(lat), Some(lon)) => points.push(GeoPoint { lat, lon }),
                _ => {
                    return Err(Error::Parse {
                        row,
                        message: "incomplete coordinates".into(),
                    })
                }
            }
        }
        samples.push(sample);
    }

    let trip = Trip::new(
        meta.id.clone(),
        meta.driver.clone(),
        meta.vehicle.clone(),
        samples,
    )?
    .with_ambient_temp(meta.ambient_temp);
    if has_geo {
        trip.with_route_points(points)
    } else {
        Ok(trip)
    }
}

fn parse_field(field: Option<&str>, row: usize, name: &str) -> Result<Option<f64>> {
    match field {
        None | Some("") => Ok(None),
        Some(text) => text.parse::<f64>().map(Some).map_err(|_| Error::Parse {
            row,
            message: format!("{name} is not numeric: {text:?}"),
        }),
    }
}

/// Writes a trip in the default trace schema. Optional columns are emitted
/// only when at least one sample populates them.
pub fn write_trip<W: Write>(writer: W, trip: &Trip) -> Result<()> {
    let any = |f: fn(&SpeedSample) -> Option<f64>| trip.samples.iter().any(|s| f(s).is_some());
    let gyro = any(|s| s.gyro);
    let aux = any(|s| s.aux_load);
    let energy = any(|s| s.energy_cum);
    let geo = trip.route_points.is_some();

    let mut header = vec!["t_s", "speed_kmh"];
    if gyro {
        header.push("gyro_rads");
    }
    if aux {
        header.push("aux_kw");
    }
    if energy {
        header.push("energy_kwh");
    }
    if geo {
        header.extend(["lat", "lon"]);
    }
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (i, s) in trip.samples.iter().enumerate() {
        let mut row = vec![s.t.to_string(), s.speed.to_string()];
        if gyro {
            row.push(opt(s.gyro));
        }
        if aux {
            row.push(opt(s.aux_load));
        }
        if energy {
            row.push(opt(s.energy_cum));
        }
        if let Some(points) = &trip.route_points {
            row.push(points[i].lat.to_string());
            row.push(points[i].lon.to_string());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

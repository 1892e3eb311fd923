//! Segment store: one CSV of observations per (driver, vehicle) pair plus an
//! `index.json` naming them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use drivesense::dataset::{Dataset, Observation};
use drivesense::features::{AccelTuple, EnergySplit, SegmentFeatures};
use drivesense::trip_data::DataPointKey;
use drivesense::{Error, Result};

use crate::output::config_line;

pub const INDEX: &str = "index.json";

const COLUMNS: [&str; 17] = [
    "segment_id",
    "distance_km",
    "sample_count",
    "v",
    "tau_d",
    "mu_d",
    "sigma_d",
    "tau_a",
    "mu_a",
    "sigma_a",
    "g",
    "mu_idle",
    "l",
    "omega",
    "energy_kwh",
    "idle_kwh",
    "profile",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub driver: String,
    pub vehicle: String,
    pub file: String,
    pub segments: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoreIndex {
    pub config: serde_json::Value,
    pub pairs: Vec<PairEntry>,
    pub warnings: Vec<String>,
}

pub fn write_store(
    dir: &Path,
    dataset: &Dataset,
    config: &serde_json::Value,
    warnings: Vec<String>,
) -> Result<()> {
    fs::create_dir_all(dir.join("pairs"))?;
    let mut pairs = Vec::new();
    for (i, pair) in dataset.pairs().enumerate() {
        let file = format!("pairs/{i:04}.csv");
        let mut buf = config_line(config)?.into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(COLUMNS)?;
            for o in dataset.observations_of(pair) {
                w.write_record(record(o))?;
            }
            w.flush()?;
        }
        fs::write(dir.join(&file), buf)?;
        pairs.push(PairEntry {
            driver: pair.driver.clone(),
            vehicle: pair.vehicle.clone(),
            file,
            segments: dataset.segments_of(pair).count(),
        });
    }
    let index = StoreIndex {
        config: config.clone(),
        pairs,
        warnings,
    };
    fs::write(
        dir.join(INDEX),
        serde_json::to_string_pretty(&index)? + "\n",
    )?;
    Ok(())
}

fn record(o: &Observation) -> Vec<String> {
    let f = &o.features;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let profile: Vec<String> = o.profile.iter().map(f64::to_string).collect();
    vec![
        o.key.segment_id.clone(),
        o.distance.to_string(),
        o.sample_count.to_string(),
        f.speed.to_string(),
        f.decel.duration.to_string(),
        f.decel.mean.to_string(),
        f.decel.std.to_string(),
        f.accel.duration.to_string(),
        f.accel.mean.to_string(),
        f.accel.std.to_string(),
        f.gyro.to_string(),
        f.idle_time.to_string(),
        f.idle_load.to_string(),
        f.temperature.to_string(),
        opt(o.energy.map(|e| e.total)),
        opt(o.energy.map(|e| e.idle)),
        profile.join(" "),
    ]
}

pub fn read_store(dir: &Path) -> Result<(Dataset, StoreIndex)> {
    let text = fs::read_to_string(dir.join(INDEX))
        .map_err(|e| Error::MissingData(format!("{}: {e}", dir.join(INDEX).display())))?;
    let index: StoreIndex = serde_json::from_str(&text)?;
    let mut dataset = Dataset::new();
    for entry in &index.pairs {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(dir.join(&entry.file))?;
        let headers = rdr.headers()?.clone();
        if headers.iter().ne(COLUMNS) {
            return Err(Error::Schema(format!("{}: unexpected columns", entry.file)));
        }
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = i + 1;
            let num = |c: usize| -> Result<f64> {
                rec[c].parse::<f64>().map_err(|_| Error::Parse {
                    row,
                    message: format!("{}: {} is not numeric", entry.file, COLUMNS[c]),
                })
            };
            let opt = |c: usize| -> Result<Option<f64>> {
                if rec[c].is_empty() {
                    Ok(None)
                } else {
                    num(c).map(Some)
                }
            };
            let energy = match (opt(14)?, opt(15)?) {
                (Some(total), Some(idle)) => Some(EnergySplit { total, idle }),
                _ => None,
            };
            let profile = rec[16]
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| Error::Parse {
                        row,
                        message: format!("{}: bad profile value {t:?}", entry.file),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let sample_count = rec[2].parse::<usize>().map_err(|_| Error::Parse {
                row,
                message: format!("{}: bad sample_count", entry.file),
            })?;
            dataset.insert(Observation {
                key: DataPointKey::new(&entry.driver, &entry.vehicle, &rec[0])
                    .map_err(|e| Error::Schema(e.to_string()))?,
                features: SegmentFeatures {
                    speed: num(3)?,
                    decel: AccelTuple {
                        duration: num(4)?,
                        mean: num(5)?,
                        std: num(6)?,
                    },
                    accel: AccelTuple {
                        duration: num(7)?,
                        mean: num(8)?,
                        std: num(9)?,
                    },
                    gyro: num(10)?,
                    idle_time: num(11)?,
                    idle_load: num(12)?,
                    temperature: num(13)?,
                },
                energy,
                profile,
                distance: num(1)?,
                sample_count,
            })?;
        }
    }
    Ok((dataset, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use drivesense::features::FeatureDefaults;
    use drivesense::synth_oracle::{generate, FleetSpec};

    #[test]
    fn round_trip() {
        let ds = generate(&FleetSpec::standard(3, 2, 2, 4, 1))
            .unwrap()
            .dataset(&FeatureDefaults::default())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = serde_json::json!({"command": "test"});
        write_store(dir.path(), &ds, &cfg, vec![]).unwrap();
        let (back, index) = read_store(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(index.pairs.len(), 3);
    }

    #[test]
    fn missing_index_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let e = read_store(dir.path()).unwrap_err();
        assert_eq!(e.kind(), drivesense::ErrorKind::Data);
    }
}

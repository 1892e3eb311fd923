mod args;
mod output;
mod store;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use serde::{Deserialize, Serialize};

use drivesense::dataset::Dataset;
use drivesense::energy_model::{aic_scan, fit, EnergyModel, FitReport};
use drivesense::evaluation::{dte_table, evaluate, EvalConfig, Evaluation};
use drivesense::predictor::{predict, write_report_csv, BatteryState};
use drivesense::synth_oracle::{generate, FleetSpec};
use drivesense::trip_data::{read_trip, segment_trip, write_trip, PairKey, TraceSchema, TripMeta};
use drivesense::{Error, ErrorKind, Result};

use args::{
    predict_params, AicScanArgs, Cli, Command, DteArgs, EvaluateArgs, FitArgs, Format, IngestArgs,
    PredictArgs, SynthArgs,
};
use output::{csv_bytes, emit, json_bytes, num, opt};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json_errors {
                report_json("validation", &e.to_string());
            } else {
                let _ = e.print();
            }
            return ExitCode::from(1);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (name, code) = match e.kind() {
                ErrorKind::Validation => ("validation", 1),
                ErrorKind::Data => ("data", 2),
                ErrorKind::Numeric => ("numeric", 3),
            };
            if json_errors {
                report_json(name, &e.to_string());
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code)
        }
    }
}

fn report_json(kind: &str, message: &str) {
    let v = serde_json::json!({ "error": { "kind": kind, "message": message.trim_end() } });
    eprintln!("{v}");
}

fn run(cmd: &Command) -> Result<()> {
    let config = serde_json::to_value(cmd)?;
    match cmd {
        Command::Synth(a) => synth(a, &config),
        Command::Ingest(a) => ingest(a, &config),
        Command::Fit(a) => fit_models(a, &config),
        Command::AicScan(a) => scan(a, &config),
        Command::Predict(a) => predict_route(a, &config),
        Command::Evaluate(a) => evaluate_cmd(a, &config),
        Command::Dte(a) => dte_cmd(a, &config),
    }
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        log::warn!("{w}");
    }
}

/// Entry of a trip index. Without segment ids, segments are named from the
/// route coordinates or, failing those, from the trip id.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TripEntry {
    file: String,
    trip_id: String,
    driver: String,
    vehicle: String,
    #[serde(default)]
    ambient_temp: Option<f64>,
    #[serde(default)]
    segment_ids: Option<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TripIndex {
    Wrapped { trips: Vec<TripEntry> },
    Bare(Vec<TripEntry>),
}

#[derive(Serialize)]
struct TripsFile<'a> {
    trips: &'a [TripEntry],
}

fn synth(a: &SynthArgs, config: &serde_json::Value) -> Result<()> {
    let mut spec = FleetSpec::standard(a.drivers, a.vehicles, a.routes, a.segments, a.seed.seed);
    if a.urban_only {
        spec.routes
            .retain(|r| r.segments.iter().all(|s| s.stop_at.is_some()));
    }
    spec.density = a.density;
    spec.noise = a.noise;
    spec.misspecification = a.misspecification;
    let fleet = generate(&spec)?;

    fs::create_dir_all(a.out.join("traces"))?;
    let header = output::config_line(config)?;
    let mut index = Vec::with_capacity(fleet.trips.len());
    for t in &fleet.trips {
        let file = format!("traces/{}.csv", t.trip.id);
        let mut buf = header.clone().into_bytes();
        write_trip(&mut buf, &t.trip)?;
        fs::write(a.out.join(&file), buf)?;
        index.push(TripEntry {
            file,
            trip_id: t.trip.id.clone(),
            driver: t.trip.driver.clone(),
            vehicle: t.trip.vehicle.clone(),
            ambient_temp: t.trip.ambient_temp,
            segment_ids: Some(t.segment_ids.clone()),
        });
    }
    fs::write(
        a.out.join("trips.json"),
        json_bytes(config, &TripsFile { trips: &index })?,
    )?;
    fs::write(
        a.out.join("manifest.json"),
        json_bytes(config, &fleet.manifest)?,
    )?;
    log::info!("wrote {} trips to {}", index.len(), a.out.display());
    Ok(())
}

fn ingest(a: &IngestArgs, config: &serde_json::Value) -> Result<()> {
    let text = fs::read_to_string(&a.trips)
        .map_err(|e| Error::MissingData(format!("{}: {e}", a.trips.display())))?;
    let entries = match serde_json::from_str::<TripIndex>(&text)? {
        TripIndex::Wrapped { trips } | TripIndex::Bare(trips) => trips,
    };
    let base = a.trips.parent().unwrap_or(Path::new("."));
    let schema = TraceSchema {
        energy_unit: a.energy_unit.into(),
        ..TraceSchema::default()
    };
    let mut segments = Vec::new();
    for e in &entries {
        let meta = TripMeta {
            id: e.trip_id.clone(),
            driver: e.driver.clone(),
            vehicle: e.vehicle.clone(),
            ambient_temp: e.ambient_temp,
        };
        let path = base.join(&e.file);
        let file = fs::File::open(&path)
            .map_err(|err| Error::MissingData(format!("{}: {err}", path.display())))?;
        let trip = read_trip(file, &schema, &meta).map_err(|err| match err {
            Error::Parse { row, message } => Error::Parse {
                row,
                message: format!("{}: {message}", e.file),
            },
            Error::Argument(m) => Error::Schema(format!("{}: {m}", e.file)),
            other => other,
        })?;
        segments.extend(segment_trip(&trip, e.segment_ids.as_deref())?);
    }
    let (dataset, warnings) = Dataset::from_segments(&segments, &a.defaults.defaults())?;
    warn_all(&warnings);
    store::write_store(&a.out, &dataset, config, warnings)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FittedPair {
    driver: String,
    vehicle: String,
    model: EnergyModel,
    report: FitReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Provenance {
    store: String,
    /// Seconds since the epoch, taken from `SOURCE_DATE_EPOCH` when set.
    timestamp: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelsFile {
    models: Vec<FittedPair>,
    failures: Vec<String>,
    provenance: Provenance,
}

fn fit_models(a: &FitArgs, config: &serde_json::Value) -> Result<()> {
    let (dataset, _) = store::read_store(&a.store)?;
    let mut models = Vec::new();
    let mut failures = Vec::new();
    for pair in dataset.pairs() {
        match fit(
            &dataset.training_samples(pair),
            a.model.order,
            a.model.ridge,
        ) {
            Ok((model, report)) => models.push(FittedPair {
                driver: pair.driver.clone(),
                vehicle: pair.vehicle.clone(),
                model,
                report,
            }),
            Err(e) => failures.push(format!("{pair}: {e}")),
        }
    }
    warn_all(&failures);
    if models.is_empty() {
        return Err(failures
            .first()
            .map(|f| Error::Numeric(format!("no pair could be fitted; {f}")))
            .unwrap_or_else(|| Error::MissingData("segment store is empty".into())));
    }
    let file = ModelsFile {
        models,
        failures,
        provenance: Provenance {
            store: a.store.display().to_string(),
            timestamp: std::env::var("SOURCE_DATE_EPOCH")
                .ok()
                .and_then(|s| s.parse().ok()),
        },
    };
    emit(a.out.as_deref(), &json_bytes(config, &file)?)
}

fn scan(a: &AicScanArgs, config: &serde_json::Value) -> Result<()> {
    let (dataset, _) = store::read_store(&a.store)?;
    let groups: Vec<_> = dataset
        .pairs()
        .map(|p| dataset.training_samples(p))
        .collect();
    let orders = a.orders.orders()?;
    let result = aic_scan(&groups, &orders, a.ridge)?;
    for (o, e) in &result.failed {
        log::warn!("order {o}: {e}");
    }
    let bytes = match a.output.format() {
        Format::Json => json_bytes(config, &result)?,
        Format::Csv => {
            let header = ["rank", "r", "k", "m", "K", "mean_aic", "normalized_aic"]
                .map(String::from)
                .to_vec();
            let rows: Vec<Vec<String>> = result
                .ranked
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    vec![
                        (i + 1).to_string(),
                        e.order.r.to_string(),
                        e.order.k.to_string(),
                        e.order.m.to_string(),
                        e.order.coefficient_count().to_string(),
                        num(e.aic),
                        num(e.normalized),
                    ]
                })
                .collect();
            csv_bytes(config, &header, &rows)?
        }
    };
    emit(a.output.out.as_deref(), &bytes)
}

fn load_models(path: &Path) -> Result<BTreeMap<PairKey, EnergyModel>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::MissingData(format!("{}: {e}", path.display())))?;
    let file: ModelsFile = serde_json::from_str(&text)?;
    file.models
        .into_iter()
        .map(|f| {
            f.model.validate()?;
            Ok((PairKey::new(f.driver, f.vehicle), f.model))
        })
        .collect()
}

fn predict_route(a: &PredictArgs, config: &serde_json::Value) -> Result<()> {
    let (dataset, _) = store::read_store(&a.store)?;
    let models = load_models(&a.models)?;
    let target = PairKey::new(&a.driver, &a.vehicle);
    let approach = a.approach.with_k(a.neighbors.k as usize);
    let params = predict_params(&a.neighbors, &a.mf, a.seed.seed);
    let report = predict(&target, &a.route, approach, &dataset, &models, &params)?;
    warn_all(&report.warnings);
    let bytes = match a.output.format() {
        Format::Json => json_bytes(config, &report)?,
        Format::Csv => {
            let mut buf = output::config_line(config)?.into_bytes();
            write_report_csv(&mut buf, &report)?;
            buf
        }
    };
    emit(a.output.out.as_deref(), &bytes)
}

fn run_evaluation(a: &EvaluateArgs) -> Result<Evaluation> {
    let (dataset, _) = store::read_store(&a.store)?;
    let cfg = EvalConfig {
        approaches: a.approaches(),
        order: a.model.order,
        ridge: a.model.ridge,
        train_fraction: a.train_fraction,
        seed: a.seed.seed,
        params: predict_params(&a.neighbors, &a.mf, a.seed.seed),
    };
    let ev = evaluate(&dataset, &cfg)?;
    warn_all(&ev.warnings);
    if ev.fits.is_empty() {
        return Err(Error::Numeric(
            "no pair has enough training segments for the model order".into(),
        ));
    }
    for s in &ev.scores {
        for f in &s.failures {
            log::warn!("{}: {f}", s.approach);
        }
    }
    Ok(ev)
}

fn evaluate_cmd(a: &EvaluateArgs, config: &serde_json::Value) -> Result<()> {
    let ev = run_evaluation(a)?;
    let bytes = match a.output.format() {
        Format::Json => json_bytes(config, &ev)?,
        Format::Csv => {
            let mut header = vec!["pair".to_string()];
            header.extend(ev.scores.iter().map(|s| s.approach.clone()));
            let mut rows: Vec<Vec<String>> = ev
                .splits
                .iter()
                .map(|s| {
                    let key = s.pair.to_string();
                    let mut row = vec![key.clone()];
                    row.extend(
                        ev.scores
                            .iter()
                            .map(|sc| opt(sc.per_pair.get(&key).copied())),
                    );
                    row
                })
                .collect();
            let mut mean = vec!["mean".to_string()];
            mean.extend(ev.scores.iter().map(|s| num(s.mean_rmse_acc)));
            rows.push(mean);
            csv_bytes(config, &header, &rows)?
        }
    };
    emit(a.output.out.as_deref(), &bytes)
}

fn dte_cmd(a: &DteArgs, config: &serde_json::Value) -> Result<()> {
    let battery = BatteryState::new(a.soc, a.capacity_ah, a.voltage)?;
    let ev = run_evaluation(&a.eval)?;
    let rows = dte_table(&ev.reports, &battery)?;
    #[derive(Serialize)]
    struct Body<'a> {
        battery: &'a BatteryState,
        remaining_kwh: f64,
        rows: &'a [drivesense::evaluation::DteRow],
    }
    let bytes = match a.eval.output.format() {
        Format::Json => json_bytes(
            config,
            &Body {
                battery: &battery,
                remaining_kwh: drivesense::predictor::remaining_energy(&battery),
                rows: &rows,
            },
        )?,
        Format::Csv => {
            let header = [
                "pair",
                "approach",
                "intensity_hat_kwh_per_km",
                "intensity_true_kwh_per_km",
                "dte_hat_km",
                "dte_true_km",
                "delta_dte_km",
                "energy_error",
            ]
            .map(String::from)
            .to_vec();
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.pair.clone(),
                        r.approach.clone(),
                        num(r.intensity_hat),
                        num(r.intensity_true),
                        num(r.dte_hat),
                        num(r.dte_true),
                        num(r.delta),
                        num(r.energy_error),
                    ]
                })
                .collect();
            csv_bytes(config, &header, &body)?
        }
    };
    emit(a.eval.output.out.as_deref(), &bytes)
}

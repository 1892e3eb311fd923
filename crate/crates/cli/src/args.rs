use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use drivesense::collab_filter::MfParams;
use drivesense::energy_model::{ModelOrder, DEFAULT_RIDGE};
use drivesense::features::FeatureDefaults;
use drivesense::predictor::{Aggregation, Approach, PredictParams};
use drivesense::trip_data::EnergyUnit;

#[derive(Debug, Parser)]
#[command(
    name = "drivesense",
    version,
    about = "Personalized vehicle energy prediction"
)]
pub struct Cli {
    /// Print errors as a JSON object on stderr.
    #[arg(long, global = true)]
    pub json_errors: bool,

    #[command(subcommand)]
    pub command: Command,
}

/// Every option of the invoked subcommand; echoed into each artifact.
#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic fleet with planted ground truth.
    Synth(SynthArgs),
    /// Cut trace files into segments and write a segment store.
    Ingest(IngestArgs),
    /// Train one energy model per (driver, vehicle) pair.
    Fit(FitArgs),
    /// Rank model orders by normalized AIC.
    AicScan(AicScanArgs),
    /// Predict a pair's energy over a route.
    Predict(PredictArgs),
    /// Compare approaches on a seeded hold-out split.
    Evaluate(EvaluateArgs),
    /// Distance-to-empty for each approach on the hold-out split.
    Dte(DteArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutputArgs {
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Defaults to json for `.json` outputs and csv otherwise.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

impl OutputArgs {
    pub fn format(&self) -> Format {
        self.format.unwrap_or_else(|| match &self.out {
            Some(p) if p.extension().is_some_and(|e| e == "json") => Format::Json,
            _ => Format::Csv,
        })
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SeedArgs {
    #[arg(long, env = "DRIVESENSE_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DefaultsArgs {
    /// Idle load (kW) for traces without an aux channel.
    #[arg(long, default_value_t = FeatureDefaults::default().idle_load)]
    pub default_idle_load: f64,
    /// Ambient temperature (°C) for trips without one.
    #[arg(long, default_value_t = FeatureDefaults::default().temperature)]
    pub default_temperature: f64,
    /// Speed (km/h) below which a sample counts as stationary.
    #[arg(long, default_value_t = FeatureDefaults::default().idle_speed)]
    pub idle_speed: f64,
    /// Shortest stationary run (s) that counts as idling.
    #[arg(long, default_value_t = FeatureDefaults::default().idle_min_duration)]
    pub idle_min_duration: f64,
}

impl DefaultsArgs {
    pub fn defaults(&self) -> FeatureDefaults {
        FeatureDefaults {
            idle_load: self.default_idle_load,
            temperature: self.default_temperature,
            idle_speed: self.idle_speed,
            idle_min_duration: self.idle_min_duration,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Model order as r,k,m.
    #[arg(long, default_value = "2,2,2", value_parser = parse_order)]
    pub order: ModelOrder,
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    pub ridge: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MfArgs {
    /// Latent rank of the factorization.
    #[arg(long, default_value_t = 3)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Regularization weight on both factor matrices.
    #[arg(long, default_value_t = 0.02)]
    pub lambda: f64,
    #[arg(long, default_value_t = 5000)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Independent initializations; the best objective is kept.
    #[arg(long, default_value_t = 1)]
    pub restarts: usize,
}

impl MfArgs {
    pub fn params(&self, seed: u64) -> MfParams {
        MfParams {
            rank: self.rank,
            lambda_p: self.lambda,
            lambda_q: self.lambda,
            learning_rate: self.lr,
            max_epochs: self.max_epochs,
            tol: self.tol,
            restarts: self.restarts,
            seed,
            ..MfParams::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ApproachName {
    Spm,
    Dhm,
    Mf,
    Avg,
    Adj,
    #[value(name = "self")]
    #[serde(rename = "self")]
    SelfEst,
}

impl ApproachName {
    pub const ALL: [ApproachName; 6] = [
        ApproachName::Spm,
        ApproachName::Dhm,
        ApproachName::Mf,
        ApproachName::Avg,
        ApproachName::Adj,
        ApproachName::SelfEst,
    ];

    pub fn with_k(self, k: usize) -> Approach {
        match self {
            ApproachName::Spm => Approach::Spm { k },
            ApproachName::Dhm => Approach::Dhm { k },
            ApproachName::Mf => Approach::Mf,
            ApproachName::Avg => Approach::Avg,
            ApproachName::Adj => Approach::Adj,
            ApproachName::SelfEst => Approach::SelfEst,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationName {
    Mean,
    InverseDistance,
}

impl From<AggregationName> for Aggregation {
    fn from(a: AggregationName) -> Self {
        match a {
            AggregationName::Mean => Aggregation::Mean,
            AggregationName::InverseDistance => Aggregation::InverseDistance,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct NeighborArgs {
    /// Number of donor pairs per segment for spm and dhm.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
    /// How donor features on one segment are combined.
    #[arg(long, value_enum, default_value_t = AggregationName::Mean)]
    pub aggregation: AggregationName,
}

pub fn predict_params(n: &NeighborArgs, mf: &MfArgs, seed: u64) -> PredictParams {
    PredictParams {
        mf: mf.params(seed),
        aggregation: n.aggregation.into(),
        ..PredictParams::default()
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    /// Directory receiving traces/, trips.json and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub drivers: usize,
    #[arg(long, default_value_t = 4)]
    pub vehicles: usize,
    #[arg(long, default_value_t = 15)]
    pub routes: usize,
    #[arg(long, default_value_t = 10)]
    pub segments: usize,
    #[arg(long, default_value_t = 1.0)]
    pub density: f64,
    /// Noise standard deviation relative to the mean segment energy.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Weight of an extra cubic speed term outside the model family.
    #[arg(long, default_value_t = 0.0)]
    pub misspecification: f64,
    /// Drop highway routes, which have no stops.
    #[arg(long)]
    pub urban_only: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitName {
    Kwh,
    Gallons,
    Liters,
}

impl From<UnitName> for EnergyUnit {
    fn from(u: UnitName) -> Self {
        match u {
            UnitName::Kwh => EnergyUnit::Kwh,
            UnitName::Gallons => EnergyUnit::Gallons,
            UnitName::Liters => EnergyUnit::Liters,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IngestArgs {
    /// Trip index JSON; trace paths are relative to its directory.
    #[arg(long)]
    pub trips: PathBuf,
    /// Segment store directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Unit of the cumulative energy column.
    #[arg(long, value_enum, default_value_t = UnitName::Kwh)]
    pub energy_unit: UnitName,
    #[command(flatten)]
    #[serde(flatten)]
    pub defaults: DefaultsArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    /// Segment store directory.
    #[arg(long)]
    pub store: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Output JSON; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AicScanArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Order grid as r1..r2,k1..k2,m1..m2.
    #[arg(long, default_value = "1..3,1..3,1..3", value_parser = parse_grid)]
    pub orders: OrderGrid,
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    pub ridge: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Model JSON written by `fit`.
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub driver: String,
    #[arg(long)]
    pub vehicle: String,
    /// Comma-separated segment ids in driving order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub route: Vec<String>,
    #[arg(long, value_enum)]
    pub approach: ApproachName,
    #[command(flatten)]
    #[serde(flatten)]
    pub neighbors: NeighborArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub mf: MfArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Approaches to compare; all six when omitted.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub approach: Vec<ApproachName>,
    #[command(flatten)]
    #[serde(flatten)]
    pub neighbors: NeighborArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub mf: MfArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Fraction of each pair's segments used for training.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

impl EvaluateArgs {
    pub fn approaches(&self) -> Vec<Approach> {
        let names: &[ApproachName] = if self.approach.is_empty() {
            &ApproachName::ALL
        } else {
            &self.approach
        };
        names
            .iter()
            .map(|a| a.with_k(self.neighbors.k as usize))
            .collect()
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DteArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub eval: EvaluateArgs,
    /// State of charge in [0, 1].
    #[arg(long)]
    pub soc: f64,
    #[arg(long)]
    pub capacity_ah: f64,
    /// Nominal pack voltage, V.
    #[arg(long)]
    pub voltage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OrderGrid {
    pub r: (usize, usize),
    pub k: (usize, usize),
    pub m: (usize, usize),
}

impl OrderGrid {
    pub fn orders(&self) -> drivesense::Result<Vec<ModelOrder>> {
        ModelOrder::grid(
            self.r.0..=self.r.1,
            self.k.0..=self.k.1,
            self.m.0..=self.m.1,
        )
    }
}

fn parse_order(s: &str) -> Result<ModelOrder, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [r, k, m] => ModelOrder::new(r, k, m).map_err(|e| e.to_string()),
        _ => Err(format!("expected r,k,m, got {s:?}")),
    }
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    let (lo, hi) = match s.split_once("..") {
        Some((a, b)) => (num(a)?, num(b.trim_start_matches('='))?),
        None => {
            let v = num(s)?;
            (v, v)
        }
    };
    if lo == 0 || lo > hi {
        return Err(format!("invalid range {s:?}"));
    }
    Ok((lo, hi))
}

fn parse_grid(s: &str) -> Result<OrderGrid, String> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts[..] {
        [r, k, m] => Ok(OrderGrid {
            r: parse_range(r)?,
            k: parse_range(k)?,
            m: parse_range(m)?,
        }),
        _ => Err(format!("expected r1..r2,k1..k2,m1..m2, got {s:?}")),
    }
}

//! Hold-out comparison of prediction approaches and the DTE table built on it.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::energy_model::{fit, EnergyModel, FitReport, ModelOrder, DEFAULT_RIDGE};
use crate::error::{Error, Result};
use crate::predictor::{
    dte_from_energy, predict, remaining_energy, Approach, BatteryState, PredictParams,
    PredictionReport,
};
use crate::trip_data::PairKey;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSplit {
    pub pair: PairKey,
    pub train: Vec<String>,
    /// Held-out segments in id order; used as the prediction route.
    pub test: Vec<String>,
}

/// Seeded per-pair split of observed segments into training and held-out
/// sets. Every pair with at least two segments keeps at least one of each.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<Vec<PairSplit>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut out = Vec::new();
    for (i, pair) in dataset.pairs().enumerate() {
        let mut segs: Vec<String> = dataset.segments_of(pair).cloned().collect();
        if segs.len() < 2 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        segs.shuffle(&mut rng);
        let n_train =
            ((segs.len() as f64 * train_fraction).round() as usize).clamp(1, segs.len() - 1);
        let mut test = segs.split_off(n_train);
        segs.sort();
        test.sort();
        out.push(PairSplit {
            pair: pair.clone(),
            train: segs,
            test,
        });
    }
    Ok(out)
}

/// Fits each pair on its training segments.
pub fn train_models(
    dataset: &Dataset,
    splits: &[PairSplit],
    order: ModelOrder,
    ridge: f64,
) -> (BTreeMap<PairKey, (EnergyModel, FitReport)>, Vec<String>) {
    let mut models = BTreeMap::new();
    let mut warnings = Vec::new();
    for s in splits {
        let samples: Vec<_> = s
            .train
            .iter()
            .filter_map(|seg| dataset.observation(&s.pair, seg))
            .filter_map(|o| {
                o.energy.map(|energy| crate::energy_model::TrainingSample {
                    features: o.features,
                    energy,
                })
            })
            .collect();
        match fit(&samples, order, ridge) {
            Ok(m) => {
                models.insert(s.pair.clone(), m);
            }
            Err(e) => warnings.push(format!("{}: {e}", s.pair)),
        }
    }
    (models, warnings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub approaches: Vec<Approach>,
    pub order: ModelOrder,
    pub ridge: f64,
    pub train_fraction: f64,
    pub seed: u64,
    pub params: PredictParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            approaches: vec![
                Approach::Spm { k: 3 },
                Approach::Dhm { k: 3 },
                Approach::Mf,
                Approach::Avg,
                Approach::Adj,
                Approach::SelfEst,
            ],
            order: ModelOrder::default(),
            ridge: DEFAULT_RIDGE,
            train_fraction: 0.8,
            seed: 0,
            params: PredictParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproachScore {
    pub approach: String,
    /// Mean over pairs of the accumulative-error RMSE on the held-out route.
    pub mean_rmse_acc: f64,
    pub per_pair: BTreeMap<String, f64>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub splits: Vec<PairSplit>,
    pub fits: BTreeMap<String, FitReport>,
    pub scores: Vec<ApproachScore>,
    pub reports: Vec<PredictionReport>,
    pub warnings: Vec<String>,
}

impl Evaluation {
    pub fn score(&self, approach: &str) -> Option<&ApproachScore> {
        self.scores.iter().find(|s| s.approach == approach)
    }
}

/// Trains every pair on its training split and predicts its held-out
/// segments with each approach.
pub fn evaluate(dataset: &Dataset, cfg: &EvalConfig) -> Result<Evaluation> {
    let splits = split(dataset, cfg.train_fraction, cfg.seed)?;
    let (fitted, mut warnings) = train_models(dataset, &splits, cfg.order, cfg.ridge);
    let models: BTreeMap<PairKey, EnergyModel> = fitted
        .iter()
        .map(|(p, (m, _))| (p.clone(), m.clone()))
        .collect();
    let mut scores = Vec::new();
    let mut reports = Vec::new();
    for &approach in &cfg.approaches {
        let mut per_pair = BTreeMap::new();
        let mut failures = Vec::new();
        for s in splits.iter().filter(|s| models.contains_key(&s.pair)) {
            match predict(&s.pair, &s.test, approach, dataset, &models, &cfg.params) {
                Ok(report) => {
                    match &report.metrics {
                        Some(m) => {
                            per_pair.insert(s.pair.to_string(), m.rmse_acc);
                        }
                        None => failures.push(format!("{}: no ground truth", s.pair)),
                    }
                    reports.push(report);
                }
                Err(e) => failures.push(format!("{}: {e}", s.pair)),
            }
        }
        let mean = if per_pair.is_empty() {
            f64::NAN
        } else {
            per_pair.values().sum::<f64>() / per_pair.len() as f64
        };
        scores.push(ApproachScore {
            approach: approach.to_string(),
            mean_rmse_acc: mean,
            per_pair,
            failures,
        });
    }
    if models.is_empty() {
        warnings.push("no pair could be trained".into());
    }
    Ok(Evaluation {
        splits,
        fits: fitted
            .into_iter()
            .map(|(p, (_, r))| (p.to_string(), r))
            .collect(),
        scores,
        reports,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DteRow {
    pub pair: String,
    pub approach: String,
    /// kWh/km
    pub intensity_hat: f64,
    pub intensity_true: f64,
    /// km
    pub dte_hat: f64,
    pub dte_true: f64,
    /// `dte_true − dte_hat`
    pub delta: f64,
    /// Relative error of the route energy.
    pub energy_error: f64,
}

/// Estimated and true DTE for every report with ground truth.
pub fn dte_table(reports: &[PredictionReport], battery: &BatteryState) -> Result<Vec<DteRow>> {
    battery.validate()?;
    let energy = remaining_energy(battery);
    let mut rows = Vec::new();
    for r in reports {
        let (Some(p_true), Some(m)) = (r.true_power_intensity(), &r.metrics) else {
            continue;
        };
        let p_hat = r.power_intensity()?;
        let dte_hat = dte_from_energy(energy, p_hat)?;
        let dte_true = dte_from_energy(energy, p_true)?;
        rows.push(DteRow {
            pair: r.target.to_string(),
            approach: r.approach.clone(),
            intensity_hat: p_hat,
            intensity_true: p_true,
            dte_hat,
            dte_true,
            delta: dte_true - dte_hat,
            energy_error: m.accumulative,
        });
    }
    Ok(rows)
}

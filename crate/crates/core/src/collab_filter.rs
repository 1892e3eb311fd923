//! Matrix factorization of sparse pairs × segments measurement matrices by
//! stochastic gradient descent, used to impute feature channels for data
//! points nobody observed.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::{Channel, SegmentFeatures};
use crate::trip_data::{DataPointKey, PairKey};

/// A sparse matrix of one measurement channel: rows are (driver, vehicle)
/// pairs, columns are segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseFeatureMatrix {
    pub rows: Vec<PairKey>,
    pub cols: Vec<String>,
    pub entries: BTreeMap<(usize, usize), f64>,
    pub measurement: String,
}

impl SparseFeatureMatrix {
    pub fn new(
        rows: Vec<PairKey>,
        cols: Vec<String>,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
        measurement: impl Into<String>,
    ) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, j, v) in triplets {
            if i >= rows.len() || j >= cols.len() {
                return Err(Error::Argument(format!("entry ({i}, {j}) out of bounds")));
            }
            if !v.is_finite() {
                return Err(Error::Argument(format!("non-finite entry at ({i}, {j})")));
            }
            if entries.insert((i, j), v).is_some() {
                return Err(Error::Argument(format!("duplicate entry at ({i}, {j})")));
            }
        }
        Ok(Self {
            rows,
            cols,
            entries,
            measurement: measurement.into(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    fn check_coverage(&self) -> Result<()> {
        let (n, m) = self.shape();
        let mut row_seen = vec![false; n];
        let mut col_seen = vec![false; m];
        for &(i, j) in self.entries.keys() {
            row_seen[i] = true;
            col_seen[j] = true;
        }
        if let Some(i) = row_seen.iter().position(|s| !s) {
            return Err(Error::Coverage(format!(
                "{}: row {} has no entries",
                self.measurement, self.rows[i]
            )));
        }
        if let Some(j) = col_seen.iter().position(|s| !s) {
            return Err(Error::Coverage(format!(
                "{}: column {} has no entries",
                self.measurement, self.cols[j]
            )));
        }
        Ok(())
    }

    /// Per-column mean of the observed entries.
    pub fn column_means(&self) -> Vec<Option<f64>> {
        let mut acc = vec![(0.0, 0usize); self.cols.len()];
        for (&(_, j), &v) in &self.entries {
            acc[j].0 += v;
            acc[j].1 += 1;
        }
        acc.into_iter()
            .map(|(s, n)| (n > 0).then(|| s / n as f64))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfParams {
    pub rank: usize,
    pub lambda_p: f64,
    pub lambda_q: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub tol: f64,
    pub seed: u64,
    /// Subtract the global mean before factorizing.
    pub center: bool,
    /// Divide by the root-mean-square entry before factorizing, so one
    /// learning rate suits channels of very different magnitude.
    pub normalize: bool,
    /// Independent initializations; the lowest final objective wins.
    pub restarts: usize,
}

impl Default for MfParams {
    fn default() -> Self {
        Self {
            rank: 3,
            lambda_p: 0.02,
            lambda_q: 0.02,
            learning_rate: 0.01,
            max_epochs: 5000,
            tol: 1e-6,
            seed: 0,
            center: false,
            normalize: true,
            restarts: 1,
        }
    }
}

impl MfParams {
    fn validate(&self, n: usize, m: usize) -> Result<()> {
        if self.rank == 0 || self.rank > n.min(m) {
            return Err(Error::Argument(format!(
                "rank {} must be in 1..={}",
                self.rank,
                n.min(m)
            )));
        }
        let positive = [self.lambda_p, self.lambda_q, self.learning_rate, self.tol];
        if !positive.iter().all(|v| *v > 0.0 && v.is_finite())
            || self.max_epochs == 0
            || self.restarts == 0
        {
            return Err(Error::Argument(
                "factorization hyperparameters must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `R ≈ offset + P Qᵀ`. Normalization, when enabled, is folded into `P`, so
/// `impute` reads raw units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factorization {
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub rank: usize,
    pub lambda_p: f64,
    pub lambda_q: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub epochs_run: usize,
    /// Regularized objective after the last epoch, in normalized units.
    pub final_objective: f64,
    /// Objective after every epoch.
    pub objective_history: Vec<f64>,
    pub offset: f64,
    pub measurement: String,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn objective(
    entries: &[(usize, usize, f64)],
    p: &[Vec<f64>],
    q: &[Vec<f64>],
    lambda_p: f64,
    lambda_q: f64,
) -> f64 {
    entries
        .iter()
        .map(|&(i, j, r)| {
            let e = r - dot(&p[i], &q[j]);
            e * e + lambda_p * dot(&p[i], &p[i]) + lambda_q * dot(&q[j], &q[j])
        })
        .sum()
}

pub fn factorize(r: &SparseFeatureMatrix, params: &MfParams) -> Result<Factorization> {
    let (n, m) = r.shape();
    params.validate(n, m)?;
    r.check_coverage()?;
    let mut best: Option<Factorization> = None;
    let mut first_err = None;
    for run in 0..params.restarts as u64 {
        let seed = params
            .seed
            .wrapping_add(run.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        match sgd(r, params, seed) {
            Ok(f) => {
                if best
                    .as_ref()
                    .is_none_or(|b| f.final_objective < b.final_objective)
                {
                    best = Some(f);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match (best, first_err) {
        (Some(f), _) => Ok(f),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("at least one restart runs"),
    }
}

fn sgd(r: &SparseFeatureMatrix, params: &MfParams, seed: u64) -> Result<Factorization> {
    let (n, m) = r.shape();
    let k = params.rank;

    let values: Vec<f64> = r.entries.values().copied().collect();
    let offset = if params.center {
        values.iter().sum::<f64>() / values.len() as f64
    } else {
        0.0
    };
    let scale = if params.normalize {
        let ms = values.iter().map(|v| (v - offset).powi(2)).sum::<f64>() / values.len() as f64;
        if ms > 0.0 {
            ms.sqrt()
        } else {
            1.0
        }
    } else {
        1.0
    };
    let mut entries: Vec<(usize, usize, f64)> = r
        .entries
        .iter()
        .map(|(&(i, j), &v)| (i, j, (v - offset) / scale))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = |rows: usize| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..k).map(|_| rng.random_range(-0.1..0.1)).collect())
            .collect()
    };
    let mut p = init(n);
    let mut q = init(m);

    let (lr, lp, lq) = (params.learning_rate, params.lambda_p, params.lambda_q);
    let mut history: Vec<f64> = Vec::new();
    let mut prev = objective(&entries, &p, &q, lp, lq);
    let mut pi = vec![0.0; k];
    for epoch in 1..=params.max_epochs {
        entries.shuffle(&mut rng);
        for &(i, j, v) in &entries {
            let e = v - dot(&p[i], &q[j]);
            pi.copy_from_slice(&p[i]);
            for f in 0..k {
                p[i][f] += lr * (e * q[j][f] - lp * pi[f]);
                q[j][f] += lr * (e * pi[f] - lq * q[j][f]);
            }
        }
        let obj = objective(&entries, &p, &q, lp, lq);
        history.push(obj);
        let diverging = history.len() > 10 && obj > 10.0 * history[history.len() - 11];
        if !obj.is_finite() || diverging {
            return Err(Error::Divergence {
                epoch,
                objective: obj,
            });
        }
        let converged = prev > 0.0 && ((prev - obj).abs() / prev) < params.tol;
        prev = obj;
        if converged || obj == 0.0 {
            break;
        }
    }

    for row in &mut p {
        row.iter_mut().for_each(|x| *x *= scale);
    }
    Ok(Factorization {
        p,
        q,
        rank: k,
        lambda_p: lp,
        lambda_q: lq,
        learning_rate: lr,
        seed,
        epochs_run: history.len(),
        final_objective: prev,
        objective_history: history,
        offset,
        measurement: r.measurement.clone(),
    })
}

impl Factorization {
    pub fn impute(&self, row: usize, col: usize) -> Result<f64> {
        let (Some(p), Some(q)) = (self.p.get(row), self.q.get(col)) else {
            return Err(Error::Argument(format!(
                "index ({row}, {col}) outside {}x{}",
                self.p.len(),
                self.q.len()
            )));
        };
        Ok(self.offset + dot(p, q))
    }
}

/// Imputed features for each requested data point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImputedFeatures {
    pub features: BTreeMap<DataPointKey, SegmentFeatures>,
    /// Targets that could not be imputed (segment or pair unknown).
    pub missing: Vec<DataPointKey>,
    pub warnings: Vec<String>,
}

/// Builds one matrix per interpolated channel from `dataset`, factorizes each
/// independently and reads the imputed values for `targets`.
///
/// The idle load comes from the target pair's own mean and the temperature
/// from the mean over the segment's observers. A channel whose factorization
/// fails falls back to its column mean; negative imputations are clamped to
/// zero.
pub fn impute_features(
    dataset: &Dataset,
    targets: &[DataPointKey],
    params: &MfParams,
) -> Result<ImputedFeatures> {
    let mut out = ImputedFeatures::default();
    let rows: Vec<PairKey> = dataset.pairs().cloned().collect();
    let cols: Vec<String> = dataset.segment_ids().cloned().collect();
    let row_of: BTreeMap<&PairKey, usize> = rows.iter().enumerate().map(|(i, p)| (p, i)).collect();
    let col_of: BTreeMap<&str, usize> = cols
        .iter()
        .enumerate()
        .map(|(j, s)| (s.as_str(), j))
        .collect();

    let mut cells = Vec::new();
    let mut seen = BTreeSet::new();
    for key in targets {
        if !seen.insert(key) {
            continue;
        }
        match (row_of.get(&key.pair()), col_of.get(key.segment_id.as_str())) {
            (Some(&i), Some(&j)) => cells.push((key.clone(), i, j)),
            _ => out.missing.push(key.clone()),
        }
    }
    if cells.is_empty() {
        return Ok(out);
    }

    let mut assembled: Vec<SegmentFeatures> = vec![SegmentFeatures::default(); cells.len()];
    for (ci, channel) in Channel::INTERPOLATED.into_iter().enumerate() {
        let triplets = dataset.iter().map(|o| {
            (
                row_of[&o.key.pair()],
                col_of[o.key.segment_id.as_str()],
                o.features.get(channel),
            )
        });
        let matrix =
            SparseFeatureMatrix::new(rows.clone(), cols.clone(), triplets, channel.name())?;
        let channel_params = MfParams {
            seed: params.seed.wrapping_add(ci as u64),
            rank: params.rank.min(rows.len()).min(cols.len()),
            ..*params
        };
        let values: Vec<f64> = match factorize(&matrix, &channel_params) {
            Ok(fac) => cells
                .iter()
                .map(|(_, i, j)| fac.impute(*i, *j))
                .collect::<Result<_>>()?,
            Err(e) => {
                out.warnings.push(format!(
                    "{}: factorization failed ({e}); using column means",
                    channel.name()
                ));
                let means = matrix.column_means();
                cells
                    .iter()
                    .map(|(_, _, j)| {
                        means[*j].ok_or_else(|| {
                            Error::MissingData(format!(
                                "{}: empty column {}",
                                channel.name(),
                                cols[*j]
                            ))
                        })
                    })
                    .collect::<Result<_>>()?
            }
        };
        for ((key, _, _), (slot, v)) in cells.iter().zip(assembled.iter_mut().zip(values)) {
            let v = if v < 0.0 {
                out.warnings.push(format!(
                    "{}: imputed {} = {v:.4} clamped to 0",
                    key,
                    channel.name()
                ));
                0.0
            } else {
                v
            };
            slot.set(channel, v);
        }
    }

    for ((key, _, _), mut f) in cells.into_iter().zip(assembled) {
        let pair = key.pair();
        f.idle_load = SegmentFeatures::mean(dataset.observations_of(&pair).map(|o| &o.features))
            .map(|m| m.idle_load)
            .unwrap_or_default();
        f.temperature = SegmentFeatures::mean(
            dataset
                .observers_of(&key.segment_id)
                .filter_map(|p| dataset.observation(p, &key.segment_id))
                .map(|o| &o.features),
        )
        .map(|m| m.temperature)
        .unwrap_or_default();
        out.features.insert(key, f);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(n: usize, m: usize, triplets: Vec<(usize, usize, f64)>) -> SparseFeatureMatrix {
        let rows = (0..n).map(|i| PairKey::new(format!("D{i}"), "V")).collect();
        let cols = (0..m).map(|j| format!("R{j}")).collect();
        SparseFeatureMatrix::new(rows, cols, triplets, "v").unwrap()
    }

    fn exact(k: usize) -> MfParams {
        MfParams {
            rank: k,
            lambda_p: 1e-9,
            lambda_q: 1e-9,
            learning_rate: 0.05,
            max_epochs: 20_000,
            tol: 1e-12,
            ..MfParams::default()
        }
    }

    #[test]
    fn rank_one_complete_matrix() {
        let r = matrix(
            2,
            2,
            vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 4.0)],
        );
        let f = factorize(&r, &exact(1)).unwrap();
        for (&(i, j), &v) in &r.entries {
            assert!((f.impute(i, j).unwrap() - v).abs() < 1e-3);
        }
    }

    #[test]
    fn single_entry() {
        let r = matrix(1, 1, vec![(0, 0, 5.0)]);
        let f = factorize(&r, &exact(1)).unwrap();
        assert!((f.impute(0, 0).unwrap() - 5.0).abs() < 1e-3);
    }

    #[test]
    fn missing_corner_of_rank_one() {
        let r = matrix(2, 2, vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0)]);
        let f = factorize(&r, &exact(1)).unwrap();
        assert!((f.impute(1, 1).unwrap() - 4.0).abs() < 1e-2);
    }

    #[test]
    fn zero_matrix_stays_near_zero() {
        let r = matrix(2, 3, vec![(0, 0, 0.0), (1, 1, 0.0), (0, 2, 0.0)]);
        let f = factorize(
            &r,
            &MfParams {
                rank: 1,
                ..MfParams::default()
            },
        )
        .unwrap();
        assert!(f.impute(1, 2).unwrap().abs() < 1e-2);
    }

    #[test]
    fn empty_row_is_a_coverage_error() {
        let r = matrix(2, 2, vec![(0, 0, 1.0), (0, 1, 2.0)]);
        assert!(matches!(
            factorize(
                &r,
                &MfParams {
                    rank: 1,
                    ..MfParams::default()
                }
            ),
            Err(Error::Coverage(_))
        ));
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let r = matrix(
            2,
            2,
            vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 4.0)],
        );
        let params = MfParams {
            rank: 1,
            learning_rate: 50.0,
            ..MfParams::default()
        };
        assert!(matches!(
            factorize(&r, &params),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn out_of_range_impute() {
        let r = matrix(1, 1, vec![(0, 0, 5.0)]);
        let f = factorize(&r, &exact(1)).unwrap();
        assert!(f.impute(1, 0).is_err());
    }

    #[test]
    fn duplicate_and_rank_checks() {
        let rows = vec![PairKey::new("D", "V")];
        let cols = vec!["R".to_string()];
        assert!(SparseFeatureMatrix::new(rows, cols, [(0, 0, 1.0), (0, 0, 2.0)], "v").is_err());
        let r = matrix(1, 1, vec![(0, 0, 5.0)]);
        assert!(factorize(
            &r,
            &MfParams {
                rank: 2,
                ..MfParams::default()
            }
        )
        .is_err());
    }

    #[test]
    fn seeded_runs_are_identical() {
        let r = matrix(
            3,
            3,
            vec![(0, 0, 1.0), (1, 1, 2.0), (2, 2, 3.0), (0, 2, 1.5)],
        );
        let params = MfParams {
            rank: 2,
            seed: 9,
            ..MfParams::default()
        };
        assert_eq!(
            factorize(&r, &params).unwrap(),
            factorize(&r, &params).unwrap()
        );
    }

    #[test]
    fn restarts_keep_the_lowest_objective() {
        let r = matrix(
            3,
            3,
            vec![
                (0, 0, 1.0),
                (1, 1, 2.0),
                (2, 2, 3.0),
                (0, 2, 1.5),
                (2, 0, 0.5),
            ],
        );
        let single = |seed| {
            factorize(
                &r,
                &MfParams {
                    rank: 2,
                    seed,
                    ..MfParams::default()
                },
            )
            .unwrap()
            .final_objective
        };
        let best = factorize(
            &r,
            &MfParams {
                rank: 2,
                restarts: 3,
                ..MfParams::default()
            },
        )
        .unwrap();
        let step = 0x9e37_79b9_7f4a_7c15u64;
        let runs = [single(0), single(step), single(step.wrapping_mul(2))];
        assert_eq!(
            best.final_objective,
            runs.iter().copied().fold(f64::INFINITY, f64::min)
        );
        assert!(factorize(
            &r,
            &MfParams {
                restarts: 0,
                ..MfParams::default()
            }
        )
        .is_err());
    }
}

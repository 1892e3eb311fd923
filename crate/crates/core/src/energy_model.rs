//! The blackbox energy model: a polynomial-in-features moving part plus a
//! linear idle part, fitted per (driver, vehicle) by least squares.
//!
//! ```text
//! E_mv = Σ_{i≤r} α_v,i v^i + Σ_{i≤k} ⟨α_d,i, d^i⟩ + Σ_{i≤m} ⟨α_a,i, a^i⟩ + α_g g + α_ℓ ℓ + c
//! E_id = β1 μ ℓ + β2 ω
//! ```
//!
//! Tuple powers are component-wise: `d^i = (τ_d^i, μ_d^i, σ_d^i)`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{EnergySplit, SegmentFeatures};

pub const DEFAULT_RIDGE: f64 = 1e-10;

/// Polynomial powers of speed, deceleration tuple and acceleration tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModelOrder {
    pub r: usize,
    pub k: usize,
    pub m: usize,
}

impl ModelOrder {
    pub const MAX_POWER: usize = 4;

    pub fn new(r: usize, k: usize, m: usize) -> Result<Self> {
        let order = Self { r, k, m };
        order.validate()?;
        Ok(order)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |p: usize| (1..=Self::MAX_POWER).contains(&p);
        if ok(self.r) && ok(self.k) && ok(self.m) {
            Ok(())
        } else {
            Err(Error::Argument(format!(
                "model order {self} outside 1..={}",
                Self::MAX_POWER
            )))
        }
    }

    pub fn moving_coefficients(&self) -> usize {
        self.r + 3 * self.k + 3 * self.m + 3
    }

    /// Total number of estimated coefficients, moving and idle.
    pub fn coefficient_count(&self) -> usize {
        self.moving_coefficients() + 2
    }

    /// Every order in the inclusive box `r × k × m`.
    pub fn grid(
        r: std::ops::RangeInclusive<usize>,
        k: std::ops::RangeInclusive<usize>,
        m: std::ops::RangeInclusive<usize>,
    ) -> Result<Vec<ModelOrder>> {
        let mut out = Vec::new();
        for r in r {
            for k in k.clone() {
                for m in m.clone() {
                    out.push(ModelOrder::new(r, k, m)?);
                }
            }
        }
        Ok(out)
    }
}

impl Default for ModelOrder {
    fn default() -> Self {
        Self { r: 2, k: 2, m: 2 }
    }
}

impl fmt::Display for ModelOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.r, self.k, self.m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub order: ModelOrder,
    /// α_v,1..r
    pub speed: Vec<f64>,
    /// α_d,1..k, each applied to (τ_d^i, μ_d^i, σ_d^i)
    pub decel: Vec<[f64; 3]>,
    /// α_a,1..m
    pub accel: Vec<[f64; 3]>,
    pub gyro: f64,
    pub load: f64,
    pub constant: f64,
    /// β1, multiplies idle time × idle load
    pub idle_load: f64,
    /// β2, multiplies temperature
    pub temperature: f64,
    pub energy_unit: String,
}

impl EnergyModel {
    /// All-zero model of the given order.
    pub fn zeros(order: ModelOrder) -> Self {
        Self {
            order,
            speed: vec![0.0; order.r],
            decel: vec![[0.0; 3]; order.k],
            accel: vec![[0.0; 3]; order.m],
            gyro: 0.0,
            load: 0.0,
            constant: 0.0,
            idle_load: 0.0,
            temperature: 0.0,
            energy_unit: "kWh".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.order.validate()?;
        if self.speed.len() != self.order.r
            || self.decel.len() != self.order.k
            || self.accel.len() != self.order.m
        {
            return Err(Error::Argument(format!(
                "coefficient counts do not match order {}",
                self.order
            )));
        }
        if !self.coefficients().iter().all(|c| c.is_finite()) {
            return Err(Error::Argument("non-finite model coefficient".into()));
        }
        Ok(())
    }

    /// Moving coefficients in design-column order followed by β1, β2.
    pub fn coefficients(&self) -> Vec<f64> {
        let mut out = self.moving_coefficients();
        out.extend([self.idle_load, self.temperature]);
        out
    }

    fn moving_coefficients(&self) -> Vec<f64> {
        let mut out = self.speed.clone();
        out.extend(self.decel.iter().flatten());
        out.extend(self.accel.iter().flatten());
        out.extend([self.gyro, self.load, self.constant]);
        out
    }

    fn from_solution(order: ModelOrder, moving: &[f64], idle: &[f64]) -> Self {
        let mut it = moving.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let speed = take(order.r);
        let triples = |v: Vec<f64>| v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let decel = triples(take(3 * order.k));
        let accel = triples(take(3 * order.m));
        let tail = take(3);
        Self {
            order,
            speed,
            decel,
            accel,
            gyro: tail[0],
            load: tail[1],
            constant: tail[2],
            idle_load: idle[0],
            temperature: idle[1],
            energy_unit: "kWh".into(),
        }
    }
}

pub fn predict_moving(model: &EnergyModel, f: &SegmentFeatures) -> f64 {
    let mut e = model.constant + model.gyro * f.gyro + model.load * f.idle_load;
    let mut vp = 1.0;
    for a in &model.speed {
        vp *= f.speed;
        e += a * vp;
    }
    e += tuple_terms(&model.decel, f.decel.components());
    e += tuple_terms(&model.accel, f.accel.components());
    e
}

fn tuple_terms(coefs: &[[f64; 3]], base: [f64; 3]) -> f64 {
    let mut pw = [1.0; 3];
    let mut e = 0.0;
    for c in coefs {
        for j in 0..3 {
            pw[j] *= base[j];
            e += c[j] * pw[j];
        }
    }
    e
}

pub fn predict_idle(model: &EnergyModel, f: &SegmentFeatures) -> f64 {
    model.idle_load * f.idle_time * f.idle_load + model.temperature * f.temperature
}

pub fn predict_total(model: &EnergyModel, f: &SegmentFeatures) -> f64 {
    predict_moving(model, f) + predict_idle(model, f)
}

pub(crate) fn moving_design_row(order: ModelOrder, f: &SegmentFeatures) -> Vec<f64> {
    let mut row = Vec::with_capacity(order.moving_coefficients());
    row.extend((1..=order.r).map(|i| f.speed.powi(i as i32)));
    for (n, base) in [
        (order.k, f.decel.components()),
        (order.m, f.accel.components()),
    ] {
        for i in 1..=n {
            row.extend(base.iter().map(|b| b.powi(i as i32)));
        }
    }
    row.extend([f.gyro, f.idle_load, 1.0]);
    row
}

fn idle_design_row(f: &SegmentFeatures) -> Vec<f64> {
    vec![f.idle_time * f.idle_load, f.temperature]
}

/// Least squares with Tikhonov damping `ridge` on the normal-equation
/// diagonal, i.e. `min |Xβ − y|² + ridge |β|²`. Solved by SVD of the
/// column-scaled augmented system rather than by forming `XᵀX`.
pub(crate) fn ridge_lstsq(rows: &[Vec<f64>], y: &[f64], ridge: f64) -> Result<Vec<f64>> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Argument(format!(
            "ridge must be non-negative, got {ridge}"
        )));
    }
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if n == 0 || p == 0 {
        return Err(Error::Argument("empty least-squares system".into()));
    }
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    let scale: Vec<f64> = (0..p)
        .map(|j| {
            let norm = x.column(j).norm();
            if norm > 0.0 {
                norm
            } else {
                1.0
            }
        })
        .collect();
    let extra = if ridge > 0.0 { p } else { 0 };
    let mut a = DMatrix::zeros(n + extra, p);
    let mut b = DVector::zeros(n + extra);
    for i in 0..n {
        for j in 0..p {
            a[(i, j)] = x[(i, j)] / scale[j];
        }
        b[i] = y[i];
    }
    for j in 0..extra {
        a[(n + j, j)] = ridge.sqrt() / scale[j];
    }
    if !a.iter().chain(b.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numeric(
            "non-finite value in least-squares system".into(),
        ));
    }
    let svd = a.svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if max_sv.is_nan() || max_sv <= 0.0 || min_sv <= max_sv * 1e-11 {
        return Err(Error::Numeric(format!(
            "singular least-squares system (condition {:e})",
            max_sv / min_sv
        )));
    }
    let sol = svd
        .solve(&b, 0.0)
        .map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(sol.iter().zip(&scale).map(|(s, c)| s / c).collect())
}

/// One training row: features and the measured energy split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub features: SegmentFeatures,
    pub energy: EnergySplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Segments that entered the error sum.
    pub n: usize,
    pub sse: f64,
    /// Estimated coefficient count.
    pub k: usize,
    pub aic: f64,
    /// Relative per-segment errors; `None` where the measured energy is zero.
    pub per_segment_errors: Vec<Option<f64>>,
}

impl FitReport {
    pub fn rms_error(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.sse / self.n as f64).sqrt()
        }
    }
}

pub fn fit(
    samples: &[TrainingSample],
    order: ModelOrder,
    ridge: f64,
) -> Result<(EnergyModel, FitReport)> {
    order.validate()?;
    let k = order.coefficient_count();
    if samples.len() <= k {
        return Err(Error::Underdetermined {
            n: samples.len(),
            k,
        });
    }
    for s in samples {
        if !s.energy.total.is_finite() || !s.energy.idle.is_finite() {
            return Err(Error::Argument("non-finite measured energy".into()));
        }
        if !s.features.is_finite() {
            return Err(Error::Argument("non-finite features".into()));
        }
    }
    let mv_rows: Vec<_> = samples
        .iter()
        .map(|s| moving_design_row(order, &s.features))
        .collect();
    let mv_y: Vec<_> = samples.iter().map(|s| s.energy.moving()).collect();
    let id_rows: Vec<_> = samples
        .iter()
        .map(|s| idle_design_row(&s.features))
        .collect();
    let id_y: Vec<_> = samples.iter().map(|s| s.energy.idle).collect();

    let moving = ridge_lstsq(&mv_rows, &mv_y, ridge)?;
    let idle = ridge_lstsq(&id_rows, &id_y, ridge)?;
    let model = EnergyModel::from_solution(order, &moving, &idle);

    let pred: Vec<f64> = samples
        .iter()
        .map(|s| predict_total(&model, &s.features))
        .collect();
    let truth: Vec<f64> = samples.iter().map(|s| s.energy.total).collect();
    let metrics = error_metrics(&pred, &truth)?;
    let report = report_from_errors(metrics.per_segment, k);
    Ok((model, report))
}

/// Builds a [`FitReport`] from per-segment errors.
pub fn report_from_errors(per_segment_errors: Vec<Option<f64>>, k: usize) -> FitReport {
    let used: Vec<f64> = per_segment_errors.iter().flatten().copied().collect();
    let sse = used.iter().map(|e| e * e).sum();
    let n = used.len();
    FitReport {
        n,
        sse,
        k,
        aic: aic_value(n, sse, k),
        per_segment_errors,
    }
}

/// `n ln(sse / n) + 2K`; negative infinity for a perfect fit.
pub fn aic_value(n: usize, sse: f64, k: usize) -> f64 {
    if sse == 0.0 {
        return f64::NEG_INFINITY;
    }
    let n = n as f64;
    n * (sse / n).ln() + 2.0 * k as f64
}

pub fn aic(report: &FitReport) -> f64 {
    aic_value(report.n, report.sse, report.k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AicEntry {
    pub order: ModelOrder,
    /// Mean AIC over the groups.
    pub aic: f64,
    /// Mean normalized AIC over the groups; 0 for the best order.
    pub normalized: f64,
    pub per_group: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AicScan {
    /// Ascending by normalized AIC.
    pub ranked: Vec<AicEntry>,
    /// Orders that could not be fitted on at least one group.
    pub failed: Vec<(ModelOrder, String)>,
}

impl AicScan {
    pub fn best(&self) -> Option<ModelOrder> {
        self.ranked.first().map(|e| e.order)
    }
}

/// Fits every order on every group (typically one group per driver-vehicle
/// pair) and ranks orders by their AIC averaged over groups.
///
/// The normalized score is `(AIC − min AIC) / |min AIC|`, with the minimum
/// taken over all groups and orders. For a positive minimum this equals
/// `AIC / min − 1`; the absolute value keeps the ordering intact when AIC is
/// negative, which it is whenever the relative errors are below 1.
pub fn aic_scan(
    groups: &[Vec<TrainingSample>],
    orders: &[ModelOrder],
    ridge: f64,
) -> Result<AicScan> {
    if groups.is_empty() {
        return Err(Error::Argument("aic scan needs at least one group".into()));
    }
    let mut results: BTreeMap<ModelOrder, Vec<f64>> = BTreeMap::new();
    let mut failed = Vec::new();
    'orders: for &order in orders {
        let mut per_group = Vec::with_capacity(groups.len());
        for group in groups {
            match fit(group, order, ridge) {
                Ok((_, report)) => per_group.push(report.aic),
                Err(e) => {
                    failed.push((order, e.to_string()));
                    continue 'orders;
                }
            }
        }
        results.insert(order, per_group);
    }

    let global_min = results
        .values()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let normalize = |a: f64| -> f64 {
        if global_min == f64::NEG_INFINITY {
            if a == f64::NEG_INFINITY {
                0.0
            } else {
                f64::INFINITY
            }
        } else if global_min == 0.0 {
            a - global_min
        } else {
            (a - global_min) / global_min.abs()
        }
    };
    let mut ranked: Vec<AicEntry> = results
        .into_iter()
        .map(|(order, per_group)| {
            let g = per_group.len() as f64;
            AicEntry {
                order,
                aic: per_group.iter().sum::<f64>() / g,
                normalized: per_group.iter().map(|&a| normalize(a)).sum::<f64>() / g,
                per_group,
            }
        })
        .collect();
    ranked.sort_by(|a, b| {
        a.normalized
            .total_cmp(&b.normalized)
            .then(
                a.order
                    .coefficient_count()
                    .cmp(&b.order.coefficient_count()),
            )
            .then(a.order.cmp(&b.order))
    });
    Ok(AicScan { ranked, failed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    /// `(E − Ê) / E` per segment; `None` where `E = 0`.
    pub per_segment: Vec<Option<f64>>,
    /// `|ΣE − ΣÊ| / ΣE` over the whole sequence.
    pub accumulative: f64,
    /// Root mean square of the accumulative error over every prefix.
    pub rmse_acc: f64,
    /// Indices whose per-segment error is undefined.
    pub excluded: Vec<usize>,
}

pub fn error_metrics(pred: &[f64], truth: &[f64]) -> Result<ErrorMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} measurements",
            pred.len(),
            truth.len()
        )));
    }
    let mut per_segment = Vec::with_capacity(truth.len());
    let mut excluded = Vec::new();
    for (i, (&p, &e)) in pred.iter().zip(truth).enumerate() {
        if e == 0.0 {
            excluded.push(i);
            per_segment.push(None);
        } else {
            per_segment.push(Some((e - p) / e));
        }
    }
    let (mut sum_e, mut sum_p) = (0.0, 0.0);
    let (mut sq, mut count) = (0.0, 0usize);
    for (&p, &e) in pred.iter().zip(truth) {
        sum_e += e;
        sum_p += p;
        if sum_e != 0.0 {
            sq += ((sum_e - sum_p) / sum_e).powi(2);
            count += 1;
        }
    }
    if sum_e == 0.0 {
        return Err(Error::Argument("total measured energy is zero".into()));
    }
    Ok(ErrorMetrics {
        per_segment,
        accumulative: (sum_e - sum_p).abs() / sum_e,
        rmse_acc: (sq / count as f64).sqrt(),
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::AccelTuple;

    fn features(v: f64) -> SegmentFeatures {
        SegmentFeatures {
            speed: v,
            ..SegmentFeatures::default()
        }
    }

    #[test]
    fn coefficient_count_by_order() {
        assert_eq!(ModelOrder::new(2, 2, 2).unwrap().coefficient_count(), 19);
        assert_eq!(ModelOrder::new(1, 1, 1).unwrap().coefficient_count(), 12);
        assert!(ModelOrder::new(0, 2, 2).is_err());
        assert!(ModelOrder::new(2, 5, 2).is_err());
    }

    #[test]
    fn constant_only_model() {
        let mut m = EnergyModel::zeros(ModelOrder::default());
        m.constant = 0.1;
        assert_eq!(predict_moving(&m, &SegmentFeatures::default()), 0.1);
        assert_eq!(predict_idle(&m, &SegmentFeatures::default()), 0.0);
        assert_eq!(predict_total(&m, &SegmentFeatures::default()), 0.1);
    }

    #[test]
    fn idle_product() {
        let mut m = EnergyModel::zeros(ModelOrder::default());
        m.idle_load = 1e-4;
        m.temperature = 0.01;
        let f = SegmentFeatures {
            idle_time: 120.0,
            idle_load: 2.0,
            temperature: 30.0,
            ..SegmentFeatures::default()
        };
        assert!((predict_idle(&m, &f) - 0.324).abs() < 1e-12);
    }

    #[test]
    fn tuple_powers_are_componentwise() {
        let mut m = EnergyModel::zeros(ModelOrder::new(1, 2, 1).unwrap());
        m.decel = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]];
        let f = SegmentFeatures {
            decel: AccelTuple {
                duration: 5.0,
                mean: 2.0,
                std: 3.0,
            },
            ..SegmentFeatures::default()
        };
        assert_eq!(predict_moving(&m, &f), 5.0 + 4.0 + 9.0);
    }

    #[test]
    fn aic_known_values() {
        assert!((aic_value(100, 1.0, 9) - (100.0 * 0.01f64.ln() + 18.0)).abs() < 1e-9);
        assert!((aic_value(100, 100.0, 9) - 18.0).abs() < 1e-12);
        assert_eq!(aic_value(100, 0.0, 9), f64::NEG_INFINITY);
        assert!((aic_value(50, 3.0, 18) - aic_value(50, 3.0, 9) - 18.0).abs() < 1e-12);
    }

    #[test]
    fn offsetting_errors() {
        let m = error_metrics(&[9.0, 11.0], &[10.0, 10.0]).unwrap();
        assert!((m.per_segment[0].unwrap() - 0.1).abs() < 1e-15);
        assert!((m.per_segment[1].unwrap() + 0.1).abs() < 1e-15);
        assert_eq!(m.accumulative, 0.0);
        // prefixes: 0.1, 0.0
        assert!((m.rmse_acc - (0.01f64 / 2.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_measurement_is_excluded() {
        let m = error_metrics(&[1.0, 2.0], &[0.0, 2.0]).unwrap();
        assert_eq!(m.excluded, vec![0]);
        assert!(m.per_segment[0].is_none());
        assert!(error_metrics(&[1.0], &[0.0]).is_err());
        assert!(error_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn underdetermined_fit_rejected() {
        let s = TrainingSample {
            features: features(50.0),
            energy: EnergySplit {
                total: 1.0,
                idle: 0.0,
            },
        };
        let samples = vec![s; 19];
        assert!(matches!(
            fit(&samples, ModelOrder::default(), 0.0),
            Err(Error::Underdetermined { n: 19, k: 19 })
        ));
    }

    #[test]
    fn collinear_design_is_a_numeric_error() {
        // every feature constant: columns are multiples of the intercept
        let s = TrainingSample {
            features: features(50.0),
            energy: EnergySplit {
                total: 1.0,
                idle: 0.1,
            },
        };
        let samples = vec![s; 40];
        assert!(matches!(
            fit(&samples, ModelOrder::new(1, 1, 1).unwrap(), 0.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn ridge_lstsq_matches_normal_equations() {
        let rows = vec![
            vec![1.0, 2.0],
            vec![1.0, 3.0],
            vec![1.0, 5.0],
            vec![1.0, 7.0],
        ];
        let y = [1.0, 2.0, 2.5, 4.0];
        let ridge = 0.7;
        let beta = ridge_lstsq(&rows, &y, ridge).unwrap();
        // (XᵀX + λI) β = Xᵀy by hand
        let (mut a, mut b, mut d, mut u, mut w) = (ridge, 0.0, ridge, 0.0, 0.0);
        for (r, &yi) in rows.iter().zip(&y) {
            a += r[0] * r[0];
            b += r[0] * r[1];
            d += r[1] * r[1];
            u += r[0] * yi;
            w += r[1] * yi;
        }
        let det = a * d - b * b;
        let expect = [(d * u - b * w) / det, (a * w - b * u) / det];
        assert!((beta[0] - expect[0]).abs() < 1e-12);
        assert!((beta[1] - expect[1]).abs() < 1e-12);
    }
}

//! Ranking (driver, vehicle) pairs by similarity: dynamic time warping over
//! speed-vs-distance profiles, and a 4-D driving-habit space built from
//! per-speed-bin average acceleration and deceleration.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::SegmentFeatures;
use crate::trip_data::PairKey;

/// Width of the speed bins, km/h.
pub const HABIT_BIN_KMH: f64 = 10.0;
/// Bins with fewer points than this are ignored.
pub const HABIT_MIN_POINTS: usize = 10;
/// Bins starting at or above this speed count as high-speed.
pub const HABIT_SPEED_THRESHOLD_KMH: f64 = 80.0;

/// Alignment between two series; indices are 0-based, so the first step is
/// `(0, 0)` and the last `(n_x − 1, n_y − 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpPath {
    pub steps: Vec<(usize, usize)>,
    pub total_distance: f64,
}

impl WarpPath {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Checks the boundary, monotonicity/continuity and length constraints.
    pub fn is_admissible(&self, n_x: usize, n_y: usize) -> bool {
        let (Some(&first), Some(&last)) = (self.steps.first(), self.steps.last()) else {
            return false;
        };
        if first != (0, 0) || last != (n_x - 1, n_y - 1) {
            return false;
        }
        let steps_ok = self.steps.windows(2).all(|w| {
            let (di, dj) = (w[1].0.wrapping_sub(w[0].0), w[1].1.wrapping_sub(w[0].1));
            di <= 1 && dj <= 1 && di + dj > 0
        });
        steps_ok && self.len() >= n_x.max(n_y) && self.len() < n_x + n_y
    }
}

/// Exact O(n·m) DTW with cost `|x[i] − y[j]|`.
///
/// Among equal-cost predecessors the backtrack prefers `(i, j−1)`, then
/// `(i−1, j)`, then the diagonal, which makes the returned path unique.
pub fn dtw_distance(x: &[f64], y: &[f64]) -> Result<(f64, WarpPath)> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Argument("dtw needs two non-empty series".into()));
    }
    let (n, m) = (x.len(), y.len());
    let mut acc = vec![f64::INFINITY; n * m];
    let at = |i: usize, j: usize| i * m + j;
    for i in 0..n {
        for j in 0..m {
            let cost = (x[i] - y[j]).abs();
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let mut b = f64::INFINITY;
                if i > 0 {
                    b = b.min(acc[at(i - 1, j)]);
                }
                if j > 0 {
                    b = b.min(acc[at(i, j - 1)]);
                }
                if i > 0 && j > 0 {
                    b = b.min(acc[at(i - 1, j - 1)]);
                }
                b
            };
            acc[at(i, j)] = cost + best;
        }
    }

    let mut steps = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let mut candidates = Vec::with_capacity(3);
        if j > 0 {
            candidates.push((i, j - 1));
        }
        if i > 0 {
            candidates.push((i - 1, j));
        }
        if i > 0 && j > 0 {
            candidates.push((i - 1, j - 1));
        }
        let mut best = candidates[0];
        for &c in &candidates[1..] {
            if acc[at(c.0, c.1)] < acc[at(best.0, best.1)] {
                best = c;
            }
        }
        (i, j) = best;
        steps.push(best);
    }
    steps.reverse();
    let total = acc[at(n - 1, m - 1)];
    Ok((
        total,
        WarpPath {
            steps,
            total_distance: total,
        },
    ))
}

/// DTW distance divided by the warp path length.
pub fn normalized_dtw(x: &[f64], y: &[f64]) -> Result<f64> {
    let (d, path) = dtw_distance(x, y)?;
    Ok(d / path.len() as f64)
}

/// Average path-normalized DTW distance between two pairs over the segments
/// both have observed. `+∞` when they share no segment.
pub fn pair_similarity(a: &PairKey, b: &PairKey, dataset: &Dataset) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for seg in dataset.segments_of(a) {
        let (Some(oa), Some(ob)) = (dataset.observation(a, seg), dataset.observation(b, seg))
        else {
            continue;
        };
        if let Ok(d) = normalized_dtw(&oa.profile, &ob.profile) {
            sum += d;
            count += 1;
        }
    }
    if count == 0 {
        f64::INFINITY
    } else {
        sum / count as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbors {
    /// Ascending by distance, ties broken lexicographically by pair.
    pub ranked: Vec<(PairKey, f64)>,
    /// Fewer than `k` candidates had a finite distance.
    pub shortfall: bool,
}

fn rank(mut scored: Vec<(PairKey, f64)>, k: usize) -> Neighbors {
    scored.retain(|(_, d)| d.is_finite());
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let shortfall = scored.len() < k;
    scored.truncate(k);
    Neighbors {
        ranked: scored,
        shortfall,
    }
}

/// The `k` candidates with the smallest finite profile distance to `target`.
pub fn knn_by_profile(
    target: &PairKey,
    candidates: &[PairKey],
    k: usize,
    dataset: &Dataset,
) -> Neighbors {
    let scored = candidates
        .iter()
        .filter(|c| *c != target)
        .map(|c| (c.clone(), pair_similarity(target, c, dataset)))
        .collect();
    rank(scored, k)
}

/// Low/high-speed estimated average acceleration and deceleration, m/s².
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HabitTuple {
    pub accel_low: Option<f64>,
    pub accel_high: Option<f64>,
    pub decel_low: Option<f64>,
    pub decel_high: Option<f64>,
}

impl HabitTuple {
    pub fn components(&self) -> [Option<f64>; 4] {
        [
            self.accel_low,
            self.accel_high,
            self.decel_low,
            self.decel_high,
        ]
    }
}

/// Bins per-segment `(v, μ_a, μ_d)` points by speed, drops sparse bins, and
/// averages the bin means separately below and above the speed threshold.
pub fn habit_tuple(history: &[SegmentFeatures]) -> Result<HabitTuple> {
    if history.is_empty() {
        return Err(Error::Argument(
            "habit tuple needs a non-empty history".into(),
        ));
    }
    let mut bins: std::collections::BTreeMap<i64, (usize, f64, f64)> = Default::default();
    for f in history {
        let bin = (f.speed / HABIT_BIN_KMH).floor() as i64;
        let e = bins.entry(bin).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += f.accel.mean;
        e.2 += f.decel.mean;
    }
    let threshold_bin = (HABIT_SPEED_THRESHOLD_KMH / HABIT_BIN_KMH).round() as i64;
    let (mut low, mut high) = (Vec::new(), Vec::new());
    for (bin, (n, a, d)) in bins {
        if n < HABIT_MIN_POINTS {
            continue;
        }
        let means = (a / n as f64, d / n as f64);
        if bin < threshold_bin {
            low.push(means);
        } else {
            high.push(means);
        }
    }
    let avg = |v: &[(f64, f64)], pick: fn(&(f64, f64)) -> f64| -> Option<f64> {
        (!v.is_empty()).then(|| v.iter().map(pick).sum::<f64>() / v.len() as f64)
    };
    Ok(HabitTuple {
        accel_low: avg(&low, |p| p.0),
        accel_high: avg(&high, |p| p.0),
        decel_low: avg(&low, |p| p.1),
        decel_high: avg(&high, |p| p.1),
    })
}

/// Per-component population standard deviation over the candidates that have
/// the component set; `None` when fewer than two do or the spread is zero.
fn component_scales(candidates: &[(PairKey, HabitTuple)]) -> [Option<f64>; 4] {
    let mut out = [None; 4];
    for (c, slot) in out.iter_mut().enumerate() {
        let vals: Vec<f64> = candidates
            .iter()
            .filter_map(|(_, h)| h.components()[c])
            .collect();
        if vals.len() < 2 {
            continue;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        if var > 0.0 {
            *slot = Some(var.sqrt());
        }
    }
    out
}

/// Standardized Euclidean distance over the components both tuples have,
/// rescaled to four dimensions. `+∞` when nothing is shared.
pub fn habit_distance(a: &HabitTuple, b: &HabitTuple, scales: &[Option<f64>; 4]) -> f64 {
    let (ca, cb) = (a.components(), b.components());
    let mut sum = 0.0;
    let mut used = 0usize;
    for c in 0..4 {
        if let (Some(x), Some(y), Some(s)) = (ca[c], cb[c], scales[c]) {
            sum += ((x - y) / s).powi(2);
            used += 1;
        }
    }
    if used == 0 {
        f64::INFINITY
    } else {
        (sum * 4.0 / used as f64).sqrt()
    }
}

pub fn knn_by_habit(
    target: &HabitTuple,
    candidates: &[(PairKey, HabitTuple)],
    k: usize,
) -> Neighbors {
    let scales = component_scales(candidates);
    let scored = candidates
        .iter()
        .map(|(p, h)| (p.clone(), habit_distance(target, h, &scales)))
        .collect();
    rank(scored, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::AccelTuple;

    #[test]
    fn identical_series_have_zero_distance() {
        let x = [1.0, 3.0, 2.0, 5.0];
        let (d, path) = dtw_distance(&x, &x).unwrap();
        assert_eq!(d, 0.0);
        assert!(path.is_admissible(4, 4));
    }

    #[test]
    fn two_point_example() {
        let (d, path) = dtw_distance(&[1.0, 2.0], &[2.0, 2.0]).unwrap();
        assert_eq!(d, 1.0);
        assert_eq!(path.steps, vec![(0, 0), (1, 0), (1, 1)]);
    }

    #[test]
    fn empty_series_rejected() {
        assert!(dtw_distance(&[], &[1.0]).is_err());
    }

    #[test]
    fn single_points() {
        let (d, path) = dtw_distance(&[3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(d, 2.0 + 1.0);
        assert_eq!(path.steps, vec![(0, 0), (0, 1), (0, 2)]);
    }

    fn point(v: f64, a: f64, d: f64) -> SegmentFeatures {
        SegmentFeatures {
            speed: v,
            accel: AccelTuple {
                duration: 1.0,
                mean: a,
                std: 0.0,
            },
            decel: AccelTuple {
                duration: 1.0,
                mean: d,
                std: 0.0,
            },
            ..SegmentFeatures::default()
        }
    }

    #[test]
    fn single_low_bin_mean() {
        let accels = [0.5, 0.7, 0.4, 0.8, 0.6, 0.6, 0.5, 0.7, 0.55, 0.65];
        let history: Vec<_> = accels.iter().map(|&a| point(45.0, a, 1.0)).collect();
        let h = habit_tuple(&history).unwrap();
        assert!((h.accel_low.unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(h.decel_low, Some(1.0));
        assert_eq!(h.accel_high, None);
    }

    #[test]
    fn sparse_bin_is_ignored() {
        let mut history: Vec<_> = (0..10).map(|_| point(45.0, 1.0, 1.0)).collect();
        history.extend((0..9).map(|_| point(65.0, 3.0, 3.0)));
        history.extend((0..9).map(|_| point(95.0, 3.0, 3.0)));
        let h = habit_tuple(&history).unwrap();
        assert_eq!(h.accel_low, Some(1.0));
        assert_eq!(h.accel_high, None);
    }

    #[test]
    fn eighty_belongs_to_high_side() {
        let history: Vec<_> = (0..10).map(|_| point(80.0, 0.4, 0.3)).collect();
        let h = habit_tuple(&history).unwrap();
        assert!((h.accel_high.unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(h.accel_low, None);
    }

    #[test]
    fn habit_knn_prefers_identical() {
        let t = HabitTuple {
            accel_low: Some(1.0),
            accel_high: Some(0.5),
            decel_low: Some(1.2),
            decel_high: Some(0.6),
        };
        let near = HabitTuple {
            accel_low: Some(1.5),
            ..t
        };
        let far = HabitTuple {
            accel_low: Some(2.0),
            ..t
        };
        let cands = vec![
            (PairKey::new("far", "V"), far),
            (PairKey::new("near", "V"), near),
            (PairKey::new("same", "V"), t),
        ];
        let nn = knn_by_habit(&t, &cands, 3);
        let order: Vec<_> = nn.ranked.iter().map(|(p, _)| p.driver.as_str()).collect();
        assert_eq!(order, ["same", "near", "far"]);
        assert_eq!(nn.ranked[0].1, 0.0);
        assert!(!nn.shortfall);
    }

    #[test]
    fn unset_components_renormalize() {
        let scales = [Some(1.0); 4];
        let a = HabitTuple {
            accel_low: Some(1.0),
            decel_low: Some(1.0),
            ..HabitTuple::default()
        };
        let b = HabitTuple {
            accel_low: Some(2.0),
            accel_high: Some(5.0),
            decel_low: Some(1.0),
            ..HabitTuple::default()
        };
        // one unit difference over two shared dims, rescaled to four
        assert!((habit_distance(&a, &b, &scales) - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(
            habit_distance(&a, &HabitTuple::default(), &scales),
            f64::INFINITY
        );
    }
}

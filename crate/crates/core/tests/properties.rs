use proptest::prelude::*;

use drivesense::baseline_avg::{apply_adjustment, fit_adjustment, segment_average, AdjustmentFn};
use drivesense::dataset::{Dataset, Observation};
use drivesense::energy_model::error_metrics;
use drivesense::features::{AccelTuple, Channel, SegmentFeatures};
use drivesense::predictor::{dte, dte_from_energy, remaining_energy, BatteryState};
use drivesense::similarity::{dtw_distance, habit_tuple, normalized_dtw};
use drivesense::trip_data::{segment_trip, trapezoid_km, DataPointKey, SpeedSample, Trip};

fn series() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, 1..24)
}

fn features() -> impl Strategy<Value = SegmentFeatures> {
    (
        0.0..130.0f64,
        prop::array::uniform3(0.0..3.0f64),
        prop::array::uniform3(0.0..3.0f64),
        0.0..0.5f64,
        0.0..120.0f64,
        -10.0..40.0f64,
    )
        .prop_map(
            |(speed, d, a, gyro, idle_time, temperature)| SegmentFeatures {
                speed,
                decel: AccelTuple {
                    duration: d[0] * 30.0,
                    mean: d[1],
                    std: d[2],
                },
                accel: AccelTuple {
                    duration: a[0] * 30.0,
                    mean: a[1],
                    std: a[2],
                },
                gyro,
                idle_load: 1.0,
                idle_time,
                temperature,
            },
        )
}

proptest! {
    #[test]
    fn dtw_is_symmetric_and_bounded(x in series(), y in series()) {
        let (dxy, path) = dtw_distance(&x, &y).unwrap();
        let (dyx, _) = dtw_distance(&y, &x).unwrap();
        prop_assert_eq!(dxy, dyx);
        prop_assert!(dxy >= 0.0);
        prop_assert!(path.is_admissible(x.len(), y.len()));
        let max_cost = x
            .iter()
            .flat_map(|a| y.iter().map(move |b| (a - b).abs()))
            .fold(0.0f64, f64::max);
        let n = normalized_dtw(&x, &y).unwrap();
        prop_assert!(n <= max_cost + 1e-12);
        prop_assert_eq!(dtw_distance(&x, &x).unwrap().0, 0.0);
    }

    #[test]
    fn accumulative_error_is_bounded_by_worst_segment(
        cases in prop::collection::vec((0.01..10.0f64, 0.0..20.0f64), 1..30)
    ) {
        let truth: Vec<f64> = cases.iter().map(|c| c.0).collect();
        let pred: Vec<f64> = cases.iter().map(|c| c.1).collect();
        let m = error_metrics(&pred, &truth).unwrap();
        let worst = m.per_segment.iter().flatten().fold(0.0f64, |a, e| a.max(e.abs()));
        prop_assert!(m.accumulative <= worst + 1e-12);
        prop_assert!(m.rmse_acc >= 0.0);
    }

    #[test]
    fn habit_tuple_ignores_history_order(
        history in prop::collection::vec(features(), 10..80),
        seed in any::<u64>()
    ) {
        let mut shuffled = history.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize);
        }
        let a = habit_tuple(&history).unwrap().components();
        let b = habit_tuple(&shuffled).unwrap().components();
        for (x, y) in a.iter().zip(&b) {
            match (x, y) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0)),
                (None, None) => {}
                _ => prop_assert!(false, "component presence differs"),
            }
        }
    }

    #[test]
    fn segment_average_lies_within_observed_range(
        observed in prop::collection::vec(features(), 1..8)
    ) {
        let mut ds = Dataset::new();
        for (i, f) in observed.iter().enumerate() {
            ds.insert(Observation {
                key: DataPointKey::new(format!("d{i}"), "v", "s").unwrap(),
                features: *f,
                energy: None,
                profile: vec![],
                distance: 1.0,
                sample_count: 2,
            })
            .unwrap();
        }
        let avg = segment_average(&ds, "s").unwrap();
        for c in Channel::ALL {
            let lo = observed.iter().map(|f| f.get(c)).fold(f64::INFINITY, f64::min);
            let hi = observed.iter().map(|f| f.get(c)).fold(f64::NEG_INFINITY, f64::max);
            let v = avg.get(c);
            prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "{} = {v} outside [{lo}, {hi}]", c.name());
        }
    }

    #[test]
    fn adjustment_fits_no_worse_than_identity(
        pts in prop::collection::vec((0.0..100.0f64, 0.0..100.0f64), 3..40)
    ) {
        let mut distinct: Vec<f64> = pts.iter().map(|p| p.0).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        prop_assume!(distinct.len() >= 3);
        let f = fit_adjustment(&pts, Channel::Temperature).unwrap();
        let sse = |g: &AdjustmentFn| -> f64 {
            pts.iter().map(|(a, p)| (apply_adjustment(g, *a).0 - p).powi(2)).sum()
        };
        let fitted = sse(&f);
        let identity = sse(&AdjustmentFn::identity(Channel::Temperature));
        prop_assert!(fitted <= identity * (1.0 + 1e-9) + 1e-9);
    }

    #[test]
    fn dte_is_homogeneous(
        soc in 0.01..1.0f64,
        ah in 1.0..300.0f64,
        volts in 50.0..900.0f64,
        intensity in 0.01..2.0f64,
        c in 0.1..10.0f64
    ) {
        let b = BatteryState::new(soc, ah, volts).unwrap();
        let e = remaining_energy(&b);
        let base = dte(&b, intensity).unwrap();
        let scaled = dte_from_energy(e * c, intensity * c).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-9 * base);
        let double = dte_from_energy(2.0 * e, intensity).unwrap();
        prop_assert!((double - 2.0 * base).abs() <= 1e-9 * base);
    }

    #[test]
    fn segmentation_preserves_distance_and_energy(
        speeds in prop::collection::vec(0.0..120.0f64, 50..400)
    ) {
        let samples: Vec<SpeedSample> = speeds
            .iter()
            .enumerate()
            .map(|(i, &v)| SpeedSample {
                energy_cum: Some(i as f64 * 0.01),
                ..SpeedSample::new(i as f64, v)
            })
            .collect();
        let trip = Trip::new("t", "d", "v", samples.clone()).unwrap();
        prop_assume!(trip.distance_km() >= 0.2);
        let segs = segment_trip(&trip, None).unwrap();
        let total_km: f64 = segs.iter().map(|s| s.distance).sum();
        let kept = segs.iter().all(|s| s.distance <= 1.0 + 1e-9);
        prop_assert!(kept);
        prop_assert!(total_km <= trapezoid_km(&samples) + 1e-9);
        let energy: f64 = segs.iter().filter_map(|s| s.measured_energy).sum();
        let last = segs.last().unwrap().samples.last().unwrap().energy_cum.unwrap();
        prop_assert!((energy - last).abs() <= 1e-9);
    }
}

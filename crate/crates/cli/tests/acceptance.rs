//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use drivesense::collab_filter::{factorize, MfParams, SparseFeatureMatrix};
use drivesense::dataset::Dataset;
use drivesense::energy_model::{
    aic_scan, error_metrics, fit, predict_total, EnergyModel, ModelOrder, TrainingSample,
    DEFAULT_RIDGE,
};
use drivesense::evaluation::{dte_table, evaluate, EvalConfig};
use drivesense::features::FeatureDefaults;
use drivesense::predictor::{
    dte_from_energy, predict, remaining_energy, Approach, BatteryState, PredictParams,
};
use drivesense::similarity::dtw_distance;
use drivesense::synth_oracle::{generate, FleetSpec};
use drivesense::trip_data::PairKey;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn urban_only(spec: &mut FleetSpec) {
    spec.routes
        .retain(|r| r.segments.iter().all(|s| s.stop_at.is_some()));
}

fn dataset(spec: &FleetSpec) -> Dataset {
    generate(spec)
        .expect("fleet generation")
        .dataset(&FeatureDefaults::default())
        .expect("feature extraction")
}

fn coefficient_recovery() -> Outcome {
    let start = Instant::now();
    let mut spec = FleetSpec::standard(4, 4, 12, 10, 1);
    urban_only(&mut spec);
    let fleet = generate(&spec).expect("fleet generation");
    let ds = fleet.dataset(&FeatureDefaults::default()).unwrap();
    let order = ModelOrder::default();
    let mut worst = 0.0f64;
    let mut min_n = usize::MAX;
    for (pair, truth) in fleet.models() {
        let samples = ds.training_samples(&pair);
        min_n = min_n.min(samples.len());
        let Ok((model, _)) = fit(&samples, order, 0.0) else {
            return outcome(false, format!("{pair}: fit failed"));
        };
        for (a, b) in model.coefficients().iter().zip(truth.coefficients()) {
            worst = worst.max(((a - b) / b).abs());
        }
    }
    let elapsed = start.elapsed();
    let enough = min_n >= 4 * order.coefficient_count();
    outcome(
        enough && worst <= 1e-6 && elapsed < Duration::from_secs(10),
        format!("worst relative error {worst:.2e}, min n {min_n}, {elapsed:.2?}"),
    )
}

fn aic_selection() -> Outcome {
    let start = Instant::now();
    let orders = ModelOrder::grid(1..=3, 1..=3, 1..=3).unwrap();
    let mut hits = 0;
    let mut misses = Vec::new();
    for seed in 0..20 {
        let mut spec = FleetSpec::standard(16, 16, 30, 10, seed);
        urban_only(&mut spec);
        spec.noise = 0.05;
        let ds = dataset(&spec);
        let groups: Vec<_> = ds.pairs().map(|p| ds.training_samples(p)).collect();
        match aic_scan(&groups, &orders, DEFAULT_RIDGE).map(|s| s.best()) {
            Ok(Some(best)) if best == ModelOrder::default() => hits += 1,
            Ok(best) => misses.push(format!("seed {seed}: {best:?}")),
            Err(e) => misses.push(format!("seed {seed}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    outcome(
        hits >= 19 && elapsed < Duration::from_secs(60),
        format!("(2,2,2) selected in {hits}/20, {elapsed:.2?} {misses:?}"),
    )
}

/// Minimum cost over every admissible warping path, with branch-and-bound
/// on the non-negative partial cost.
fn brute_force_dtw(x: &[f64], y: &[f64]) -> f64 {
    fn walk(x: &[f64], y: &[f64], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + (x[i] - y[j]).abs();
        if acc >= *best {
            return;
        }
        if i + 1 == x.len() && j + 1 == y.len() {
            *best = acc;
            return;
        }
        if i + 1 < x.len() && j + 1 < y.len() {
            walk(x, y, i + 1, j + 1, acc, best);
        }
        if i + 1 < x.len() {
            walk(x, y, i + 1, j, acc, best);
        }
        if j + 1 < y.len() {
            walk(x, y, i, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(x, y, 0, 0, 0.0, &mut best);
    best
}

fn dtw_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut inadmissible = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=12);
        let m = rng.random_range(1..=12);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (d, path) = dtw_distance(&x, &y).unwrap();
        if d != brute_force_dtw(&x, &y) {
            mismatches += 1;
        }
        let along: f64 = path.steps.iter().map(|&(i, j)| (x[i] - y[j]).abs()).sum();
        if !path.is_admissible(n, m) || along != d {
            inadmissible += 1;
        }
    }
    outcome(
        mismatches == 0 && inadmissible == 0,
        format!("{mismatches} distance mismatches, {inadmissible} bad paths in 1000 pairs"),
    )
}

fn mf_recovery() -> Outcome {
    const N: usize = 20;
    const M: usize = 30;
    const K: usize = 3;
    let mut passed = 0;
    let mut worst_ratio = 0.0f64;
    let mut failures = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        let p: Vec<Vec<f64>> = (0..N)
            .map(|_| (0..K).map(|_| std_normal.sample(&mut rng)).collect())
            .collect();
        let q: Vec<Vec<f64>> = (0..M)
            .map(|_| (0..K).map(|_| std_normal.sample(&mut rng)).collect())
            .collect();
        let truth = |i: usize, j: usize| -> f64 { (0..K).map(|c| p[i][c] * q[j][c]).sum() };
        let rms = ((0..N)
            .flat_map(|i| (0..M).map(move |j| (i, j)))
            .map(|(i, j)| truth(i, j).powi(2))
            .sum::<f64>()
            / (N * M) as f64)
            .sqrt();
        let sigma = 0.01 * rms;
        let noise = Normal::new(0.0, sigma).unwrap();

        // Every column observes 40% of the rows.
        let per_col = N * 2 / 5;
        let (observed, held) = loop {
            let mut observed = Vec::new();
            let mut held = Vec::new();
            for j in 0..M {
                let mut rows: Vec<usize> = (0..N).collect();
                rows.shuffle(&mut rng);
                observed.extend(rows[..per_col].iter().map(|&i| (i, j)));
                held.extend(rows[per_col..].iter().map(|&i| (i, j)));
            }
            if (0..N).all(|i| observed.iter().filter(|c| c.0 == i).count() > K) {
                break (observed, held);
            }
        };
        let triplets: Vec<_> = observed
            .iter()
            .map(|&(i, j)| (i, j, truth(i, j) + noise.sample(&mut rng)))
            .collect();
        let rows = (0..N).map(|i| PairKey::new(format!("d{i}"), "v")).collect();
        let cols = (0..M).map(|j| format!("s{j}")).collect();
        let matrix = SparseFeatureMatrix::new(rows, cols, triplets.clone(), "synthetic").unwrap();
        let params = MfParams {
            rank: K,
            lambda_p: 1e-5,
            lambda_q: 1e-5,
            learning_rate: 0.05,
            max_epochs: 50_000,
            tol: 1e-9,
            restarts: 3,
            seed,
            ..MfParams::default()
        };
        let f = match factorize(&matrix, &params) {
            Ok(f) => f,
            Err(e) => {
                failures.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        let mut col_sum = vec![0.0; M];
        let mut col_n = vec![0usize; M];
        for &(_, j, v) in &triplets {
            col_sum[j] += v;
            col_n[j] += 1;
        }
        let rmse = |pred: &dyn Fn(usize, usize) -> f64| {
            (held
                .iter()
                .map(|&(i, j)| (pred(i, j) - truth(i, j)).powi(2))
                .sum::<f64>()
                / held.len() as f64)
                .sqrt()
        };
        let mf = rmse(&|i, j| f.impute(i, j).unwrap());
        let baseline = rmse(&|_, j| col_sum[j] / col_n[j] as f64);
        worst_ratio = worst_ratio.max(mf / sigma);
        if mf < 3.0 * sigma && mf < baseline {
            passed += 1;
        } else {
            failures.push(format!(
                "seed {seed}: rmse {mf:.3e}, 3σ {:.3e}, baseline {baseline:.3e}",
                3.0 * sigma
            ));
        }
    }
    outcome(
        passed == 10,
        format!("{passed}/10 seeds, worst held-out rmse {worst_ratio:.2}σ {failures:?}"),
    )
}

fn approach_ordering() -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..10 {
        let mut spec = FleetSpec::standard(10, 4, 15, 10, seed);
        spec.noise = 0.05;
        spec.density = 0.8;
        let ds = dataset(&spec);
        let cfg = EvalConfig {
            seed,
            ..EvalConfig::default()
        };
        let ev = match evaluate(&ds, &cfg) {
            Ok(ev) => ev,
            Err(e) => {
                lines.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        let g = |n: &str| ev.score(n).map_or(f64::NAN, |s| s.mean_rmse_acc);
        let (slf, spm, dhm, adj, avg) = (g("self"), g("spm(3)"), g("dhm(3)"), g("adj"), g("avg"));
        if slf <= spm && avg >= spm.max(dhm).max(adj) {
            wins += 1;
        } else {
            lines.push(format!(
                "seed {seed}: self {slf:.4} spm {spm:.4} dhm {dhm:.4} adj {adj:.4} avg {avg:.4}"
            ));
        }
    }
    outcome(
        wins >= 8,
        format!("ordering held in {wins}/10 seeds {lines:?}"),
    )
}

fn twin_driver() -> Outcome {
    let mut spec = FleetSpec::standard(6, 3, 15, 10, 11);
    spec.noise = 0.05;
    let twin = spec.personas.len();
    spec.personas.push(spec.personas[0]);
    spec.pairs.push((twin, spec.pairs[0].1));
    let ds = dataset(&spec);
    let target = spec.pair_key(0);
    let twin_key = spec.pair_key(spec.pairs.len() - 1);
    let segments: Vec<String> = ds.segments_of(&target).cloned().collect();
    let (route, train): (Vec<_>, Vec<_>) =
        segments.iter().enumerate().partition(|(i, _)| i % 5 == 0);
    let route: Vec<String> = route.into_iter().map(|(_, s)| s.clone()).collect();
    let samples: Vec<TrainingSample> = train
        .iter()
        .filter_map(|(_, s)| ds.observation(&target, s))
        .filter_map(|o| {
            o.energy.map(|energy| TrainingSample {
                features: o.features,
                energy,
            })
        })
        .collect();
    let (model, _) = fit(&samples, ModelOrder::default(), DEFAULT_RIDGE).unwrap();
    let residual_rms = (samples
        .iter()
        .map(|s| (predict_total(&model, &s.features) - s.energy.total).powi(2))
        .sum::<f64>()
        / samples.len() as f64)
        .sqrt();
    let mut models: BTreeMap<PairKey, EnergyModel> = BTreeMap::new();
    models.insert(target.clone(), model);
    let params = PredictParams::default();
    let spm = predict(
        &target,
        &route,
        Approach::Spm { k: 1 },
        &ds,
        &models,
        &params,
    )
    .unwrap();
    let own = predict(&target, &route, Approach::SelfEst, &ds, &models, &params).unwrap();
    let donor_ok = spm
        .segments
        .iter()
        .all(|s| s.source.contains(&twin_key.to_string()));
    let worst = spm
        .segments
        .iter()
        .zip(&own.segments)
        .filter_map(|(a, b)| Some((a.e_hat? - b.e_hat?).abs()))
        .fold(0.0f64, f64::max);
    outcome(
        donor_ok && worst <= 2.0 * residual_rms,
        format!(
            "twin chosen on every segment: {donor_ok}; worst |Ê_spm − Ê_self| {worst:.3e} kWh vs 2σ {:.3e}",
            2.0 * residual_rms
        ),
    )
}

fn metric_identities() -> Outcome {
    let m = error_metrics(&[9.0, 11.0], &[10.0, 10.0]).unwrap();
    let offset_ok = m.accumulative == 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=20);
        let truth: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..5.0)).collect();
        let pred: Vec<f64> = truth
            .iter()
            .map(|t| t * rng.random_range(0.0..2.0))
            .collect();
        let m = error_metrics(&pred, &truth).unwrap();
        let max_eps = m
            .per_segment
            .iter()
            .flatten()
            .fold(0.0f64, |a, e| a.max(e.abs()));
        if m.accumulative > max_eps + 1e-12 {
            violations += 1;
        }
    }
    outcome(
        offset_ok && violations == 0,
        format!(
            "offsetting case ε_acc = {}, {violations} violations in 1000",
            m.accumulative
        ),
    )
}

fn dte_arithmetic() -> Outcome {
    let b = BatteryState::new(0.8, 60.0, 360.0).unwrap();
    let energy = remaining_energy(&b);
    let range = dte_from_energy(energy, 0.15).unwrap();
    let unit_ok = (energy - 17.28).abs() <= 1e-9 && (range - 115.2).abs() <= 1e-9;

    let mut spec = FleetSpec::standard(8, 4, 12, 10, 2);
    spec.noise = 0.05;
    let ds = dataset(&spec);
    let ev = evaluate(&ds, &EvalConfig::default()).unwrap();
    let rows = dte_table(&ev.reports, &b).unwrap();
    let worst = rows
        .iter()
        .map(|r| r.delta.abs() / r.dte_hat - r.energy_error)
        .fold(f64::NEG_INFINITY, f64::max);
    outcome(
        unit_ok && !rows.is_empty() && worst <= 1e-9,
        format!(
            "{energy} kWh, {range} km; max(|ΔDTE|/DTE − ε_acc) = {worst:.2e} over {} rows",
            rows.len()
        ),
    )
}

fn run_cli(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_drivesense"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DRIVESENSE_SEED")
        .env_remove("SOURCE_DATE_EPOCH")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{} failed: {}",
            args[0],
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let steps: [&[&str]; 8] = [
        &[
            "synth",
            "--out",
            "fleet",
            "--drivers",
            "5",
            "--vehicles",
            "2",
            "--routes",
            "6",
            "--segments",
            "6",
            "--noise",
            "0.05",
            "--density",
            "0.9",
            "--seed",
            "4",
        ],
        &["ingest", "--trips", "fleet/trips.json", "--out", "store"],
        &["fit", "--store", "store", "--out", "models.json"],
        &[
            "aic-scan",
            "--store",
            "store",
            "--orders",
            "1..2,1..2,1..2",
            "--out",
            "aic.csv",
        ],
        &[
            "predict",
            "--store",
            "store",
            "--models",
            "models.json",
            "--driver",
            "D00",
            "--vehicle",
            "V00",
            "--route",
            "r00s00,r00s01,r00s02",
            "--approach",
            "mf",
            "--out",
            "predict.json",
        ],
        &[
            "evaluate",
            "--store",
            "store",
            "--seed",
            "9",
            "--out",
            "evaluate.csv",
        ],
        &[
            "evaluate",
            "--store",
            "store",
            "--seed",
            "9",
            "--out",
            "evaluate.json",
        ],
        &[
            "dte",
            "--store",
            "store",
            "--soc",
            "0.8",
            "--capacity-ah",
            "60",
            "--voltage",
            "360",
            "--out",
            "dte.csv",
        ],
    ];
    let dir = tempfile::tempdir().unwrap();
    let mut differing = Vec::new();
    for step in steps {
        if let Err(e) = run_cli(step, dir.path()) {
            return outcome(false, e);
        }
        let first = snapshot(dir.path());
        if let Err(e) = run_cli(step, dir.path()) {
            return outcome(false, e);
        }
        if snapshot(dir.path()) != first {
            differing.push(step[0]);
        }
    }
    outcome(
        differing.is_empty(),
        format!(
            "{} command runs compared, differing: {differing:?}",
            steps.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 coefficient recovery", coefficient_recovery),
        ("2 AIC order selection", aic_selection),
        ("3 DTW correctness", dtw_correctness),
        ("4 MF recovery", mf_recovery),
        ("5 approach ordering", approach_ordering),
        ("6 twin-driver equivalence", twin_driver),
        ("7 error-metric identities", metric_identities),
        ("8 DTE arithmetic", dte_arithmetic),
        ("9 CLI determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {name}: {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}

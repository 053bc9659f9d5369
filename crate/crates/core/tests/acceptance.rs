//! End-to-end acceptance checks. Each test writes one `[PASS]`/`[FAIL]` line
//! to stderr (bypassing libtest capture) before asserting.

use std::io::Write;
use std::time::{Duration, Instant};

use enn::data::split_sizes;
use enn::experiment::{
    curve_ordering_fraction, run_experiment, ExperimentConfig, SelectionMetric, DEFAULT_LAMBDAS,
};
use enn::gradcheck::{
    check_gradient, near_kink_rows, random_instance, SELF_TEST_KINK_MARGIN, SELF_TEST_STEP,
};
use enn::loss::{Loss, Objective};
use enn::model::{forward, Activation, EnnConfig, ModelParams};
use enn::optim::{init_params, minimize, minimize_with_loss, InitScale};
use enn::oracle::{linear_expectile_fit, scalar_expectile};
use enn::synth::{generate_synthetic, NoiseKind, SyntheticSpec};
use enn::transfer::{FreezeSpec, TransferPlan};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const TAUS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[{tag}] criterion {id} ({name}): {detail}"
    );
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn normal_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, p), || rng.sample(StandardNormal))
}

fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.sample(StandardNormal))
}

#[test]
fn criterion_1_gradient_correctness() {
    const INSTANCES: usize = 200;
    const TOL: f64 = 1e-5;
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    let mut combos = std::collections::BTreeSet::new();
    for i in 0..INSTANCES {
        let (params, cfg, x, y) = random_instance(11, i);
        assert!(params.p() <= 5 && params.q() <= 5 && x.nrows() <= 10);
        combos.insert((
            cfg.hidden_activation.name(),
            cfg.output_activation.name(),
            cfg.lambda as u8,
        ));
        let kinks = near_kink_rows(&params, &cfg, x.view(), y.view(), SELF_TEST_KINK_MARGIN);
        let keep: Vec<usize> = (0..x.nrows()).filter(|r| !kinks.contains(r)).collect();
        if keep.is_empty() {
            continue;
        }
        let xs = x.select(Axis(0), &keep);
        let ys = y.select(Axis(0), &keep);
        let report =
            check_gradient(&params, &cfg, xs.view(), ys.view(), SELF_TEST_STEP, TOL).unwrap();
        worst = worst.max(report.max_rel_error());
        if !report.passed() {
            failures += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = failures == 0 && elapsed < Duration::from_secs(10) && combos.len() == 24;
    verdict(
        1,
        "gradient correctness",
        pass,
        format!(
            "{INSTANCES} instances, {} activation/lambda combos, max rel error {worst:.2e} (tol {TOL:e}), {failures} failures, {:.2}s (limit 10s)",
            combos.len(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_constant_model_matches_scalar_expectile() {
    const TOL: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for v in 0..20 {
        let y = normal_vector(&mut rng, 100).mapv(|e| 3.0 * e + v as f64);
        let x = Array2::zeros((100, 3));
        for tau in TAUS {
            let cfg = EnnConfig {
                tau,
                lambda: 0.0,
                hidden_units: 3,
                grad_tolerance: 1e-10,
                max_epochs: 2000,
                seed: v,
                ..EnnConfig::default()
            };
            let params0 = init_params(3, 3, v, InitScale::GlorotUniform);
            let (params, _) = minimize(&params0, &cfg, x.view(), y.view()).unwrap();
            let fitted = forward(&params, &cfg, x.row(0)).unwrap();
            let oracle = scalar_expectile(y.view(), tau).unwrap();
            worst = worst.max((fitted - oracle).abs());
            cases += 1;
        }
    }
    verdict(
        2,
        "constant model vs scalar expectile",
        worst <= TOL,
        format!("{cases} fits, max |fitted - oracle| {worst:.2e} (tol {TOL:e})"),
    );
}

#[test]
fn criterion_3_linear_model_matches_linear_expectile_fit() {
    const TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    let taus = [0.1, 0.25, 0.5, 0.75, 0.9, 0.3, 0.6, 0.8, 0.2, 0.7];
    for (k, &tau) in taus.iter().enumerate() {
        let x = normal_matrix(&mut rng, 500, 4);
        let beta = normal_vector(&mut rng, 4);
        let noise = normal_vector(&mut rng, 500);
        let y = x.dot(&beta) + 0.5 + noise.mapv(|e| 0.7 * e);
        let oracle = linear_expectile_fit(x.view(), y.view(), tau, 0.0).unwrap();
        assert!(oracle.converged);
        let cfg = EnnConfig {
            tau,
            lambda: 0.0,
            hidden_units: 1,
            hidden_activation: Activation::Identity,
            output_activation: Activation::Identity,
            grad_tolerance: 1e-10,
            max_epochs: 10_000,
            seed: k as u64,
        };
        let params0 = init_params(4, 1, k as u64, InitScale::GlorotUniform);
        let (params, _) = minimize(&params0, &cfg, x.view(), y.view()).unwrap();
        let w2 = params.w2()[0];
        let coef: Vec<f64> = params.w1().column(0).iter().map(|w| w * w2).collect();
        let intercept = params.b1()[0] * w2 + params.b2();
        worst = worst.max((intercept - oracle.intercept).abs());
        for (c, o) in coef.iter().zip(oracle.coefficients.iter()) {
            worst = worst.max((c - o).abs());
        }
    }
    verdict(
        3,
        "linear model vs linear expectile fit",
        worst <= TOL,
        format!("10 instances (n=500, p=4), max coefficient gap {worst:.2e} (tol {TOL:e})"),
    );
}

#[test]
fn criterion_4_median_level_degenerates_to_squared_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut identity_ok = true;
    for i in 0..100 {
        let (p, q, n) = (1 + i % 5, 1 + (i / 5) % 5, 5 + i % 17);
        let x = normal_matrix(&mut rng, n, p);
        let y = normal_vector(&mut rng, n);
        let flat: Vec<f64> = (0..p * q + 2 * q + 1)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let params = ModelParams::from_flat(p, q, &flat).unwrap();
        let cfg = EnnConfig {
            tau: 0.5,
            lambda: 0.0,
            hidden_units: q,
            ..EnnConfig::default()
        };
        let enn = Objective::expectile(&cfg, x.view(), y.view())
            .unwrap()
            .value(&params)
            .unwrap();
        let mse = Objective::with_loss(&cfg, Loss::Squared, x.view(), y.view())
            .unwrap()
            .value(&params)
            .unwrap();
        identity_ok &= enn.empirical == 0.5 * mse.empirical;
    }

    let mut trajectories_ok = true;
    let mut steps = 0;
    for k in 0..10u64 {
        let x = normal_matrix(&mut rng, 60, 4);
        let y = x.column(0).mapv(|v| v.max(0.0)) + normal_vector(&mut rng, 60).mapv(|e| 0.3 * e);
        let cfg = EnnConfig {
            tau: 0.5,
            lambda: 0.0,
            hidden_units: 3,
            max_epochs: 50,
            grad_tolerance: 1e-300,
            seed: k,
            ..EnnConfig::default()
        };
        let params0 = init_params(4, 3, k, InitScale::GlorotUniform);
        let (pa, ra) = minimize(&params0, &cfg, x.view(), y.view()).unwrap();
        let (pb, rb) = minimize_with_loss(
            &params0,
            &cfg,
            Loss::Squared,
            x.view(),
            y.view(),
            &FreezeSpec::NONE,
        )
        .unwrap();
        trajectories_ok &= ra.risk_trace.len() == rb.risk_trace.len()
            && ra
                .risk_trace
                .iter()
                .zip(&rb.risk_trace)
                .all(|(a, b)| *a == 0.5 * b)
            && pa == pb;
        steps += ra.risk_trace.len() - 1;
    }
    verdict(
        4,
        "tau = 0.5 degeneration",
        identity_ok && trajectories_ok,
        format!(
            "risk identity exact on 100 random points: {identity_ok}; 10 paired trajectories ({steps} steps) identical: {trajectories_ok}"
        ),
    );
}

#[test]
fn criterion_5_expectile_curves_are_ordered() {
    const MIN_FRACTION: f64 = 0.95;
    let spec = SyntheticSpec {
        n: 2000,
        p_snps: 20,
        noise: NoiseKind::Heteroscedastic,
        seed: 51,
        ..SyntheticSpec::default()
    };
    let (ds, _) = generate_synthetic(&spec).unwrap();
    let cfg = ExperimentConfig {
        tau_levels: TAUS.to_vec(),
        replicates: 1,
        master_seed: 5,
        phenotype: Some("target".into()),
        selection_metric: SelectionMetric::ExpectileLoss,
        curve_replicate: Some(0),
        ..ExperimentConfig::default()
    };
    let report = run_experiment(&cfg, &ds).unwrap();
    for tau in TAUS {
        let values: Vec<f64> = report
            .curves
            .iter()
            .filter(|c| c.tau == tau)
            .map(|c| c.value)
            .collect();
        assert_eq!(values.len(), 400);
        assert!(values.windows(2).all(|w| w[0] <= w[1]));
    }
    let fraction = curve_ordering_fraction(&report.curves);
    verdict(
        5,
        "expectile ordering",
        fraction >= MIN_FRACTION,
        format!(
            "tau ordering holds at {:.1}% of 400 sorted ranks (need {:.0}%)",
            100.0 * fraction,
            100.0 * MIN_FRACTION
        ),
    );
}

/// Paired tasks: the source phenotype is a less noisy readout of the shared
/// genetic signal; the target mixes in a private component.
fn transfer_scenario(shared_signal_fraction: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n: 500,
        p_snps: 20,
        shared_signal_fraction,
        noise_sd: 1.0,
        source_noise_sd: Some(0.3),
        seed,
        ..SyntheticSpec::default()
    }
}

fn transfer_config(replicates: usize, master_seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        tau_levels: vec![0.25, 0.5, 0.75],
        replicates,
        master_seed,
        transfer_plan: Some(TransferPlan::new("source", "target")),
        curve_replicate: None,
        ..ExperimentConfig::default()
    }
}

#[test]
fn criterion_6_transfer_beats_scratch_on_related_tasks() {
    const MIN_WIN_RATE: f64 = 0.6;
    let start = Instant::now();
    let (ds, _) = generate_synthetic(&transfer_scenario(0.9, 61)).unwrap();
    assert_eq!(split_sizes(ds.n()).unwrap().0, 300);
    let report = run_experiment(&transfer_config(50, 6), &ds).unwrap();
    let elapsed = start.elapsed();
    let mut pass = elapsed < Duration::from_secs(15 * 60);
    let mut detail = Vec::new();
    for row in report.summary() {
        let recs: Vec<_> = report.records_for(row.tau).collect();
        assert_eq!(recs.len(), 50);
        let wins = recs
            .iter()
            .filter(|r| r.transfer.as_ref().unwrap().test_mse < r.scratch.test_mse)
            .count();
        let rate = wins as f64 / recs.len() as f64;
        let tf = row.transfer_test.unwrap();
        pass &= tf < row.scratch_test && rate >= MIN_WIN_RATE;
        detail.push(format!(
            "tau {}: ENN.TF {tf:.4} vs ENN {:.4}, wins {wins}/50",
            row.tau, row.scratch_test
        ));
    }
    verdict(
        6,
        "transfer benefit",
        pass,
        format!(
            "{}; {:.0}s (limit 900s)",
            detail.join("; "),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7_negative_transfer_is_flagged_for_unrelated_tasks() {
    const REPLICATES: usize = 20;
    let (ds, _) = generate_synthetic(&transfer_scenario(0.0, 71)).unwrap();
    let report = run_experiment(&transfer_config(REPLICATES, 7), &ds).unwrap();
    let flagged = (0..REPLICATES)
        .filter(|&r| {
            report
                .records
                .iter()
                .filter(|rec| rec.replicate == r)
                .any(|rec| rec.negative_transfer(report.negative_transfer_margin) == Some(true))
        })
        .count();
    let tsv = report.negative_transfer_tsv();
    assert_eq!(tsv.lines().count(), 4);
    verdict(
        7,
        "negative-transfer detection",
        2 * flagged >= REPLICATES,
        format!("shared fraction 0: {flagged}/{REPLICATES} replicates flagged at >= 1 tau level (need 50%)"),
    );
}

#[test]
fn criterion_8_protocol_fidelity() {
    let mut sizes_ok = true;
    for n in 5..=10_000usize {
        let (tr, va, te) = split_sizes(n).unwrap();
        let exact = n as f64 / 5.0;
        sizes_ok &= tr + va + te == n
            && (tr as f64 - 3.0 * exact).abs() <= 1.0
            && (va as f64 - exact).abs() <= 1.0
            && (te as f64 - exact).abs() <= 1.0;
    }
    let grid_ok = ExperimentConfig::default().lambda_grid == vec![0.0, 0.1, 1.0, 10.0, 100.0]
        && DEFAULT_LAMBDAS == [0.0, 0.1, 1.0, 10.0, 100.0];

    let spec = SyntheticSpec {
        n: 120,
        p_snps: 8,
        causal_snps: 3,
        seed: 81,
        ..SyntheticSpec::default()
    };
    let (ds, _) = generate_synthetic(&spec).unwrap();
    let cfg = ExperimentConfig {
        tau_levels: TAUS.to_vec(),
        lambda_grid: vec![0.1, 10.0],
        hidden_grid: vec![3],
        replicates: 2,
        max_epochs: 100,
        master_seed: 8,
        transfer_plan: Some(TransferPlan::new("source", "target")),
        ..ExperimentConfig::default()
    };
    let report = run_experiment(&cfg, &ds).unwrap();
    let tsv = report.summary_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    let layout_ok = lines[0] == "tau\tENN.TF_train\tENN.TF_test\tENN_train\tENN_test"
        && lines.len() == 1 + TAUS.len()
        && lines[1..]
            .iter()
            .zip(["0.1", "0.25", "0.5", "0.75", "0.9"])
            .all(|(l, t)| {
                let cells: Vec<&str> = l.split('\t').collect();
                cells.len() == 5
                    && cells[0] == t
                    && cells[1..].iter().all(|c| c.parse::<f64>().is_ok())
            });

    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    report.write_to_dir(dirs[0].path()).unwrap();
    run_experiment(&cfg, &ds)
        .unwrap()
        .write_to_dir(dirs[1].path())
        .unwrap();
    let mut identical = true;
    for name in [
        "report.tsv",
        "replicates.tsv",
        "curves.tsv",
        "negative_transfer.tsv",
    ] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        identical &= !a.is_empty() && a == b;
    }
    verdict(
        8,
        "protocol fidelity",
        sizes_ok && grid_ok && layout_ok && identical,
        format!(
            "split sizes within 1 for n in 5..=10000: {sizes_ok}; lambda grid default: {grid_ok}; table layout: {layout_ok}; byte-identical rerun: {identical}"
        ),
    );
}

#[test]
fn criterion_9_monotone_optimization() {
    const TRACE_TOL: f64 = 1e-12;
    const NORM_LIMIT: f64 = 1e-3;
    let activations = [Activation::Relu, Activation::Sigmoid, Activation::Tanh];
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let mut monotone = 0;
    let mut worst_rise: f64 = f64::NEG_INFINITY;
    for i in 0..100u64 {
        let (p, q) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let x = normal_matrix(&mut rng, 40, p);
        let y = x.column(0).mapv(|v| v.max(0.0)) + normal_vector(&mut rng, 40);
        let cfg = EnnConfig {
            tau: rng.random_range(0.05..0.95),
            lambda: [0.0, 0.1, 1.0][(i % 3) as usize],
            hidden_units: q,
            hidden_activation: activations[(i % 3) as usize],
            max_epochs: 200,
            seed: i,
            ..EnnConfig::default()
        };
        let params0 = init_params(p, q, i, InitScale::GlorotUniform);
        let (_, report) = minimize(&params0, &cfg, x.view(), y.view()).unwrap();
        let rise = report
            .risk_trace
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max);
        worst_rise = worst_rise.max(rise);
        if rise <= TRACE_TOL {
            monotone += 1;
        }
    }

    let mut worst_norm: f64 = 0.0;
    for i in 0..10u64 {
        let x = normal_matrix(&mut rng, 50, 5);
        let y = x.column(1).mapv(|v| 2.0 * v) + normal_vector(&mut rng, 50);
        let cfg = EnnConfig {
            lambda: 1e6,
            hidden_units: 4,
            seed: i,
            ..EnnConfig::default()
        };
        let params0 = init_params(5, 4, i, InitScale::GlorotUniform);
        let (params, _) = minimize(&params0, &cfg, x.view(), y.view()).unwrap();
        let norm = params.w1().iter().map(|v| v * v).sum::<f64>().sqrt()
            + params.w2().iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_norm = worst_norm.max(norm);
    }
    verdict(
        9,
        "monotone optimization",
        monotone == 100 && worst_norm <= NORM_LIMIT,
        format!(
            "{monotone}/100 traces non-increasing (largest step change {worst_rise:.2e}, tol {TRACE_TOL:e}); lambda=1e6 max |w1|+|w2| {worst_norm:.2e} (limit {NORM_LIMIT:e})"
        ),
    );
}

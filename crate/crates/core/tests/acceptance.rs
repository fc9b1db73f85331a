//! Acceptance criteria 1-10. Every test prints one `criterion N: PASS|FAIL`
//! line before asserting.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use twoscale::diffusion::{initial_layer_bias, sigma_squared, sigma_squared_quadrature_oracle};
use twoscale::generator::uniform_grid;
use twoscale::harness::{reference_model, run_experiment, with_threads, ExperimentConfig, ExperimentReport};
use twoscale::queue::{build_generator, queue_nu_closed_form, QueueModel, QueueSpec};
use twoscale::{quasi_stationary, ExpansionSet, TimeVaryingGenerator, TwoScaleModel};

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&config_path(name)).expect("config loads")
}

fn verdict(n: u32, passed: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if passed { "PASS" } else { "FAIL" });
}

fn checks(report: &ExperimentReport) -> String {
    report.summary_lines().join("; ")
}

fn within_budget(n: u32, started: Instant, seconds: f64) -> bool {
    let elapsed = started.elapsed().as_secs_f64();
    println!("criterion {n}: runtime {elapsed:.2}s (budget {seconds}s)");
    elapsed < seconds
}

/// Smallest `|Re lambda|` over the nonzero eigenvalues.
fn spectral_gap(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.re.abs())
        .filter(|&r| r > 1e-9)
        .fold(f64::INFINITY, f64::min)
}

fn random_generator(rng: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                q[(i, j)] = rng.random_range(0.1..3.0);
            }
        }
        let s: f64 = q.row(i).sum();
        q[(i, i)] = -s;
    }
    q
}

#[test]
fn criterion_01_homogeneous_exactness() {
    let started = Instant::now();
    let report = run_experiment(&load("expansion_exact.json")).unwrap();
    let on_time = within_budget(1, started, 5.0);
    verdict(1, report.passed && on_time, &checks(&report));
    assert!(report.passed && on_time);
}

#[test]
fn criterion_02_expansion_order() {
    let started = Instant::now();
    let zero = run_experiment(&load("expansion_order0.json")).unwrap();
    let one = run_experiment(&load("expansion_order1.json")).unwrap();
    let on_time = within_budget(2, started, 120.0);
    let passed = zero.passed && one.passed && on_time;
    verdict(2, passed, &format!("n = 0: {}; n = 1: {}", checks(&zero), checks(&one)));
    assert!(passed);
}

#[test]
fn criterion_03_layer_decay() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut cases = Vec::new();
    let model = reference_model(0.1).unwrap();
    let set = ExpansionSet::build(model.fast.clone(), model.slow.clone(), 0, 1.0).unwrap();
    for t0 in [0.0, 0.5, 1.0] {
        let fit = set.layer(t0).unwrap().fit_decay(0).unwrap();
        let gap = spectral_gap(&model.fast.eval(t0));
        worst = worst.max((fit.rate - gap).abs() / gap);
        cases.push(format!("reference t0 = {t0}: {:.4} vs {gap:.4}", fit.rate));
    }
    let sym = TimeVaryingGenerator::constant(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0])).unwrap();
    let set = ExpansionSet::build(sym.clone(), TimeVaryingGenerator::zero(2), 0, 1.0).unwrap();
    let fit = set.layer(0.0).unwrap().fit_decay(0).unwrap();
    worst = worst.max((fit.rate - 2.0).abs() / 2.0);
    cases.push(format!("two-state: {:.4} vs 2", fit.rate));
    let on_time = within_budget(3, started, 5.0);
    let passed = worst <= 0.1 && on_time;
    verdict(3, passed, &format!("max relative error {worst:.2e}; {}", cases.join("; ")));
    assert!(passed);
}

#[test]
fn criterion_04_sigma_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let m = rng.random_range(2..=6);
        let g = TimeVaryingGenerator::constant(random_generator(&mut rng, m)).unwrap();
        let f: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let closed = sigma_squared(&g, &f, 0.0).unwrap();
        let oracle = sigma_squared_quadrature_oracle(&g, &f, 0.0, None).unwrap();
        worst = worst.max((closed - oracle).abs());
    }
    let sym = TimeVaryingGenerator::constant(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0])).unwrap();
    let two_state = sigma_squared(&sym, &[1.0, 0.0], 0.0).unwrap();
    let on_time = within_budget(4, started, 30.0);
    let passed = worst <= 1e-8 && (two_state - 0.25).abs() <= 1e-10 && on_time;
    verdict(4, passed, &format!("max |closed - oracle| = {worst:.2e}; two-state sigma^2 = {two_state}"));
    assert!(passed);
}

#[test]
fn criterion_05_second_moment() {
    let started = Instant::now();
    let report = run_experiment(&load("second_moment.json")).unwrap();
    let on_time = within_budget(5, started, 600.0);
    verdict(5, report.passed && on_time, &checks(&report));
    assert!(report.passed && on_time, "{}", checks(&report));
}

#[test]
fn criterion_06_clt() {
    let started = Instant::now();
    let report = run_experiment(&load("clt.json")).unwrap();
    let on_time = within_budget(6, started, 300.0);
    verdict(6, report.passed && on_time, &checks(&report));
    assert!(report.passed && on_time);
}

#[test]
fn criterion_07_initial_layer_bias() {
    let started = Instant::now();
    let sym = TimeVaryingGenerator::constant(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0])).unwrap();
    let grid = uniform_grid(0.0, 1.0, 41);
    let mut closed_err: f64 = 0.0;
    for eps in [0.1, 0.05, 0.02] {
        let model = TwoScaleModel::new(sym.clone(), TimeVaryingGenerator::zero(2), eps, 1.0).unwrap();
        let bias = initial_layer_bias(&model, 0, &[1.0, 0.0], &grid).unwrap();
        for (t, x) in grid.iter().zip(&bias.values) {
            let exact = eps / 4.0 * (1.0 - (-2.0 * t / eps).exp());
            closed_err = closed_err.max((x - exact).abs());
        }
    }
    let mut k_hat = Vec::new();
    for eps in [0.1, 0.05, 0.02] {
        let bias = initial_layer_bias(&reference_model(eps).unwrap(), 0, &[1.0, 0.0, -1.0], &grid).unwrap();
        k_hat.push(bias.k_hat);
    }
    let spread = k_hat.iter().cloned().fold(0.0, f64::max) / k_hat.iter().cloned().fold(f64::INFINITY, f64::min);
    let on_time = within_budget(7, started, 30.0);
    let passed = closed_err <= 1e-8 && spread <= 4.0 && on_time;
    verdict(
        7,
        passed,
        &format!("closed-form error {closed_err:.2e}; sup|X|/eps = {k_hat:?}, spread {spread:.3}"),
    );
    assert!(passed);
}

#[test]
fn criterion_08_queue() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let m0 = rng.random_range(1..=6);
        let spec = QueueSpec {
            m0,
            lambda_base: (0..m0).map(|_| rng.random_range(0.2..3.0)).collect(),
            mu_base: (0..m0).map(|_| rng.random_range(0.2..3.0)).collect(),
            lambda_mod_poly: vec![rng.random_range(0.5..2.0), rng.random_range(-0.4..0.4)],
            mu_mod_poly: vec![rng.random_range(0.5..2.0), rng.random_range(-0.4..0.4)],
            slow: None,
            horizon: 1.0,
        };
        let queue = QueueModel::new(spec).unwrap();
        let generator = build_generator(&queue).unwrap();
        for _ in 0..20 {
            let t = rng.random::<f64>();
            let closed = queue_nu_closed_form(&queue, t).unwrap();
            let solved = quasi_stationary(&generator, t).unwrap();
            for j in 0..queue.states() {
                worst = worst.max((closed[j] - solved[j]).abs());
            }
        }
    }
    let report = run_experiment(&load("queue_demo.json")).unwrap();
    let on_time = within_budget(8, started, 300.0);
    let passed = worst <= 1e-12 && report.passed && on_time;
    verdict(8, passed, &format!("random-spec nu deviation {worst:.2e}; {}", checks(&report)));
    assert!(passed);
}

#[test]
fn criterion_09_rate_proxy() {
    let started = Instant::now();
    let report = run_experiment(&load("rate_proxy.json")).unwrap();
    let labelled = report.label.as_deref().is_some_and(|l| l.contains("proxy"));
    let on_time = within_budget(9, started, 600.0);
    let passed = report.passed && labelled && on_time;
    verdict(9, passed, &format!("labelled as proxy: {labelled}; {}", checks(&report)));
    assert!(passed);
}

#[test]
fn criterion_10_determinism() {
    let mut identical = true;
    let mut names = Vec::new();
    for name in ["expansion_order1.json", "second_moment.json", "clt.json", "rate_proxy.json", "queue_demo.json"] {
        let config = load(name);
        let one = with_threads(1, || run_experiment(&config)).unwrap().unwrap();
        let eight = with_threads(8, || run_experiment(&config)).unwrap().unwrap();
        let same = one.reproducible_json().unwrap() == eight.reproducible_json().unwrap();
        identical &= same;
        names.push(format!("{name}: {}", if same { "identical" } else { "differs" }));
    }
    verdict(10, identical, &names.join("; "));
    assert!(identical);
}

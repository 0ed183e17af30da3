//! End-to-end acceptance suite. Runs every criterion at full size and prints
//! one line per criterion; exits non-zero if any fails.
//!
//! Built with `harness = false` so the report is visible in plain
//! `cargo test` output.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rdelab::ballistic::{
    analysis_rng, ballistic_statistics, fit_condition_t, long_paths, slab_ladder, tau1_integrability,
    IntegrabilityVerdict, SlabExitEstimate,
};
use rdelab::config::{self, ExperimentConfig};
use rdelab::env::{AmplitudeLaw, Environment, EnvironmentSpec, SigmaMode};
use rdelab::experiment::{self, exit_domain, RunOptions};
use rdelab::kalikow::{
    auxiliary_drift, condition_k_for_spec, estimate_green, exit_law_identity_test, Domain, DomainGrid, KVerdict,
};
use rdelab::regen::{
    ball_bin, bridge_segment, coupling_domain, coupling_target, regeneration_batch, renewal_tests, CouplingConfig,
    RegenScan, ScanConfig,
};
use rdelab::rng::{StreamId, StreamTag};
use rdelab::sde::{BoundaryCorrection, IntegratorConfig, Stepper};
use rdelab::stats::chi_square_uniform;
use rdelab::Vector;

const ALPHA: f64 = 0.01;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    let loaded = config::load(&configs().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    loaded.config.validated().unwrap_or_else(|e| panic!("{name}: {e}"));
    loaded.config
}

fn e1(d: usize) -> Vector {
    let mut v = Vector::zeros(d);
    v[0] = 1.0;
    v
}

/// `P[hit −a before b]` for `dX = β dt + dB` from 0, by quadrature of the
/// scale density `exp(−2βx)`.
fn scale_function_exit_left(beta: f64, a: f64, b: f64) -> f64 {
    let simpson = |lo: f64, hi: f64| {
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let f = |x: f64| (-2.0 * beta * x).exp();
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    simpson(0.0, b) / simpson(-a, b)
}

fn c1_symmetric_slab() -> Outcome {
    let cfg = load("driftfree.cfg");
    let start = Instant::now();
    let est = slab_ladder(&cfg.spec(), &e1(2), 1.0, &[4.0], &cfg.integrator, 10_000).unwrap();
    let e = &est[0];
    let half = (e.ci.high - e.ci.low) / 2.0;
    let elapsed = start.elapsed();
    Outcome::new(
        e.ci.low <= 0.5 && 0.5 <= e.ci.high && half <= 0.02 && elapsed < Duration::from_secs(60),
        format!("L=4 p̂={:.4} CI=[{:.4}, {:.4}] half-width {half:.4}, {elapsed:.1?}", e.p_hat, e.ci.low, e.ci.high),
    )
}

fn c2_drifted_interval() -> Outcome {
    let spec = Arc::new(EnvironmentSpec::constant(Vector::from_slice(&[0.5]), 1.0, 11));
    let integ = IntegratorConfig::new(0.005, BoundaryCorrection::BridgeTest, 1000.0);
    let oracle = scale_function_exit_left(0.5, 2.0, 2.0);
    let start = Instant::now();
    let est = slab_ladder(&spec, &e1(1), 1.0, &[2.0], &integ, 20_000).unwrap();
    let e = &est[0];
    let se = (e.p_hat * (1.0 - e.p_hat) / e.n as f64).sqrt();
    let elapsed = start.elapsed();
    Outcome::new(
        (e.p_hat - oracle).abs() <= 3.0 * se && elapsed < Duration::from_secs(120),
        format!("p̂={:.4} oracle={oracle:.4} SE={se:.4}, {elapsed:.1?}", e.p_hat),
    )
}

fn c3_nonnestling_bound(ladder: &[SlabExitEstimate], elapsed: Duration) -> Outcome {
    let mut detail = Vec::new();
    let mut pass = elapsed < Duration::from_secs(15 * 60);
    for e in ladder {
        let bound = 1.5 * (-0.5 * e.slab.width).exp();
        pass &= e.ci.high <= bound;
        detail.push(format!("L={} p̂={:.2e} upper={:.2e} ≤ {bound:.2e}", e.slab.width, e.p_hat, e.ci.high));
    }
    let fit = fit_condition_t(ladder, 1.0).unwrap();
    let slope_ok = fit.slope.is_some_and(|s| s < 0.0) && fit.slope_upper().is_some_and(|u| u < 0.0);
    pass &= slope_ok;
    detail.push(format!("slope {:?} upper {:?}", fit.slope, fit.slope_upper()));
    Outcome::new(pass, format!("{}, {elapsed:.0?}", detail.join("; ")))
}

fn c4_coupling_contract() -> Outcome {
    let cfg = load("nonnestling_renewal.cfg");
    let spec = cfg.spec();
    let coupling = cfg.coupling.clone().unwrap();
    let d = spec.dimension;
    let n = 10_000u64;
    let mut exits = 0usize;
    let mut counts = vec![0u64; 32];
    for k in 0..n {
        let env = Environment::new(spec.clone(), k);
        let stream = StreamId::new(spec.master_seed, k, k);
        let mut stepper = Stepper::for_stream(&env, &cfg.integrator, stream);
        let x = Vector::zeros(d);
        let seg = bridge_segment(
            &mut stepper,
            x,
            &coupling,
            spec.range,
            &mut stream.rng(StreamTag::Coupling),
            &mut stream.rng(StreamTag::Bridge),
        )
        .unwrap();
        let (uc, ur) = coupling_domain(&x, &coupling.l, spec.range);
        exits += seg.positions.iter().filter(|p| p.distance(&uc) >= ur).count();
        let (tc, tr) = coupling_target(&x, &coupling.l, spec.range);
        let end = *seg.positions.last().unwrap();
        counts[ball_bin(&((end - tc) * (1.0 / tr)))] += 1;
    }
    let chi = chi_square_uniform(&counts);
    Outcome::new(
        exits == 0 && chi.p_value > ALPHA,
        format!("{n} segments, {exits} points outside U^x, chi-square p={:.3}", chi.p_value),
    )
}

fn c5_renewal(cfg: &ExperimentConfig, scans: &[RegenScan]) -> Outcome {
    let l = cfg.direction().unwrap();
    let mut rng = analysis_rng(cfg.environment.master_seed, 1);
    let report = renewal_tests(scans, &l, 999, &mut rng).unwrap();
    let p = |name: &str| report.tests.iter().find(|t| t.name == name).map(|t| t.p_value);
    let ks = p("duration_k1_vs_k2");
    let lag = p("lag1_duration_correlation");
    let r = cfg.environment.range;
    let gap = 10.5 * r - 2.0 * cfg.integrator.step * cfg.environment.drift_bound;
    Outcome::new(
        report.uncensored_blocks >= 1000
            && ks.is_some_and(|p| p > ALPHA)
            && lag.is_some_and(|p| p > ALPHA)
            && report.min_gap >= gap,
        format!(
            "{} blocks, KS k1/k2 p={:.3}, lag-1 p={:.3}, min gap {:.3} ≥ {gap:.3}",
            report.uncensored_blocks,
            ks.unwrap_or(f64::NAN),
            lag.unwrap_or(f64::NAN),
            report.min_gap
        ),
    )
}

fn c6_lln(cfg: &ExperimentConfig, scans: &[RegenScan]) -> Outcome {
    let l = cfg.direction().unwrap();
    let p = &cfg.parameters;
    let long = long_paths(&cfg.spec(), &cfg.integrator, p.long_duration.unwrap(), 0..p.long_paths.unwrap() as u64);
    let r = ballistic_statistics(scans, &long, &l).unwrap();
    Outcome::new(
        r.velocities_agree && r.velocity_l_lower > 0.0,
        format!(
            "block v·l={:.4}±{:.4}, X_H/H·l={:.4}±{:.4}, v·l 95% lower {:.4}; plain X_T/T·l={:.4} (coupling bias {:+.4}±{:.4})",
            r.velocity.velocity.dot(&l),
            r.velocity.standard_error.dot(&l).abs(),
            r.direct_velocity.velocity.dot(&l),
            r.direct_velocity.standard_error.dot(&l).abs(),
            r.velocity_l_lower,
            r.plain_velocity.velocity.dot(&l),
            r.coupling_bias.velocity.dot(&l),
            r.coupling_bias.standard_error.dot(&l).abs(),
        ),
    )
}

fn c7_green_oracle() -> Outcome {
    let spec = Arc::new(EnvironmentSpec::constant(Vector::zeros(1), 1.0, 17));
    let integ = IntegratorConfig::new(0.0001, BoundaryCorrection::BridgeTest, 100.0);
    let domain = Domain::Box {
        lo: Vector::from_slice(&[-0.5]),
        hi: Vector::from_slice(&[0.5]),
    };
    let grid = DomainGrid::new(domain, 0.025).unwrap();
    let green = estimate_green(&spec, &grid, &integ, 1, 20_000).unwrap();
    let mid = green.mean[grid.origin()];
    let mass = green.total_mass();
    Outcome::new(
        (mid - 0.5).abs() <= 0.05 * 0.5 && (mass - 0.25).abs() <= 3.0 * green.exit_time_se,
        format!("ĝ(mid)={mid:.4}, Σĝ·Δ={mass:.4} vs 0.25 (SE {:.4})", green.exit_time_se),
    )
}

fn c8_degenerate_drift() -> Outcome {
    let spec = Arc::new(EnvironmentSpec {
        dimension: 2,
        range: 1.0,
        drift_bound: 1.5,
        lipschitz_K: 60.0,
        ellipticity_nu: 1.0,
        base_drift: Vector::from_slice(&[0.3, 0.0]),
        bump_intensity: 1.0,
        bump_amplitude_law: AmplitudeLaw::UniformBall {
            center: Vector::zeros(2),
            radius: 0.4,
        },
        sigma_mode: SigmaMode::Identity,
        master_seed: 23,
    });
    let integ = IntegratorConfig::default();
    let grid = DomainGrid::new(
        Domain::Ball {
            center: Vector::zeros(2),
            radius: 3.0,
        },
        0.25,
    )
    .unwrap();

    let green = estimate_green(&spec, &grid, &integ, 1, 400).unwrap();
    let field = auxiliary_drift(&spec, &green).unwrap();
    let env = Environment::new(spec.clone(), green.env_indices[0]);
    let mut probe = env.probe();
    let (mut reliable, mut worst) = (0, 0.0f64);
    for c in (0..grid.len()).filter(|&c| field.reliable[c]) {
        reliable += 1;
        worst = worst.max((field.drift[c] - probe.coefficients(&grid.center(c)).0).norm());
    }

    let flat = Arc::new(EnvironmentSpec {
        bump_intensity: 0.0,
        ..(*spec).clone()
    });
    let green = estimate_green(&flat, &grid, &integ, 200, 1).unwrap();
    let field = auxiliary_drift(&flat, &green).unwrap();
    let (mut flat_reliable, mut flat_worst) = (0, 0.0f64);
    for c in (0..grid.len()).filter(|&c| field.reliable[c]) {
        flat_reliable += 1;
        flat_worst = flat_worst.max((field.drift[c] - flat.base_drift).norm());
    }
    Outcome::new(
        reliable > 0 && worst <= 1e-12 && flat_reliable > 0 && flat_worst <= 1e-12,
        format!(
            "n_env=1: max |b′−b| {worst:.1e} on {reliable} reliable cells; deterministic: max |b′−b₀| {flat_worst:.1e} on {flat_reliable} cells"
        ),
    )
}

fn c9_exit_identity() -> Outcome {
    let base = load("exit_identity.cfg");
    let seeds = 20u64;
    let mut rejections = 0;
    let mut ps = Vec::new();
    for seed in 1..=seeds {
        let mut cfg = base.clone();
        cfg.environment.master_seed = seed;
        let spec = cfg.spec();
        let p = &cfg.parameters;
        let k = cfg.kalikow();
        let domain = exit_domain(&cfg.direction().unwrap(), spec.range, p.radius_ranges.unwrap());
        let grid = DomainGrid::new(domain, k.cell_fraction * spec.range).unwrap();
        let green = estimate_green(&spec, &grid, &cfg.integrator, k.n_env, k.n_traj).unwrap();
        let field = auxiliary_drift(&spec, &green).unwrap();
        let report =
            exit_law_identity_test(&spec, &field, &cfg.integrator, p.exits.unwrap(), p.permutations.unwrap()).unwrap();
        if report.test.p_value <= ALPHA {
            rejections += 1;
        }
        ps.push(format!("{:.3}", report.test.p_value));
    }
    let rate = rejections as f64 / seeds as f64;
    Outcome::new(
        rate <= 0.05,
        format!("radius 12R, 4000 exits, {rejections}/{seeds} rejected at 1% (p: {})", ps.join(" ")),
    )
}

struct CrossCheck {
    name: &'static str,
    t_consistent: bool,
    tau1_integrable: bool,
    detail: String,
}

fn cross_check(
    name: &'static str,
    cfg: &ExperimentConfig,
    ladder: &[SlabExitEstimate],
    n_traj: u64,
    horizon: u64,
) -> CrossCheck {
    let spec = cfg.spec();
    let coupling = cfg.coupling.clone().unwrap_or_else(|| CouplingConfig::new(cfg.direction().unwrap()));
    let scans = regeneration_batch(&spec, &cfg.integrator, &coupling, &ScanConfig::new(horizon), 0..n_traj).unwrap();
    let fit = fit_condition_t(ladder, 1.0).unwrap();
    let mut rng = analysis_rng(spec.master_seed, 2);
    let tau1 = tau1_integrability(&scans, 1.0, &mut rng).unwrap();
    CrossCheck {
        name,
        t_consistent: fit.verdict.is_consistent(),
        tau1_integrable: tau1.verdict == IntegrabilityVerdict::Integrable,
        detail: format!(
            "{name}: T {:?} (slope {:.3}), tau_1 {:?} (late survival {:.2})",
            fit.verdict,
            fit.slope.unwrap_or(f64::NAN),
            tau1.verdict,
            tau1.late_survival
        ),
    }
}

fn c10_equivalence(checks: &[CrossCheck]) -> Outcome {
    let pass = checks.iter().all(|c| c.t_consistent == c.tau1_integrable);
    let detail: Vec<&str> = checks.iter().map(|c| c.detail.as_str()).collect();
    let names: Vec<&str> = checks.iter().map(|c| c.name).collect();
    Outcome::new(pass, format!("[{}] {}", names.join(", "), detail.join("; ")))
}

fn c11_criterion_demo(cfg: &ExperimentConfig, ladder: &[SlabExitEstimate]) -> Outcome {
    let spec = cfg.spec();
    let l = cfg.direction().unwrap();
    let split = rdelab::env::sign_split_moments(&spec, &l, cfg.parameters.n_env_moments.unwrap()).unwrap();
    let ratio = split.mean_plus / split.mean_minus;
    let k = condition_k_for_spec(&spec, &l, &cfg.integrator, &cfg.kalikow()).unwrap();
    let t = fit_condition_t(ladder, 1.0).unwrap();
    Outcome::new(
        ratio >= 5.0 && k.verdict == KVerdict::Holds && t.verdict.is_consistent(),
        format!(
            "mean+/mean− = {ratio:.2}, K {:?} (ε̂ {:.3}, lower {:.3}), T {:?} slope {:.3}",
            k.verdict,
            k.epsilon_hat.unwrap_or(f64::NAN),
            k.lower_bound.unwrap_or(f64::NAN),
            t.verdict,
            t.slope.unwrap_or(f64::NAN)
        ),
    )
}

fn tabular_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != experiment::MANIFEST)
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn c12_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for name in ["driftfree.cfg", "exit_identity.cfg"] {
        let loaded = config::load(&configs().join(name)).unwrap();
        let runs: Vec<Vec<(String, Vec<u8>)>> = [(1, "a"), (1, "b"), (3, "c")]
            .iter()
            .map(|&(workers, tag)| {
                let out = tmp.path().join(format!("{name}-{tag}"));
                let opts = RunOptions {
                    workers: Some(workers),
                    output: Some(out.clone()),
                    seed_override: None,
                };
                experiment::run(&loaded, &opts).unwrap();
                tabular_outputs(&out)
            })
            .collect();
        let same = runs[0] == runs[1] && runs[0] == runs[2];
        pass &= same && !runs[0].is_empty();
        detail.push(format!("{name}: {} files {}", runs[0].len(), if same { "identical" } else { "DIFFER" }));
    }
    Outcome::new(pass, format!("{} (repeat and 1 vs 3 workers)", detail.join("; ")))
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, run: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = run();
        println!(
            "criterion {n:>2} [{}] {name}: {} ({:.1?})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed()
        );
        results.push((n, name, o));
    };

    record(1, "symmetric slab", &mut c1_symmetric_slab);
    record(2, "drifted scale-function oracle", &mut c2_drifted_interval);

    let nonnestling = load("nonnestling_T.cfg");
    let p = &nonnestling.parameters;
    let start = Instant::now();
    let nn_ladder = slab_ladder(
        &nonnestling.spec(),
        &nonnestling.direction().unwrap(),
        p.depth_ratio.unwrap_or(1.0),
        p.ladder.as_ref().unwrap(),
        &nonnestling.integrator,
        p.n.unwrap(),
    )
    .unwrap();
    let nn_elapsed = start.elapsed();
    record(3, "non-nestling (T) bound", &mut || c3_nonnestling_bound(&nn_ladder, nn_elapsed));
    record(4, "coupling contract", &mut c4_coupling_contract);

    let renewal = load("nonnestling_renewal.cfg");
    let ballistic = load("nonnestling_ballistic.cfg");
    assert_eq!(renewal.environment, ballistic.environment, "shared scans need one environment");
    assert_eq!(renewal.coupling, ballistic.coupling);
    assert_eq!(renewal.parameters.n_traj, ballistic.parameters.n_traj);
    assert_eq!(renewal.parameters.horizon, ballistic.parameters.horizon);
    let scans = regeneration_batch(
        &renewal.spec(),
        &renewal.integrator,
        renewal.coupling.as_ref().unwrap(),
        &renewal.scan(),
        0..renewal.parameters.n_traj.unwrap() as u64,
    )
    .unwrap();
    record(5, "renewal structure", &mut || c5_renewal(&renewal, &scans));
    record(6, "LLN consistency", &mut || c6_lln(&ballistic, &scans));
    drop(scans);

    record(7, "Green-function oracle", &mut c7_green_oracle);
    record(8, "auxiliary-drift degenerate cases", &mut c8_degenerate_drift);
    record(9, "exit-law identity", &mut c9_exit_identity);

    let driftfree = load("driftfree.cfg");
    let signchanging = load("signchanging.cfg");
    let sc = &signchanging.parameters;
    let sc_ladder = slab_ladder(
        &signchanging.spec(),
        &signchanging.direction().unwrap(),
        1.0,
        sc.ladder.as_ref().unwrap(),
        &signchanging.integrator,
        sc.n.unwrap(),
    )
    .unwrap();
    record(10, "T / tau_1 equivalence", &mut || {
        let df = &driftfree.parameters;
        let df_ladder = slab_ladder(
            &driftfree.spec(),
            &driftfree.direction().unwrap(),
            1.0,
            df.ladder.as_ref().unwrap(),
            &driftfree.integrator,
            df.n.unwrap(),
        )
        .unwrap();
        c10_equivalence(&[
            cross_check("drift-free", &driftfree, &df_ladder, 400, 400),
            cross_check("non-nestling", &nonnestling, &nn_ladder, 500, 2000),
            cross_check("sign-changing", &signchanging, &sc_ladder, 500, 3000),
        ])
    });
    record(11, "drift-sign criterion demo", &mut || c11_criterion_demo(&signchanging, &sc_ladder));
    record(12, "determinism", &mut c12_determinism);

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed: {failed:?}")
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

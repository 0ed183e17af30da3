//! Configuration-driven experiment runs.
//!
//! Each run writes its tables and summaries, a verbatim copy of the
//! configuration and a manifest into the output directory. Statistical
//! outputs depend only on the configuration (and seed override), never on
//! the worker count. On failure, whatever was written is moved into
//! `quarantine/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::ballistic::{
    analysis_rng, ballistic_statistics, cone_directions, fit_condition_t, long_paths, slab_ladder,
    tau1_integrability, SlabExitEstimate, GAMMA_LADDER,
};
use crate::config::{ExperimentConfig, ExperimentKind, LoadedConfig};
use crate::error::Result;
use crate::kalikow::{
    auxiliary_drift, check_condition_k, criterion_check, domain_family, estimate_green, exit_law_identity_test,
    family_fields, AuxiliaryDriftField, Domain, DomainGrid, GreenEstimate,
};
use crate::regen::{regeneration_batch, renewal_tests, RegenScan};
use crate::vector::Vector;
use crate::Error;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub workers: Option<usize>,
    pub output: Option<PathBuf>,
    pub seed_override: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub experiment: String,
    pub config_hash: String,
    pub config_copy: String,
    pub version: String,
    pub master_seed: u64,
    pub seed_override: Option<u64>,
    pub workers: usize,
    pub wall_time_seconds: f64,
    pub outputs: Vec<OutputFile>,
    pub censoring: BTreeMap<String, u64>,
}

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.cfg";
pub const QUARANTINE: &str = "quarantine";

/// Writer that remembers every file it produced.
struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
    censoring: BTreeMap<String, u64>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            files: Vec::new(),
            censoring: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)?;
        self.files.push(path);
        Ok(())
    }

    fn table(&mut self, name: &str, table: Table) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&table.header)?;
        for row in &table.rows {
            w.write_record(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.write(name, &bytes)
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn lines<T: Serialize>(&mut self, name: &str, items: impl IntoIterator<Item = T>) -> Result<()> {
        let mut bytes = Vec::new();
        for item in items {
            serde_json::to_writer(&mut bytes, &item)?;
            bytes.push(b'\n');
        }
        self.write(name, &bytes)
    }

    fn censored(&mut self, key: &str, count: u64) {
        *self.censoring.entry(key.to_string()).or_default() += count;
    }

    fn quarantine(&self) -> Result<PathBuf> {
        let q = self.dir.join(QUARANTINE);
        fs::create_dir_all(&q)?;
        for f in &self.files {
            if let Some(name) = f.file_name() {
                fs::rename(f, q.join(name))?;
            }
        }
        Ok(q)
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

fn axis_names(prefix: &str, d: usize) -> Vec<String> {
    ["x", "y", "z"][..d].iter().map(|a| format!("{prefix}{a}")).collect()
}

fn components(v: &Vector) -> Vec<String> {
    v.as_slice().iter().map(|x| x.to_string()).collect()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn outcome<T: Serialize>(r: Result<T>) -> Value {
    match r {
        Ok(v) => serde_json::to_value(v).unwrap_or(Value::Null),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Runs the configured experiment and writes its outputs.
pub fn run(loaded: &LoadedConfig, opts: &RunOptions) -> Result<RunManifest> {
    let mut config = loaded.config.clone();
    if let Some(seed) = opts.seed_override {
        config.environment.master_seed = seed;
    }
    config.validated()?;
    let dir = opts
        .output
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: set output_dir or pass --output".into()))?;
    let workers = opts
        .workers
        .or(config.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;

    let started = Instant::now();
    let mut out = Outputs::new(dir.clone())?;
    let result = out
        .write(CONFIG_COPY, loaded.text.as_bytes())
        .and_then(|_| pool.install(|| dispatch(&config, &mut out)));
    if let Err(e) = result {
        let q = out.quarantine()?;
        return Err(Error::Config(format!("{e} (partial outputs moved to {})", q.display())));
    }
    let outputs = out
        .files
        .iter()
        .map(|f| {
            Ok(OutputFile {
                path: f.file_name().unwrap().to_string_lossy().into_owned(),
                sha256: file_sha256(f)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        experiment: config.experiment.to_string(),
        config_hash: loaded.hash(),
        config_copy: CONFIG_COPY.into(),
        version: VERSION.into(),
        master_seed: config.environment.master_seed,
        seed_override: opts.seed_override,
        workers,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        outputs,
        censoring: out.censoring.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(dir.join(MANIFEST), bytes)?;
    Ok(manifest)
}

fn dispatch(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    match cfg.experiment {
        ExperimentKind::SlabLadder => run_slab_ladder(cfg, out),
        ExperimentKind::Regeneration => run_regeneration(cfg, out),
        ExperimentKind::BallisticReport => run_ballistic(cfg, out),
        ExperimentKind::Kalikow => run_kalikow(cfg, out),
        ExperimentKind::ExitIdentity => run_exit_identity(cfg, out),
        ExperimentKind::Criterion => run_criterion(cfg, out),
    }
}

fn direction(cfg: &ExperimentConfig) -> Vector {
    cfg.direction().expect("validated")
}

fn gammas(cfg: &ExperimentConfig) -> Vec<f64> {
    cfg.parameters.gammas.clone().unwrap_or_else(|| GAMMA_LADDER.to_vec())
}

fn slab_table(rows: &[(Vector, Vec<SlabExitEstimate>)]) -> Table {
    let d = rows[0].0.dim();
    let mut t = Table::new(
        axis_names("l", d).into_iter().chain(
            [
                "width",
                "depth_ratio",
                "n",
                "exit_left",
                "exit_right",
                "censored",
                "p_hat",
                "ci_low",
                "ci_high",
                "censoring_warning",
            ]
            .map(String::from),
        ),
    );
    for (dir, estimates) in rows {
        for e in estimates {
            let mut row = components(dir);
            row.extend([
                e.slab.width.to_string(),
                e.slab.depth_ratio.to_string(),
                e.n.to_string(),
                e.exit_left.to_string(),
                e.exit_right.to_string(),
                e.censored.to_string(),
                e.p_hat.to_string(),
                e.ci.low.to_string(),
                e.ci.high.to_string(),
                e.censoring_warning.to_string(),
            ]);
            t.push(row);
        }
    }
    t
}

fn run_slab_ladder(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let p = &cfg.parameters;
    let spec = cfg.spec();
    let l = direction(cfg);
    let ladder = p.ladder.clone().expect("validated");
    let n = p.n.expect("validated");
    let depth = p.depth_ratio.unwrap_or(1.0);
    let dirs = match p.cone_half_angle {
        Some(angle) => cone_directions(&l, angle, p.n_dirs.unwrap_or(4)),
        None => vec![l],
    };
    let mut rows = Vec::new();
    for dir in dirs {
        let est = slab_ladder(&spec, &dir, depth, &ladder, &cfg.integrator, n)?;
        out.censored("slab_paths", est.iter().map(|e| e.censored).sum());
        rows.push((dir, est));
    }
    out.table("slab_ladder.csv", slab_table(&rows))?;
    let fits: Vec<Value> = rows
        .iter()
        .map(|(dir, est)| {
            let per_gamma: Vec<Value> = gammas(cfg).into_iter().map(|g| outcome(fit_condition_t(est, g))).collect();
            json!({ "direction": dir, "fits": per_gamma })
        })
        .collect();
    out.json("summary.json", &json!({ "experiment": "slab_ladder", "directions": fits }))
}

fn scans(cfg: &ExperimentConfig) -> Result<Vec<RegenScan>> {
    let n = cfg.parameters.n_traj.expect("validated") as u64;
    let coupling = cfg.coupling.as_ref().expect("validated");
    regeneration_batch(&cfg.spec(), &cfg.integrator, coupling, &cfg.scan(), 0..n)
}

fn write_scans(scans: &[RegenScan], d: usize, out: &mut Outputs) -> Result<()> {
    let mut t = Table::new(
        ["trajectory_index", "env_index", "k", "tau"]
            .map(String::from)
            .into_iter()
            .chain(axis_names("x_tau_", d))
            .chain(axis_names("increment_", d))
            .chain(["duration", "sup_displacement", "censored"].map(String::from)),
    );
    for s in scans {
        for r in &s.records {
            let mut row = vec![
                r.trajectory_index.to_string(),
                r.env_index.to_string(),
                r.k.to_string(),
                r.tau.to_string(),
            ];
            row.extend(components(&r.x_tau));
            match r.block_increment {
                Some(v) => row.extend(components(&v)),
                None => row.extend(std::iter::repeat_n(String::new(), d)),
            }
            row.extend([opt(r.block_duration), r.sup_displacement.to_string(), r.censored.to_string()]);
            t.push(row);
        }
    }
    out.table("regenerations.csv", t)?;
    out.lines(
        "scans.jsonl",
        scans.iter().map(|s| {
            json!({
                "trajectory_index": s.trajectory_index,
                "env_index": s.env_index,
                "records": s.records.len(),
                "censored_records": s.records.iter().filter(|r| r.censored).count(),
                "candidates": s.candidates,
                "start_no_backtrack": s.start_no_backtrack,
                "start_backtrack": s.start_backtrack,
                "failed": s.failed,
                "bridge_rejects": s.bridge_rejects,
                "end": s.end,
            })
        }),
    )?;
    out.censored("censored_blocks", scans.iter().flat_map(|s| &s.records).filter(|r| r.censored).count() as u64);
    out.censored("failed_trajectories", scans.iter().filter(|s| s.failed).count() as u64);
    Ok(())
}

fn run_regeneration(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let scans = scans(cfg)?;
    write_scans(&scans, cfg.environment.dimension, out)?;
    let mut rng = analysis_rng(cfg.environment.master_seed, 1);
    let perms = cfg.parameters.permutations.unwrap_or(999);
    let renewal = renewal_tests(&scans, &direction(cfg), perms, &mut rng);
    out.json("summary.json", &json!({ "experiment": "regeneration", "renewal": outcome(renewal) }))
}

fn run_ballistic(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let p = &cfg.parameters;
    let spec = cfg.spec();
    let l = direction(cfg);
    let scans = scans(cfg)?;
    write_scans(&scans, cfg.environment.dimension, out)?;
    let n_long = p.long_paths.expect("validated") as u64;
    let long = long_paths(&spec, &cfg.integrator, p.long_duration.expect("validated"), 0..n_long);
    let report = ballistic_statistics(&scans, &long, &l);
    if let Ok(r) = &report {
        let mut t = Table::new(["u", "survival", "log_log_u", "log_neg_log_survival"]);
        for row in &r.tau1_survival {
            t.push(vec![
                row.u.to_string(),
                row.survival.to_string(),
                row.log_log_u.to_string(),
                row.log_neg_log_survival.to_string(),
            ]);
        }
        out.table("tau1_survival.csv", t)?;
    }
    let mut rng = analysis_rng(spec.master_seed, 2);
    let tau1: Vec<Value> = gammas(cfg)
        .into_iter()
        .map(|g| outcome(tau1_integrability(&scans, g, &mut rng)))
        .collect();
    out.json(
        "summary.json",
        &json!({ "experiment": "ballistic_report", "ballistic": outcome(report), "tau1": tau1 }),
    )
}

fn green_table(green: &GreenEstimate) -> Table {
    let g = &green.grid;
    let d = g.dim();
    let mut t = Table::new(axis_names("", d).into_iter().chain(["g", "se", "censored"].map(String::from)));
    for c in 0..g.len() {
        if green.mean[c] == 0.0 && !g.domain.contains(&g.center(c)) {
            continue;
        }
        let mut row = components(&g.center(c));
        row.extend([green.mean[c].to_string(), green.se[c].to_string(), green.censored.to_string()]);
        t.push(row);
    }
    t
}

fn drift_table(field: &AuxiliaryDriftField, censored: u64) -> Table {
    let g = &field.grid;
    let d = g.dim();
    let mut t = Table::new(
        axis_names("", d)
            .into_iter()
            .chain(axis_names("b_", d))
            .chain(["reliable", "margin", "censored"].map(String::from)),
    );
    for c in 0..g.len() {
        if !g.domain.contains(&g.center(c)) {
            continue;
        }
        let mut row = components(&g.center(c));
        row.extend(components(&field.drift[c]));
        row.extend([field.reliable[c].to_string(), field.margin[c].to_string(), censored.to_string()]);
        t.push(row);
    }
    t
}

fn green_summary(label: &str, green: &GreenEstimate) -> Value {
    json!({
        "domain": label,
        "cells": green.grid.len(),
        "n_env": green.n_env,
        "n_traj": green.n_traj,
        "mean_exit_time": green.mean_exit_time,
        "exit_time_se": green.exit_time_se,
        "total_mass": green.total_mass(),
        "censored": green.censored,
        "flagged": green.flagged,
    })
}

fn run_kalikow(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let spec = cfg.spec();
    let l = direction(cfg);
    let k = cfg.kalikow();
    let fields = family_fields(&spec, &l, &cfg.integrator, &k)?;
    let mut greens = Vec::new();
    let mut pairs = Vec::new();
    for (label, green, field) in fields {
        out.table(&format!("green_{label}.csv"), green_table(&green))?;
        out.table(&format!("drift_{label}.csv"), drift_table(&field, green.censored))?;
        out.censored("green_paths", green.censored);
        greens.push(green_summary(&label, &green));
        pairs.push((label, field));
    }
    let mut rng = analysis_rng(spec.master_seed, 3);
    let report = check_condition_k(&pairs, &l, k.bootstrap, &mut rng)?;
    out.json(
        "summary.json",
        &json!({
            "experiment": "kalikow",
            "green": greens,
            "condition_k": report,
            "note": "finite family of balls and boxes; an under-approximation of all bounded domains",
        }),
    )
}

/// Ball of radius `r·R` with the origin `6R` from its back wall.
pub fn exit_domain(l: &Vector, range: f64, radius_ranges: f64) -> Domain {
    domain_family(l, range, &[radius_ranges])
        .into_iter()
        .next()
        .map(|(_, d)| d)
        .expect("family always contains a ball")
}

fn run_exit_identity(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let p = &cfg.parameters;
    let spec = cfg.spec();
    let l = direction(cfg);
    let k = cfg.kalikow();
    let domain = exit_domain(&l, spec.range, p.radius_ranges.unwrap_or(12.0));
    let grid = DomainGrid::new(domain, k.cell_fraction * spec.range)?;
    let green = estimate_green(&spec, &grid, &cfg.integrator, k.n_env, k.n_traj)?;
    let field = auxiliary_drift(&spec, &green)?;
    let report = exit_law_identity_test(
        &spec,
        &field,
        &cfg.integrator,
        p.exits.expect("validated"),
        p.permutations.unwrap_or(199),
    )?;
    let d = spec.dimension;
    let mut t = Table::new(["sample".to_string()].into_iter().chain(axis_names("", d)).chain(["censored".into()]));
    for (name, pts, cens) in [
        ("annealed", &report.annealed_exits, report.censored_annealed),
        ("auxiliary", &report.auxiliary_exits, report.censored_auxiliary),
    ] {
        for x in pts {
            let mut row = vec![name.to_string()];
            row.extend(components(x));
            row.push(cens.to_string());
            t.push(row);
        }
    }
    out.table("exits.csv", t)?;
    out.table("drift_ball.csv", drift_table(&field, green.censored))?;
    out.censored("green_paths", green.censored);
    out.censored("annealed_exits", report.censored_annealed as u64);
    out.censored("auxiliary_exits", report.censored_auxiliary as u64);
    out.json(
        "summary.json",
        &json!({
            "experiment": "exit_identity",
            "domain": grid.domain,
            "green": green_summary("ball", &green),
            "n": report.n,
            "censored_annealed": report.censored_annealed,
            "censored_auxiliary": report.censored_auxiliary,
            "energy_statistic": report.test.statistic,
            "p_value": report.test.p_value,
        }),
    )
}

fn run_criterion(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let p = &cfg.parameters;
    let spec = cfg.spec();
    let l = direction(cfg);
    let k = cfg.kalikow();
    let report = criterion_check(
        &spec,
        &l,
        p.n_env_moments.unwrap_or(10_000),
        &cfg.integrator,
        &k,
        p.tilts.as_deref().expect("validated"),
    )?;
    let mut t = Table::new(["base_scale", "ratio", "verdict", "epsilon_hat"]);
    for row in &report.scan {
        t.push(vec![
            row.base_scale.to_string(),
            row.ratio.to_string(),
            serde_json::to_value(row.verdict)?.as_str().unwrap_or_default().to_string(),
            opt(row.epsilon_hat),
        ]);
    }
    out.table("criterion_scan.csv", t)?;
    let t_fit = match (&p.ladder, p.n) {
        (Some(ladder), Some(n)) => {
            let est = slab_ladder(&spec, &l, p.depth_ratio.unwrap_or(1.0), ladder, &cfg.integrator, n)?;
            out.censored("slab_paths", est.iter().map(|e| e.censored).sum());
            out.table("slab_ladder.csv", slab_table(&[(l, est.clone())]))?;
            outcome(fit_condition_t(&est, 1.0))
        }
        _ => Value::Null,
    };
    out.json(
        "summary.json",
        &json!({ "experiment": "criterion", "criterion": report, "condition_t_gamma_1": t_fit }),
    )
}

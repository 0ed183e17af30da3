//! Bernoulli coupling and regeneration times.
//!
//! A path is scanned online by a stack of hierarchies. The bottom one looks
//! for `τ₁`; whenever a hierarchy produces a candidate `S` it keeps watching
//! for a backtrack below `X_S·l − R` and a fresh hierarchy, rooted at `S`,
//! starts looking for the next candidate. A backtrack discards everything
//! above the failed hierarchy, which resumes its search at `R = ⌈J⌉`.
//! Coupling coins are drawn lazily, only at the times `Ñ` where a hierarchy
//! inspects them.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, EnvironmentSpec};
use crate::error::{require_unit, FieldError, Result};
use crate::rng::{StreamId, StreamTag};
use crate::sde::{ceil_time, gaussian, IntegratorConfig, Stepper};
use crate::stats::{correlation_permutation_test, ks_two_sample, TestResult};
use crate::vector::Vector;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    GeometricBridge,
    WeightedBridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingConfig {
    pub l: Vector,
    #[serde(default = "default_success_p")]
    pub success_p: f64,
    #[serde(default = "default_mode")]
    pub mode: CouplingMode,
    #[serde(default = "default_rejects")]
    pub bridge_max_rejects: usize,
}

fn default_success_p() -> f64 {
    0.05
}

fn default_mode() -> CouplingMode {
    CouplingMode::GeometricBridge
}

fn default_rejects() -> usize {
    1000
}

impl CouplingConfig {
    pub fn new(l: Vector) -> Self {
        Self {
            l,
            success_p: default_success_p(),
            mode: default_mode(),
            bridge_max_rejects: default_rejects(),
        }
    }

    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = Vec::new();
        if !self.l.is_unit(1e-12) {
            errors.push(FieldError::new(
                "coupling.l",
                format!("expected a unit vector, |l| = {}", self.l.norm()),
            ));
        }
        if !(self.success_p > 0.0 && self.success_p < 1.0) {
            errors.push(FieldError::new("coupling.success_p", "must lie in (0, 1)"));
        }
        errors
    }
}

/// Uniform point in the ball of radius `radius` around `center`.
pub fn uniform_in_ball(center: &Vector, radius: f64, rng: &mut ChaCha8Rng) -> Vector {
    let d = center.dim();
    let dir = loop {
        let g = gaussian(d, rng);
        if let Some(u) = g.normalized() {
            break u;
        }
    };
    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
    *center + dir * r
}

/// One of 32 equal-volume bins of the unit ball (radial shells × angular sectors).
pub fn ball_bin(u: &Vector) -> usize {
    let d = u.dim();
    let r = u.norm().min(1.0 - 1e-15);
    let angle = |x: f64, y: f64| (y.atan2(x) + std::f64::consts::PI) / std::f64::consts::TAU;
    match d {
        1 => (((u[0] + 1.0) / 2.0 * 32.0) as usize).min(31),
        2 => {
            let shell = ((r * r * 4.0) as usize).min(3);
            let sector = ((angle(u[0], u[1]) * 8.0) as usize).min(7);
            shell * 8 + sector
        }
        _ => {
            let shell = ((r.powi(3) * 4.0) as usize).min(3);
            let hemi = usize::from(u[2] >= 0.0);
            let sector = ((angle(u[0], u[1]) * 4.0) as usize).min(3);
            shell * 8 + hemi * 4 + sector
        }
    }
}

/// A unit-time stretch of a coupled path.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSegment {
    /// Grid positions on `[0, 1]`, start included.
    pub positions: Vec<Vector>,
    /// `s(X)` at the left end of every step.
    pub scales: Vec<f64>,
    pub lambda: bool,
    /// Endpoint drawn uniformly on `B_R(x + 9Rl)` when `λ = 1`.
    pub target: Option<Vector>,
    pub rejects: usize,
    /// Discrete Girsanov log-weight of the plain kernel against the bridge.
    pub log_weight: Option<f64>,
}

/// `U^x = B_{6R}(x + 5Rl)`.
pub fn coupling_domain(x: &Vector, l: &Vector, range: f64) -> (Vector, f64) {
    (*x + *l * (5.0 * range), 6.0 * range)
}

/// `B^x = B_R(x + 9Rl)`.
pub fn coupling_target(x: &Vector, l: &Vector, range: f64) -> (Vector, f64) {
    (*x + *l * (9.0 * range), range)
}

/// Guided bridge from `x` to a uniform point of `B^x` that stays in `U^x`.
pub fn bridge_segment(
    stepper: &mut Stepper<'_>,
    x: Vector,
    cfg: &CouplingConfig,
    range: f64,
    coupling_rng: &mut ChaCha8Rng,
    bridge_rng: &mut ChaCha8Rng,
) -> Result<CoupledSegment> {
    let (tc, tr) = coupling_target(&x, &cfg.l, range);
    let y = uniform_in_ball(&tc, tr, coupling_rng);
    let (uc, ur) = coupling_domain(&x, &cfg.l, range);
    let h = stepper.step_size();
    let n = (1.0 / h).round() as usize;
    let sqrt_h = h.sqrt();
    let weighted = cfg.mode == CouplingMode::WeightedBridge;
    let mut positions = Vec::with_capacity(n + 1);
    let mut scales = Vec::with_capacity(n);
    'attempt: for attempt in 0..=cfg.bridge_max_rejects {
        positions.clear();
        scales.clear();
        positions.push(x);
        let mut cur = x;
        let mut log_weight = 0.0;
        for j in 0..n {
            let (b, s) = stepper.probe().coefficients(&cur);
            scales.push(s);
            let next = if j + 1 == n {
                y
            } else {
                let t = j as f64 * h;
                let guide = (y - cur) * (1.0 / (1.0 - t));
                let xi = gaussian(x.dim(), bridge_rng);
                let next = cur + (b + guide) * h + xi * (s * sqrt_h);
                if weighted {
                    let dx = next - cur - b * h;
                    log_weight += -dx.dot(&guide) / (s * s) + guide.norm_sq() * h / (2.0 * s * s);
                }
                next
            };
            if next.distance(&uc) >= ur {
                continue 'attempt;
            }
            positions.push(next);
            cur = next;
        }
        return Ok(CoupledSegment {
            positions,
            scales,
            lambda: true,
            target: Some(y),
            rejects: attempt,
            log_weight: weighted.then_some(log_weight),
        });
    }
    Err(Error::BridgeExhausted {
        rejects: cfg.bridge_max_rejects,
    })
}

/// One unit of time of the coupled process started at `x`.
///
/// Draws `λ ~ Bernoulli(p)`; on success the segment is a guided bridge into
/// `B^x` that never leaves `U^x`, otherwise a plain quenched segment.
pub fn coupled_unit_segment(
    stepper: &mut Stepper<'_>,
    x: Vector,
    cfg: &CouplingConfig,
    range: f64,
    coupling_rng: &mut ChaCha8Rng,
    bridge_rng: &mut ChaCha8Rng,
) -> Result<CoupledSegment> {
    if coupling_rng.random::<f64>() < cfg.success_p {
        return bridge_segment(stepper, x, cfg, range, coupling_rng, bridge_rng);
    }
    let n = (1.0 / stepper.step_size()).round() as usize;
    let mut positions = Vec::with_capacity(n + 1);
    let mut scales = Vec::with_capacity(n);
    positions.push(x);
    let mut cur = x;
    for _ in 0..n {
        let (next, s) = stepper.step(&cur);
        scales.push(s);
        positions.push(next);
        cur = next;
    }
    Ok(CoupledSegment {
        positions,
        scales,
        lambda: false,
        target: None,
        rejects: 0,
        log_weight: None,
    })
}

/// One grid step delivered to the scanner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSample {
    pub x: Vector,
    /// Crossing uniform and `s` at the left end, when bridge tests are on.
    pub crossing: Option<(f64, f64)>,
}

/// Produces a path one unit of time at a time, with coupling coins on demand.
pub trait PathSource {
    fn start(&self) -> Vector;
    fn steps_per_unit(&self) -> u64;
    /// Coin `λ_m`; only called for times the scanner inspects.
    fn draw_lambda(&mut self, m: u64) -> bool;
    /// Appends the grid points of `(m, m + 1]`.
    fn unit_segment(&mut self, m: u64, from: Vector, coupled: bool, out: &mut Vec<StepSample>) -> Result<()>;
}

/// Path source for the coupled diffusion in a quenched environment.
pub struct CoupledSource<'a> {
    stepper: Stepper<'a>,
    start: Vector,
    cfg: CouplingConfig,
    range: f64,
    n: u64,
    coupling: ChaCha8Rng,
    bridge: ChaCha8Rng,
    crossing: Option<ChaCha8Rng>,
    pub rejects: u64,
    pub log_weights: Vec<f64>,
}

impl<'a> CoupledSource<'a> {
    pub fn new(
        env: &'a Environment,
        start: Vector,
        integrator: &IntegratorConfig,
        cfg: &CouplingConfig,
        stream: StreamId,
    ) -> Self {
        Self {
            stepper: Stepper::for_stream(env, integrator, stream),
            start,
            cfg: cfg.clone(),
            range: env.spec().range,
            n: integrator.steps_per_unit(),
            coupling: stream.rng(StreamTag::Coupling),
            bridge: stream.rng(StreamTag::Bridge),
            crossing: integrator.bridge().then(|| stream.rng(StreamTag::Crossing)),
            rejects: 0,
            log_weights: Vec::new(),
        }
    }
}

impl PathSource for CoupledSource<'_> {
    fn start(&self) -> Vector {
        self.start
    }

    fn steps_per_unit(&self) -> u64 {
        self.n
    }

    fn draw_lambda(&mut self, _m: u64) -> bool {
        self.coupling.random::<f64>() < self.cfg.success_p
    }

    fn unit_segment(&mut self, _m: u64, from: Vector, coupled: bool, out: &mut Vec<StepSample>) -> Result<()> {
        if coupled {
            let seg = bridge_segment(
                &mut self.stepper,
                from,
                &self.cfg,
                self.range,
                &mut self.coupling,
                &mut self.bridge,
            );
            let seg = match seg {
                Ok(seg) => seg,
                Err(e) => {
                    self.rejects += self.cfg.bridge_max_rejects as u64;
                    return Err(e);
                }
            };
            self.rejects += seg.rejects as u64;
            if let Some(w) = seg.log_weight {
                self.log_weights.push(w);
            }
            for (x, s) in seg.positions[1..].iter().zip(&seg.scales) {
                let crossing = self.crossing.as_mut().map(|r| (r.random::<f64>(), *s));
                out.push(StepSample { x: *x, crossing });
            }
        } else {
            let mut cur = from;
            for _ in 0..self.n {
                let (next, s) = self.stepper.step(&cur);
                let crossing = self.crossing.as_mut().map(|r| (r.random::<f64>(), s));
                out.push(StepSample { x: next, crossing });
                cur = next;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    /// Integer number of time units simulated.
    pub horizon: u64,
    /// A candidate is accepted as `τ_k` only if at least this much time
    /// remains after it without a backtrack.
    #[serde(default = "default_confirm")]
    pub confirm_window: u64,
}

fn default_confirm() -> u64 {
    10
}

impl ScanConfig {
    pub fn new(horizon: u64) -> Self {
        Self {
            horizon,
            confirm_window: default_confirm(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegenerationRecord {
    pub trajectory_index: u64,
    pub env_index: u64,
    pub k: usize,
    pub tau: u64,
    pub x_tau: Vector,
    /// `X_{τ_{k+1}} − X_{τ_k}`; absent for censored blocks.
    pub block_increment: Option<Vector>,
    pub block_duration: Option<u64>,
    /// `sup |X_t − X_{τ_k}|` over the block (observed part when censored).
    pub sup_displacement: f64,
    pub censored: bool,
}

/// Milestones of the hierarchy, in time order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScanEvent {
    /// `Ñ` with its coin.
    Candidate { depth: usize, time: u64, lambda: bool },
    /// `S = N + 1`.
    Success { depth: usize, time: u64 },
    /// Backtrack `J` after `S`, giving `R = ⌈J⌉`.
    Backtrack { depth: usize, time: f64, resume: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegenScan {
    pub trajectory_index: u64,
    pub env_index: u64,
    pub horizon: u64,
    pub records: Vec<RegenerationRecord>,
    /// Every surviving candidate at the horizon, confirmed or not.
    pub candidates: Vec<u64>,
    pub start_no_backtrack: bool,
    /// First time `X·l ≤ X_0·l − R`, if seen before the horizon.
    pub start_backtrack: Option<f64>,
    /// Bridge rejections exhausted; the trajectory must be discarded.
    pub failed: bool,
    pub bridge_rejects: u64,
    pub events: Vec<ScanEvent>,
    pub end: Vector,
}

impl RegenScan {
    /// Confirmed `τ₁`, if any.
    pub fn tau1(&self) -> Option<&RegenerationRecord> {
        self.records.iter().find(|r| r.k == 1)
    }

    pub fn uncensored(&self) -> impl Iterator<Item = &RegenerationRecord> {
        self.records.iter().filter(|r| !r.censored)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Search { level: f64 },
    Oscillation { anchor: f64, until: u64, failed: bool },
    Bridge { until: u64 },
    Monitor { s: u64, threshold: f64 },
    Wait { until: u64 },
}

#[derive(Debug, Clone, Copy)]
struct Hierarchy {
    origin: usize,
    phase: Phase,
}

struct Scanner {
    range: f64,
    n: u64,
    h: f64,
    proj: Vec<f64>,
    unit_max: Vec<f64>,
    stack: Vec<Hierarchy>,
    start_threshold: f64,
    start_backtrack: Option<f64>,
    pending_lambda: Option<u64>,
    events: Vec<ScanEvent>,
}

impl Scanner {
    fn new(l: Vector, range: f64, n: u64, start: &Vector) -> Self {
        let p0 = start.dot(&l);
        Self {
            range,
            n,
            h: 1.0 / n as f64,
            proj: vec![p0],
            unit_max: vec![p0],
            stack: vec![Hierarchy {
                origin: 0,
                phase: Phase::Search { level: p0 + 3.0 * range },
            }],
            start_threshold: p0 - range,
            start_backtrack: None,
            pending_lambda: None,
            events: Vec::new(),
        }
    }

    fn max_between(&self, from: usize, to: usize) -> f64 {
        let n = self.n as usize;
        let mut m = f64::NEG_INFINITY;
        let mut i = from;
        while i <= to {
            if i % n == 0 && i + n <= to && i / n < self.unit_max.len() {
                m = m.max(self.unit_max[i / n]);
                i += n;
            } else {
                m = m.max(self.proj[i]);
                i += 1;
            }
        }
        m
    }

    /// Whether the step `prev → cur` reaches `{x·l ≤ threshold}`.
    fn crossed(threshold: f64, prev: f64, cur: f64, crossing: Option<(f64, f64)>, h: f64) -> bool {
        if cur <= threshold {
            return true;
        }
        match crossing {
            Some((u, s)) => u < (-2.0 * (prev - threshold) * (cur - threshold) / (s * s * h)).exp(),
            None => false,
        }
    }

    /// Processes grid index `i` (already pushed). Returns the time at which a
    /// coupling coin is needed, if any.
    fn advance(&mut self, i: usize, crossing: Option<(f64, f64)>) {
        let n = self.n as usize;
        let p = self.proj[i];
        let prev = self.proj[i - 1];
        let t = i as f64 * self.h;
        // Unit-interval maxima cover [m n, (m + 1) n] inclusive.
        let unit = (i - 1) / n;
        if unit >= self.unit_max.len() {
            self.unit_max.push(prev);
        }
        self.unit_max[unit] = self.unit_max[unit].max(p);

        if self.start_backtrack.is_none() && Self::crossed(self.start_threshold, prev, p, crossing, self.h) {
            self.start_backtrack = Some(t);
        }

        // Backtracks: thresholds increase with depth and share the uniform,
        // so failures propagate from the top down.
        let mut depth = self.stack.len();
        while depth > 0 {
            depth -= 1;
            let Phase::Monitor { threshold, .. } = self.stack[depth].phase else {
                continue;
            };
            if !Self::crossed(threshold, prev, p, crossing, self.h) {
                break;
            }
            let resume = ceil_time(t);
            self.stack.truncate(depth + 1);
            self.stack[depth].phase = Phase::Wait { until: resume };
            self.events.push(ScanEvent::Backtrack { depth, time: t, resume });
        }

        let depth = self.stack.len() - 1;
        let at_integer = i % n == 0;
        let time_int = (i / n) as u64;
        let origin = self.stack[depth].origin;
        match self.stack[depth].phase {
            Phase::Search { level } => {
                if p >= level {
                    if at_integer {
                        self.pending_lambda = Some(time_int);
                    } else {
                        self.stack[depth].phase = Phase::Oscillation {
                            anchor: p,
                            until: time_int + 1,
                            failed: false,
                        };
                    }
                }
            }
            Phase::Oscillation { anchor, until, failed } => {
                let failed = failed || (p - anchor).abs() >= self.range / 2.0;
                if at_integer && time_int == until {
                    if failed {
                        let level = self.max_between(origin, i) + self.range;
                        self.stack[depth].phase = Phase::Search { level };
                    } else {
                        self.pending_lambda = Some(time_int);
                    }
                } else {
                    self.stack[depth].phase = Phase::Oscillation { anchor, until, failed };
                }
            }
            Phase::Bridge { until } => {
                if at_integer && time_int == until {
                    self.stack[depth].phase = Phase::Monitor {
                        s: until,
                        threshold: p - self.range,
                    };
                    self.events.push(ScanEvent::Success { depth, time: until });
                    self.stack.push(Hierarchy {
                        origin: i,
                        phase: Phase::Search {
                            level: p + 3.0 * self.range,
                        },
                    });
                }
            }
            Phase::Wait { until } => {
                if at_integer && time_int == until {
                    let level = self.max_between(origin, i) + self.range;
                    self.stack[depth].phase = Phase::Search { level };
                }
            }
            Phase::Monitor { .. } => unreachable!("the deepest hierarchy is never monitoring"),
        }
    }

    /// Applies the coin drawn for the pending candidate `Ñ = m`.
    fn resolve(&mut self, m: u64, lambda: bool) -> bool {
        let depth = self.stack.len() - 1;
        self.events.push(ScanEvent::Candidate { depth, time: m, lambda });
        let p = *self.proj.last().unwrap();
        self.stack[depth].phase = if lambda {
            Phase::Bridge { until: m + 1 }
        } else {
            Phase::Search {
                level: p + 3.0 * self.range,
            }
        };
        lambda
    }
}

/// Scans a path for regeneration times up to `scan.horizon`.
pub fn scan_path<S: PathSource>(
    source: &mut S,
    l: &Vector,
    range: f64,
    scan: &ScanConfig,
) -> Result<RegenScan> {
    require_unit("coupling.l", l)?;
    let n = source.steps_per_unit();
    let start = source.start();
    let mut scanner = Scanner::new(*l, range, n, &start);
    let mut positions = Vec::with_capacity((scan.horizon * n + 1) as usize);
    positions.push(start);
    let mut segment = Vec::with_capacity(n as usize);
    let mut coupled = false;
    let mut failed = false;
    for m in 0..scan.horizon {
        if let Some(at) = scanner.pending_lambda.take() {
            debug_assert_eq!(at, m);
            coupled = scanner.resolve(at, source.draw_lambda(at));
        }
        segment.clear();
        let from = *positions.last().unwrap();
        match source.unit_segment(m, from, coupled, &mut segment) {
            Ok(()) => {}
            Err(Error::BridgeExhausted { .. }) => {
                failed = true;
                break;
            }
            Err(e) => return Err(e),
        }
        coupled = false;
        for sample in &segment {
            positions.push(sample.x);
            scanner.proj.push(sample.x.dot(l));
            scanner.advance(positions.len() - 1, sample.crossing);
        }
    }
    let candidates: Vec<u64> = scanner
        .stack
        .iter()
        .filter_map(|h| match h.phase {
            Phase::Monitor { s, .. } => Some(s),
            _ => None,
        })
        .collect();
    let records = if failed {
        Vec::new()
    } else {
        build_records(&positions, n, &candidates, scan)
    };
    Ok(RegenScan {
        trajectory_index: 0,
        env_index: 0,
        horizon: scan.horizon,
        records,
        candidates,
        start_no_backtrack: scanner.start_backtrack.is_none() && !failed,
        start_backtrack: scanner.start_backtrack,
        failed,
        bridge_rejects: 0,
        events: scanner.events,
        end: *positions.last().unwrap(),
    })
}

fn build_records(positions: &[Vector], n: u64, candidates: &[u64], scan: &ScanConfig) -> Vec<RegenerationRecord> {
    let confirmed: Vec<u64> = candidates
        .iter()
        .copied()
        .filter(|&s| s + scan.confirm_window <= scan.horizon)
        .collect();
    let mut taus = vec![0u64];
    taus.extend(&confirmed);
    let last = positions.len() - 1;
    let mut records = Vec::with_capacity(taus.len());
    for (k, &tau) in taus.iter().enumerate() {
        let from = (tau * n) as usize;
        let next = taus.get(k + 1).copied();
        let to = next.map_or(last, |t| (t * n) as usize);
        let x_tau = positions[from];
        let sup = positions[from..=to]
            .iter()
            .map(|x| x.distance(&x_tau))
            .fold(0.0, f64::max);
        records.push(RegenerationRecord {
            trajectory_index: 0,
            env_index: 0,
            k,
            tau,
            x_tau,
            block_increment: next.map(|_| positions[to] - x_tau),
            block_duration: next.map(|t| t - tau),
            sup_displacement: sup,
            censored: next.is_none(),
        });
    }
    records
}

/// Regeneration scan of one annealed trajectory of the coupled process.
pub fn regeneration_scan(
    env: &Environment,
    start: Vector,
    integrator: &IntegratorConfig,
    coupling: &CouplingConfig,
    scan: &ScanConfig,
    stream: StreamId,
) -> Result<RegenScan> {
    let mut source = CoupledSource::new(env, start, integrator, coupling, stream);
    let mut out = scan_path(&mut source, &coupling.l, env.spec().range, scan)?;
    out.trajectory_index = stream.trajectory_index;
    out.env_index = stream.env_index;
    out.bridge_rejects = source.rejects;
    for r in &mut out.records {
        r.trajectory_index = stream.trajectory_index;
        r.env_index = stream.env_index;
    }
    Ok(out)
}

/// Annealed scans for trajectories `indices`, one environment each.
///
/// Results are in index order whatever the thread count.
pub fn regeneration_batch(
    spec: &Arc<EnvironmentSpec>,
    integrator: &IntegratorConfig,
    coupling: &CouplingConfig,
    scan: &ScanConfig,
    indices: std::ops::Range<u64>,
) -> Result<Vec<RegenScan>> {
    let start = Vector::zeros(spec.dimension);
    indices
        .into_par_iter()
        .map(|k| {
            let env = Environment::new(spec.clone(), k);
            regeneration_scan(&env, start, integrator, coupling, scan, StreamId::new(spec.master_seed, k, k))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedTest {
    pub name: String,
    pub statistic: f64,
    pub p_value: f64,
    pub n_a: usize,
    pub n_b: usize,
}

impl NamedTest {
    fn new(name: &str, r: TestResult, n_a: usize, n_b: usize) -> Self {
        Self {
            name: name.to_string(),
            statistic: r.statistic,
            p_value: r.p_value,
            n_a,
            n_b,
        }
    }

    pub fn rejected(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenewalReport {
    pub uncensored_blocks: usize,
    pub censored_blocks: usize,
    pub discarded_trajectories: usize,
    pub tests: Vec<NamedTest>,
    /// Smallest `(X_{τ_{k+1}} − X_{τ_k})·l` over uncensored blocks, `k ≥ 1`.
    pub min_gap: f64,
}

impl RenewalReport {
    pub fn test(&self, name: &str) -> Option<&NamedTest> {
        self.tests.iter().find(|t| t.name == name)
    }

    pub fn any_rejected(&self, alpha: f64) -> bool {
        self.tests.iter().any(|t| t.rejected(alpha))
    }
}

/// Minimum uncensored blocks (k ≥ 1) before renewal tests run.
pub const MIN_RENEWAL_BLOCKS: usize = 200;

/// Independence and identical-distribution checks on renewal blocks.
pub fn renewal_tests(
    scans: &[RegenScan],
    l: &Vector,
    permutations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RenewalReport> {
    let live: Vec<&RegenScan> = scans.iter().filter(|s| !s.failed).collect();
    let blocks: Vec<&RegenerationRecord> = live
        .iter()
        .flat_map(|s| s.uncensored())
        .filter(|r| r.k >= 1)
        .collect();
    if blocks.len() < MIN_RENEWAL_BLOCKS {
        return Err(Error::InsufficientData(format!(
            "{} uncensored blocks with k >= 1, need {MIN_RENEWAL_BLOCKS}",
            blocks.len()
        )));
    }
    let of_index = |k: usize| -> Vec<&RegenerationRecord> { blocks.iter().copied().filter(|r| r.k == k).collect() };
    let duration = |r: &RegenerationRecord| r.block_duration.unwrap() as f64;
    let advance = |r: &RegenerationRecord| r.block_increment.unwrap().dot(l);
    let first = of_index(1);
    let second = of_index(2);
    let mut tests = Vec::new();
    if first.len() >= 2 && second.len() >= 2 {
        let (d1, d2): (Vec<f64>, Vec<f64>) = (first.iter().map(|r| duration(r)).collect(), second.iter().map(|r| duration(r)).collect());
        tests.push(NamedTest::new("duration_k1_vs_k2", ks_two_sample(&d1, &d2), d1.len(), d2.len()));
        let (a1, a2): (Vec<f64>, Vec<f64>) = (first.iter().map(|r| advance(r)).collect(), second.iter().map(|r| advance(r)).collect());
        tests.push(NamedTest::new("advance_k1_vs_k2", ks_two_sample(&a1, &a2), a1.len(), a2.len()));
    }
    // One (k = 1, k = 2) pair per trajectory: overlapping windows would make
    // the pairs dependent, and later pairs are the most horizon-selected.
    let mut pairs = Vec::new();
    for s in &live {
        let mut own = s.uncensored().filter(|r| r.k == 1 || r.k == 2);
        if let (Some(a), Some(b)) = (own.next(), own.next()) {
            pairs.push((duration(a), duration(b)));
        }
    }
    if pairs.len() >= 3 {
        let r = correlation_permutation_test(&pairs, permutations, rng);
        tests.push(NamedTest::new("lag1_duration_correlation", r, pairs.len(), pairs.len()));
    }
    // Z₀ under D = ∞ should match the later blocks.
    let zero: Vec<&RegenerationRecord> = live
        .iter()
        .filter(|s| s.start_no_backtrack)
        .filter_map(|s| s.records.first())
        .filter(|r| !r.censored)
        .collect();
    if zero.len() >= 2 {
        let later: Vec<f64> = blocks.iter().map(|r| duration(r)).collect();
        let z0: Vec<f64> = zero.iter().map(|r| duration(r)).collect();
        tests.push(NamedTest::new("z0_no_backtrack_vs_blocks_duration", ks_two_sample(&z0, &later), z0.len(), later.len()));
        let later: Vec<f64> = blocks.iter().map(|r| advance(r)).collect();
        let z0: Vec<f64> = zero.iter().map(|r| advance(r)).collect();
        tests.push(NamedTest::new("z0_no_backtrack_vs_blocks_advance", ks_two_sample(&z0, &later), z0.len(), later.len()));
    }
    let censored_blocks = live.iter().flat_map(|s| s.records.iter()).filter(|r| r.censored).count();
    let min_gap = blocks.iter().map(|r| advance(r)).fold(f64::INFINITY, f64::min);
    Ok(RenewalReport {
        uncensored_blocks: blocks.len(),
        censored_blocks,
        discarded_trajectories: scans.len() - live.len(),
        tests,
        min_gap,
    })
}

/// Synthetic scan assembled from block lengths and increments (for tests and calibration).
pub fn synthetic_scan(trajectory_index: u64, blocks: &[(u64, Vector)], start_no_backtrack: bool) -> RegenScan {
    let d = blocks.first().map_or(1, |b| b.1.dim());
    let mut x = Vector::zeros(d);
    let mut tau = 0;
    let mut records = Vec::new();
    for (k, (dur, inc)) in blocks.iter().enumerate() {
        records.push(RegenerationRecord {
            trajectory_index,
            env_index: trajectory_index,
            k,
            tau,
            x_tau: x,
            block_increment: Some(*inc),
            block_duration: Some(*dur),
            sup_displacement: inc.norm(),
            censored: false,
        });
        x += *inc;
        tau += dur;
    }
    RegenScan {
        trajectory_index,
        env_index: trajectory_index,
        horizon: tau,
        records,
        candidates: Vec::new(),
        start_no_backtrack,
        start_backtrack: (!start_no_backtrack).then_some(1.0),
        failed: false,
        bridge_rejects: 0,
        events: Vec::new(),
        end: x,
    }
}

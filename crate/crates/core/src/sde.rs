//! Euler–Maruyama simulation of the quenched diffusion
//! `dX = σ(X, ω) dB + b(X, ω) dt` together with exit times and the
//! path functionals used by the regeneration construction.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{EnvProbe, Environment, EnvironmentSpec};
use crate::error::{FieldError, Result};
use crate::rng::{StreamId, StreamTag};
use crate::stats::MeanAccumulator;
use crate::vector::Vector;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCorrection {
    None,
    BridgeTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub step: f64,
    pub boundary_correction: BoundaryCorrection,
    pub max_time: f64,
    /// Drops the Brownian increment; only used for degenerate checks.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub noise_free: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            step: 0.01,
            boundary_correction: BoundaryCorrection::BridgeTest,
            max_time: 1000.0,
            noise_free: false,
        }
    }
}

impl IntegratorConfig {
    pub fn new(step: f64, boundary_correction: BoundaryCorrection, max_time: f64) -> Self {
        Self {
            step,
            boundary_correction,
            max_time,
            noise_free: false,
        }
    }

    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = Vec::new();
        if !(self.step.is_finite() && self.step > 0.0) {
            errors.push(FieldError::new("integrator.step", "must be > 0"));
            return errors;
        }
        if self.step > 0.1 {
            errors.push(FieldError::new("integrator.step", "must be <= 0.1"));
        }
        let inv = 1.0 / self.step;
        if (inv - inv.round()).abs() > 1e-9 * inv {
            errors.push(FieldError::new(
                "integrator.step",
                format!("1/step = {inv} is not an integer"),
            ));
        }
        if !(self.max_time.is_finite() && self.max_time > 0.0) {
            errors.push(FieldError::new("integrator.max_time", "must be > 0"));
        }
        errors
    }

    pub fn validated(self) -> Result<Self> {
        let errors = self.validate();
        if errors.is_empty() {
            Ok(self)
        } else {
            Err(Error::Validation(errors))
        }
    }

    /// Number of grid steps per unit of time.
    pub fn steps_per_unit(&self) -> u64 {
        (1.0 / self.step).round() as u64
    }

    /// Grid step exactly equal to `1 / steps_per_unit()`.
    pub fn grid_step(&self) -> f64 {
        1.0 / self.steps_per_unit() as f64
    }

    pub fn steps_for(&self, duration: f64) -> u64 {
        (duration * self.steps_per_unit() as f64).round() as u64
    }

    pub fn bridge(&self) -> bool {
        self.boundary_correction == BoundaryCorrection::BridgeTest
    }
}

/// Euler–Maruyama update with an explicit Gaussian vector `xi`.
#[inline]
pub fn euler_update(x: &Vector, drift: &Vector, scale: f64, h: f64, xi: &Vector) -> Vector {
    *x + *drift * h + *xi * (scale * h.sqrt())
}

/// Draws a standard Gaussian vector.
#[inline]
pub fn gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vector {
    let mut v = Vector::zeros(dim);
    for i in 0..dim {
        v[i] = StandardNormal.sample(rng);
    }
    v
}

/// Steps one quenched path through its environment.
pub struct Stepper<'a> {
    probe: EnvProbe<'a>,
    noise: ChaCha8Rng,
    h: f64,
    sqrt_h: f64,
    noise_free: bool,
}

impl<'a> Stepper<'a> {
    pub fn new(env: &'a Environment, cfg: &IntegratorConfig, noise: ChaCha8Rng) -> Self {
        let h = cfg.grid_step();
        Self {
            probe: env.probe(),
            noise,
            h,
            sqrt_h: h.sqrt(),
            noise_free: cfg.noise_free,
        }
    }

    /// Stepper drawing from the path substream of `stream`.
    pub fn for_stream(env: &'a Environment, cfg: &IntegratorConfig, stream: StreamId) -> Self {
        Self::new(env, cfg, stream.rng(StreamTag::Path))
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    pub fn dim(&self) -> usize {
        self.probe.env().dim()
    }

    pub fn probe(&mut self) -> &mut EnvProbe<'a> {
        &mut self.probe
    }

    /// One Euler–Maruyama step from `x`; returns the new position and `s(x)`.
    #[inline]
    pub fn step(&mut self, x: &Vector) -> (Vector, f64) {
        let (b, s) = self.probe.coefficients(x);
        if self.noise_free {
            return (*x + b * self.h, s);
        }
        let mut next = *x + b * self.h;
        let amp = s * self.sqrt_h;
        for i in 0..x.dim() {
            let z: f64 = StandardNormal.sample(&mut self.noise);
            next[i] += amp * z;
        }
        (next, s)
    }

    /// Step with a caller-supplied Gaussian vector.
    pub fn step_with_noise(&mut self, x: &Vector, xi: &Vector) -> Vector {
        let (b, s) = self.probe.coefficients(x);
        euler_update(x, &b, s, self.h, xi)
    }

    pub fn noise_rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.noise
    }
}

/// Open regions whose exit (or entrance into the complement) is monitored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    /// `{x : x·normal < level}`. Leaving it is the entrance time into
    /// `{x·normal ≥ level}`.
    HalfSpace { normal: Vector, level: f64 },
    /// `{x : lower < x·l < upper}`. Face 0 is the lower wall, face 1 the upper.
    Slab { l: Vector, lower: f64, upper: f64 },
    Ball { center: Vector, radius: f64 },
    /// Axis-aligned box. Face `2i` is `x_i = lo_i`, face `2i + 1` is `x_i = hi_i`.
    Box { lo: Vector, hi: Vector },
}

impl Region {
    /// Entrance time `inf{t : X_t·l ≥ u}`.
    pub fn entrance_above(l: Vector, u: f64) -> Self {
        Region::HalfSpace { normal: l, level: u }
    }

    /// Entrance time `inf{t : X_t·l ≤ u}`.
    pub fn entrance_below(l: Vector, u: f64) -> Self {
        Region::HalfSpace {
            normal: -l,
            level: -u,
        }
    }

    /// The slab `{−bL < x·l < L}`.
    pub fn slab(l: Vector, depth_ratio: f64, width: f64) -> Self {
        Region::Slab {
            l,
            lower: -depth_ratio * width,
            upper: width,
        }
    }

    #[inline]
    pub fn contains(&self, x: &Vector) -> bool {
        match self {
            Region::HalfSpace { normal, level } => x.dot(normal) < *level,
            Region::Slab { l, lower, upper } => {
                let p = x.dot(l);
                *lower < p && p < *upper
            }
            Region::Ball { center, radius } => x.distance(center) < *radius,
            Region::Box { lo, hi } => (0..x.dim()).all(|i| lo[i] < x[i] && x[i] < hi[i]),
        }
    }

    /// Planar faces as `(outward normal, level)`, region side `x·n < level`.
    fn face(&self, index: usize) -> Option<(Vector, f64)> {
        match self {
            Region::HalfSpace { normal, level } if index == 0 => Some((*normal, *level)),
            Region::Slab { l, lower, upper } => match index {
                0 => Some((-*l, -*lower)),
                1 => Some((*l, *upper)),
                _ => None,
            },
            Region::Box { lo, hi } => {
                let axis = index / 2;
                if axis >= lo.dim() {
                    return None;
                }
                let e = Vector::basis(lo.dim(), axis);
                if index % 2 == 0 {
                    Some((-e, -lo[axis]))
                } else {
                    Some((e, hi[axis]))
                }
            }
            _ => None,
        }
    }

    fn face_count(&self) -> usize {
        match self {
            Region::HalfSpace { .. } => 1,
            Region::Slab { .. } => 2,
            Region::Box { lo, .. } => 2 * lo.dim(),
            Region::Ball { .. } => 0,
        }
    }

    /// Face most violated by a point outside the region.
    fn violated_face(&self, x: &Vector) -> Option<usize> {
        let mut best = None;
        let mut worst = f64::NEG_INFINITY;
        for k in 0..self.face_count() {
            let (n, level) = self.face(k).unwrap();
            let excess = x.dot(&n) - level;
            if excess >= 0.0 && excess > worst {
                worst = excess;
                best = Some(k);
            }
        }
        best
    }

    /// Brownian-bridge crossing test for a step `from → to` with both ends
    /// inside. Draws one uniform per planar face.
    fn bridge_crossing(
        &self,
        from: &Vector,
        to: &Vector,
        variance: f64,
        uniform: &mut impl FnMut() -> f64,
    ) -> Option<usize> {
        for k in 0..self.face_count() {
            let (n, level) = self.face(k).unwrap();
            let d1 = level - from.dot(&n);
            let d2 = level - to.dot(&n);
            let p = (-2.0 * d1 * d2 / variance).exp();
            if uniform() < p {
                return Some(k);
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExitEvent {
    pub time: f64,
    pub position: Vector,
    /// Planar face through which the path left, when the region has faces.
    pub face: Option<usize>,
    /// Detected by the bridge test between two inside grid points.
    pub bridged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ExitOutcome {
    Exited(ExitEvent),
    /// Horizon reached first; censored, never dropped.
    Timeout { time: f64, position: Vector },
}

impl ExitOutcome {
    pub fn exit(&self) -> Option<&ExitEvent> {
        match self {
            ExitOutcome::Exited(e) => Some(e),
            ExitOutcome::Timeout { .. } => None,
        }
    }

    pub fn time(&self) -> f64 {
        match self {
            ExitOutcome::Exited(e) => e.time,
            ExitOutcome::Timeout { time, .. } => *time,
        }
    }

    pub fn position(&self) -> Vector {
        match self {
            ExitOutcome::Exited(e) => e.position,
            ExitOutcome::Timeout { position, .. } => *position,
        }
    }
}

/// Runs `stepper` from `x0` until it leaves `region` or `horizon` elapses.
///
/// `visit(time, x)` is called for every grid position inside the region
/// before the step leaving it, so `Σ h` over visits equals the exit time.
pub fn run_to_exit(
    stepper: &mut Stepper<'_>,
    x0: Vector,
    region: &Region,
    cfg: &IntegratorConfig,
    horizon: f64,
    crossing: &mut ChaCha8Rng,
    mut visit: impl FnMut(f64, &Vector),
) -> ExitOutcome {
    if !region.contains(&x0) {
        return ExitOutcome::Exited(ExitEvent {
            time: 0.0,
            position: x0,
            face: region.violated_face(&x0),
            bridged: false,
        });
    }
    let h = stepper.step_size();
    let max_steps = cfg.steps_for(horizon);
    let bridge = cfg.bridge() && region.face_count() > 0;
    let mut x = x0;
    for i in 0..max_steps {
        let t = i as f64 * h;
        visit(t, &x);
        let (next, s) = stepper.step(&x);
        let t_next = (i + 1) as f64 * h;
        if !region.contains(&next) {
            return ExitOutcome::Exited(ExitEvent {
                time: t_next,
                position: next,
                face: region.violated_face(&next),
                bridged: false,
            });
        }
        if bridge {
            let variance = s * s * h;
            if let Some(face) =
                region.bridge_crossing(&x, &next, variance, &mut || crossing.random::<f64>())
            {
                return ExitOutcome::Exited(ExitEvent {
                    time: t_next,
                    position: next,
                    face: Some(face),
                    bridged: true,
                });
            }
        }
        x = next;
    }
    ExitOutcome::Timeout {
        time: max_steps as f64 * h,
        position: x,
    }
}

/// First exit of the quenched path with substream `stream` from `region`.
pub fn first_exit(
    env: &Environment,
    x0: Vector,
    region: &Region,
    cfg: &IntegratorConfig,
    stream: StreamId,
) -> ExitOutcome {
    let mut stepper = Stepper::for_stream(env, cfg, stream);
    let mut crossing = stream.rng(StreamTag::Crossing);
    run_to_exit(&mut stepper, x0, region, cfg, cfg.max_time, &mut crossing, |_, _| {})
}

/// A discretely sampled path on the grid `t_i = i h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub start: Vector,
    pub step: f64,
    pub positions: Vec<Vector>,
    pub stream: StreamId,
    /// Per-step uniforms and diffusion scales for bridge crossing tests.
    pub crossing: Option<CrossingData>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossingData {
    pub uniforms: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Trajectory {
    /// Builds a trajectory from explicit grid positions (no crossing data).
    pub fn from_positions(positions: Vec<Vector>, step: f64) -> Self {
        Self {
            start: positions[0],
            step,
            positions,
            stream: StreamId::new(0, 0, 0),
            crossing: None,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.step
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.positions.len()).map(|i| self.time(i))
    }

    pub fn duration(&self) -> f64 {
        self.time(self.positions.len().saturating_sub(1))
    }

    pub fn end(&self) -> Vector {
        *self.positions.last().unwrap()
    }
}

/// Simulates `duration` time units of the quenched path.
pub fn simulate_trajectory(
    env: &Environment,
    x0: Vector,
    cfg: &IntegratorConfig,
    stream: StreamId,
    duration: f64,
) -> Trajectory {
    let mut stepper = Stepper::for_stream(env, cfg, stream);
    let steps = cfg.steps_for(duration) as usize;
    let mut positions = Vec::with_capacity(steps + 1);
    positions.push(x0);
    let mut crossing = cfg.bridge().then(|| CrossingData {
        uniforms: Vec::with_capacity(steps),
        scales: Vec::with_capacity(steps),
    });
    let mut crng = stream.rng(StreamTag::Crossing);
    let mut x = x0;
    for _ in 0..steps {
        let (next, s) = stepper.step(&x);
        if let Some(c) = crossing.as_mut() {
            c.uniforms.push(crng.random());
            c.scales.push(s);
        }
        positions.push(next);
        x = next;
    }
    Trajectory {
        start: x0,
        step: cfg.grid_step(),
        positions,
        stream,
        crossing,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathFunctionals {
    /// `M(t_i) = max_{j ≤ i} X_{t_j}·l`.
    pub running_max: Vec<f64>,
    /// `J`: first time with `(X_t − X_0)·l ≤ −R`; `None` within the horizon.
    pub backtrack: Option<f64>,
    /// `D = ⌈J⌉`.
    pub backtrack_ceiling: Option<u64>,
    /// First exit from each registered region, `None` when not reached.
    pub exits: Vec<Option<ExitEvent>>,
}

/// Running maximum, backtrack time and region exits along a recorded path.
pub fn path_functionals(
    traj: &Trajectory,
    l: &Vector,
    backtrack_distance: f64,
    regions: &[Region],
) -> PathFunctionals {
    assert!(!traj.is_empty(), "empty trajectory");
    let h = traj.step;
    let x0l = traj.start.dot(l);
    let threshold = x0l - backtrack_distance;
    let mut running_max = Vec::with_capacity(traj.len());
    let mut m = f64::NEG_INFINITY;
    for x in &traj.positions {
        m = m.max(x.dot(l));
        running_max.push(m);
    }
    let mut backtrack = None;
    for (i, x) in traj.positions.iter().enumerate() {
        let p = x.dot(l);
        if p <= threshold {
            backtrack = Some(traj.time(i));
            break;
        }
        if let (Some(c), Some(next)) = (&traj.crossing, traj.positions.get(i + 1)) {
            let q = next.dot(l);
            if q > threshold {
                let var = c.scales[i] * c.scales[i] * h;
                let prob = (-2.0 * (p - threshold) * (q - threshold) / var).exp();
                if c.uniforms[i] < prob {
                    backtrack = Some(traj.time(i + 1));
                    break;
                }
            }
        }
    }
    let exits = regions
        .iter()
        .map(|region| recorded_exit(traj, region))
        .collect();
    PathFunctionals {
        running_max,
        backtrack,
        backtrack_ceiling: backtrack.map(ceil_time),
        exits,
    }
}

/// `⌈t⌉` robust to round-off on grid times.
pub fn ceil_time(t: f64) -> u64 {
    let r = t.round();
    if (t - r).abs() < 1e-9 {
        r as u64
    } else {
        t.ceil() as u64
    }
}

fn recorded_exit(traj: &Trajectory, region: &Region) -> Option<ExitEvent> {
    let h = traj.step;
    if !region.contains(&traj.positions[0]) {
        return Some(ExitEvent {
            time: 0.0,
            position: traj.positions[0],
            face: region.violated_face(&traj.positions[0]),
            bridged: false,
        });
    }
    for i in 1..traj.len() {
        let next = &traj.positions[i];
        if !region.contains(next) {
            return Some(ExitEvent {
                time: traj.time(i),
                position: *next,
                face: region.violated_face(next),
                bridged: false,
            });
        }
        if let Some(c) = &traj.crossing {
            let var = c.scales[i - 1] * c.scales[i - 1] * h;
            let mut u = Some(c.uniforms[i - 1]);
            let mut draw = || u.take().unwrap_or(1.0);
            if let Some(face) = region.bridge_crossing(&traj.positions[i - 1], next, var, &mut draw) {
                return Some(ExitEvent {
                    time: traj.time(i),
                    position: *next,
                    face: Some(face),
                    bridged: true,
                });
            }
        }
    }
    None
}

/// One row of the sup-displacement tail table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DisplacementTailRow {
    pub scale: f64,
    pub horizon: f64,
    pub n: u64,
    pub exceed: u64,
    pub estimate: f64,
    pub standard_error: f64,
    /// `2d exp(−(L² − α b̄ L)² / (2 d ν α L))`, or 1 when `L² ≤ α b̄ L`.
    pub bernstein_bound: f64,
}

/// Annealed estimates of `P[sup_{s ≤ αL} |X_s − X_0| ≥ L²]` over a ladder of `L`.
pub fn displacement_tail(
    spec: &Arc<EnvironmentSpec>,
    cfg: &IntegratorConfig,
    alpha: f64,
    ladder: &[f64],
    n: u64,
) -> Result<Vec<DisplacementTailRow>> {
    if ladder.is_empty() {
        return Err(Error::invalid("ladder", "must be nonempty"));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid("alpha", "must be > 0"));
    }
    let d = spec.dimension as f64;
    let origin = Vector::zeros(spec.dimension);
    let mut rows = Vec::with_capacity(ladder.len());
    for (rung, &scale) in ladder.iter().enumerate() {
        let horizon = alpha * scale;
        let region = Region::Ball {
            center: origin,
            radius: scale * scale,
        };
        let mut exceed = 0u64;
        for k in 0..n {
            let env = Environment::new(spec.clone(), k);
            let stream = StreamId::new(spec.master_seed, k, (rung as u64) << 40 | k);
            let mut stepper = Stepper::for_stream(&env, cfg, stream);
            let mut crossing = stream.rng(StreamTag::Crossing);
            let out = run_to_exit(&mut stepper, origin, &region, cfg, horizon, &mut crossing, |_, _| {});
            if out.exit().is_some() {
                exceed += 1;
            }
        }
        let p = exceed as f64 / n as f64;
        let gap = scale * scale - alpha * spec.drift_bound * scale;
        let bound = if gap <= 0.0 {
            1.0
        } else {
            (2.0 * d * (-(gap * gap) / (2.0 * d * spec.ellipticity_nu * alpha * scale)).exp()).min(1.0)
        };
        rows.push(DisplacementTailRow {
            scale,
            horizon,
            n,
            exceed,
            estimate: p,
            standard_error: (p * (1.0 - p) / n as f64).sqrt(),
            bernstein_bound: bound,
        });
    }
    Ok(rows)
}

/// Line-delimited record describing one event on one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEvent {
    pub trajectory_index: u64,
    pub env_index: u64,
    pub event: String,
    pub time: f64,
    pub position: Vec<f64>,
}

/// Mean and covariance of the increments of `steps` Euler steps from `x`.
pub fn increment_moments(
    env: &Environment,
    cfg: &IntegratorConfig,
    stream: StreamId,
    x: Vector,
    steps: usize,
) -> (Vec<MeanAccumulator>, Vec<Vec<f64>>) {
    let mut stepper = Stepper::for_stream(env, cfg, stream);
    let d = env.dim();
    let mut acc = vec![MeanAccumulator::default(); d];
    let mut incs = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (next, _) = stepper.step(&x);
        let dx = next - x;
        for i in 0..d {
            acc[i].push(dx[i]);
        }
        incs.push(dx);
    }
    (acc, crate::stats::covariance(&incs))
}

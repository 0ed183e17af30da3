//! Occupation-time Green functions, the auxiliary (Kalikow) drift, the
//! condition on it and the exit-law identity of the auxiliary diffusion.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ballistic::{fit_condition_t, slab_ladder, ConditionTFit};
use crate::env::{sign_split_moments, Environment, EnvironmentSpec, SignSplit};
use crate::error::{require_unit, Result};
use crate::rng::{StreamId, StreamTag};
use crate::sde::{gaussian, run_to_exit, ExitOutcome, IntegratorConfig, Region, Stepper};
use crate::stats::{chi_square_uniform, energy_distance_test, TestResult};
use crate::vector::{Vector, MAX_DIM};
use crate::Error;

/// Width (in units of `R`) of the margin where the condition is checked.
pub const MARGIN_RANGES: f64 = 5.0;

/// Bounded domain containing the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Ball { center: Vector, radius: f64 },
    Box { lo: Vector, hi: Vector },
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Domain::Ball { center, .. } => center.dim(),
            Domain::Box { lo, .. } => lo.dim(),
        }
    }

    pub fn region(&self) -> Region {
        match self {
            Domain::Ball { center, radius } => Region::Ball {
                center: *center,
                radius: *radius,
            },
            Domain::Box { lo, hi } => Region::Box { lo: *lo, hi: *hi },
        }
    }

    pub fn contains(&self, x: &Vector) -> bool {
        self.region().contains(x)
    }

    /// Distance to the boundary; negative outside.
    pub fn boundary_distance(&self, x: &Vector) -> f64 {
        match self {
            Domain::Ball { center, radius } => radius - x.distance(center),
            Domain::Box { lo, hi } => (0..x.dim())
                .map(|i| (x[i] - lo[i]).min(hi[i] - x[i]))
                .fold(f64::INFINITY, f64::min),
        }
    }

    fn bounds(&self) -> (Vector, Vector) {
        match self {
            Domain::Ball { center, radius } => {
                let r = Vector::from_slice(&vec![*radius; center.dim()]);
                (*center - r, *center + r)
            }
            Domain::Box { lo, hi } => (*lo, *hi),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if !self.contains(&Vector::zeros(d)) {
            return Err(Error::invalid("domain", "the origin must be interior"));
        }
        Ok(())
    }
}

/// Balls and boxes of radius / half-side `s·R` for each scale `s`, centred
/// at `(s − 6)R·l` so that the origin sits `6R` from the back wall.
pub fn domain_family(l: &Vector, range: f64, scales: &[f64]) -> Vec<(String, Domain)> {
    let mut out = Vec::new();
    for &s in scales {
        let center = *l * ((s - 6.0) * range);
        let half = s * range;
        out.push((
            format!("ball_{s}R"),
            Domain::Ball {
                center,
                radius: half,
            },
        ));
        if l.dim() > 1 {
            let h = Vector::from_slice(&vec![half; l.dim()]);
            out.push((
                format!("box_{s}R"),
                Domain::Box {
                    lo: center - h,
                    hi: center + h,
                },
            ));
        }
    }
    out
}

/// Cubic grid with one cell centred at the origin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainGrid {
    pub domain: Domain,
    pub cell: f64,
    lo_index: [i64; MAX_DIM],
    shape: [usize; MAX_DIM],
    dim: usize,
}

/// Largest grid the estimators accept.
pub const MAX_CELLS: usize = 4_000_000;

impl DomainGrid {
    pub fn new(domain: Domain, cell: f64) -> Result<Self> {
        domain.validate()?;
        if !(cell > 0.0) {
            return Err(Error::invalid("cell", "must be > 0"));
        }
        let d = domain.dim();
        let (lo, hi) = domain.bounds();
        let mut lo_index = [0i64; MAX_DIM];
        let mut shape = [1usize; MAX_DIM];
        for i in 0..d {
            let a = (lo[i] / cell).round() as i64;
            let b = (hi[i] / cell).round() as i64;
            lo_index[i] = a;
            shape[i] = (b - a + 1) as usize;
        }
        let total: usize = shape[..d].iter().product();
        if total > MAX_CELLS {
            return Err(Error::invalid("cell", format!("grid would have {total} cells")));
        }
        Ok(Self {
            domain,
            cell,
            lo_index,
            shape,
            dim: d,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.shape[..self.dim].iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell.powi(self.dim as i32)
    }

    fn multi_index(&self, mut idx: usize) -> [usize; MAX_DIM] {
        let mut out = [0usize; MAX_DIM];
        for i in (0..self.dim).rev() {
            out[i] = idx % self.shape[i];
            idx /= self.shape[i];
        }
        out
    }

    fn flat(&self, m: &[usize; MAX_DIM]) -> usize {
        let mut idx = 0;
        for i in 0..self.dim {
            idx = idx * self.shape[i] + m[i];
        }
        idx
    }

    pub fn center(&self, idx: usize) -> Vector {
        let m = self.multi_index(idx);
        let mut c = Vector::zeros(self.dim);
        for i in 0..self.dim {
            c[i] = (self.lo_index[i] + m[i] as i64) as f64 * self.cell;
        }
        c
    }

    /// Cell whose centre is nearest to `x`, if on the grid.
    pub fn cell_of(&self, x: &Vector) -> Option<usize> {
        let mut m = [0usize; MAX_DIM];
        for i in 0..self.dim {
            let k = (x[i] / self.cell).round() as i64 - self.lo_index[i];
            if k < 0 || k >= self.shape[i] as i64 {
                return None;
            }
            m[i] = k as usize;
        }
        Some(self.flat(&m))
    }

    pub fn origin(&self) -> usize {
        self.cell_of(&Vector::zeros(self.dim)).expect("origin lies on the grid")
    }

    fn neighbors(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let m = self.multi_index(idx);
        (0..self.dim).flat_map(move |i| {
            let mut out = [None, None];
            if m[i] > 0 {
                let mut a = m;
                a[i] -= 1;
                out[0] = Some(self.flat(&a));
            }
            if m[i] + 1 < self.shape[i] {
                let mut a = m;
                a[i] += 1;
                out[1] = Some(self.flat(&a));
            }
            out.into_iter().flatten()
        })
    }

    /// Cells at distance more than `5R` from the boundary.
    pub fn margin(&self, range: f64) -> Vec<bool> {
        (0..self.len())
            .map(|c| self.domain.boundary_distance(&self.center(c)) > MARGIN_RANGES * range)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreenEstimate {
    pub grid: DomainGrid,
    pub n_env: usize,
    pub n_traj: usize,
    pub env_indices: Vec<u64>,
    /// `ĝ_ω(cell)` per environment as sorted `(cell, density)` pairs over
    /// the visited cells.
    pub per_env: Vec<Vec<(usize, f64)>>,
    pub mean: Vec<f64>,
    /// Across environments, or across trajectories when `n_env = 1`.
    pub se: Vec<f64>,
    pub mean_exit_time: f64,
    pub exit_time_se: f64,
    pub censored: u64,
    /// Some path reached the horizon, so Green mass is missing.
    pub flagged: bool,
}

impl GreenEstimate {
    /// `Σ ĝ Δ^d`, equal to the mean exit time by construction.
    pub fn total_mass(&self) -> f64 {
        self.mean.iter().sum::<f64>() * self.grid.cell_volume()
    }
}

struct EnvOccupation {
    density: Vec<(usize, f64)>,
    /// Dense per-cell mean of the squared per-path density (single environment only).
    second_moment: Vec<f64>,
    exit_times: Vec<f64>,
    censored: u64,
}

/// Occupation of `n_traj` quenched paths from 0 in environment `env_index`.
fn occupation(
    spec: &Arc<EnvironmentSpec>,
    grid: &DomainGrid,
    integrator: &IntegratorConfig,
    env_index: u64,
    n_traj: usize,
    track_second_moment: bool,
) -> EnvOccupation {
    let env = Environment::new(spec.clone(), env_index);
    let region = grid.domain.region();
    let origin = Vector::zeros(grid.dim());
    let h = integrator.grid_step();
    let mut total = vec![0.0; grid.len()];
    let mut visited: Vec<usize> = Vec::new();
    let mut second = if track_second_moment { vec![0.0; grid.len()] } else { Vec::new() };
    let mut own = if track_second_moment { vec![0.0; grid.len()] } else { Vec::new() };
    let mut touched: Vec<usize> = Vec::new();
    let mut exit_times = Vec::with_capacity(n_traj);
    let mut censored = 0;
    for j in 0..n_traj {
        let stream = StreamId::new(spec.master_seed, env_index, j as u64);
        let mut stepper = Stepper::for_stream(&env, integrator, stream);
        let mut crossing = stream.rng(StreamTag::Crossing);
        let out = run_to_exit(&mut stepper, origin, &region, integrator, integrator.max_time, &mut crossing, |_, x| {
            if let Some(c) = grid.cell_of(x) {
                if total[c] == 0.0 {
                    visited.push(c);
                }
                total[c] += h;
                if track_second_moment {
                    if own[c] == 0.0 {
                        touched.push(c);
                    }
                    own[c] += h;
                }
            }
        });
        if track_second_moment {
            for &c in &touched {
                second[c] += own[c] * own[c];
                own[c] = 0.0;
            }
            touched.clear();
        }
        match out {
            ExitOutcome::Exited(e) => exit_times.push(e.time),
            ExitOutcome::Timeout { time, .. } => {
                censored += 1;
                exit_times.push(time);
            }
        }
    }
    let vol = grid.cell_volume();
    let n = n_traj as f64;
    visited.sort_unstable();
    EnvOccupation {
        density: visited.into_iter().map(|c| (c, total[c] / n / vol)).collect(),
        second_moment: second.iter().map(|s| s / n / (vol * vol)).collect(),
        exit_times,
        censored,
    }
}

/// Environment indices used by Green estimates start here.
pub const GREEN_ENV_OFFSET: u64 = 1 << 41;

/// Occupation-time estimate of `g_U(0, ·, ω)` over `n_env` environments.
pub fn estimate_green(
    spec: &Arc<EnvironmentSpec>,
    grid: &DomainGrid,
    integrator: &IntegratorConfig,
    n_env: usize,
    n_traj: usize,
) -> Result<GreenEstimate> {
    if n_env == 0 || n_traj == 0 {
        return Err(Error::invalid("n_env", "need at least one environment and trajectory"));
    }
    if grid.dim() != spec.dimension {
        return Err(Error::invalid("domain", "dimension differs from the environment"));
    }
    let single = n_env == 1;
    if single && n_traj < 2 {
        return Err(Error::invalid("n_traj", "a single environment needs at least 2 trajectories"));
    }
    let env_indices: Vec<u64> = (0..n_env as u64).map(|e| GREEN_ENV_OFFSET + e).collect();
    let runs: Vec<EnvOccupation> = env_indices
        .par_iter()
        .map(|&e| occupation(spec, grid, integrator, e, n_traj, single))
        .collect();
    let cells = grid.len();
    let ne = n_env as f64;
    // Sequential sums in environment order keep results independent of the thread count.
    let mut sum = vec![0.0; cells];
    let mut sum_sq = vec![0.0; cells];
    for r in &runs {
        for &(c, g) in &r.density {
            sum[c] += g;
            sum_sq[c] += g * g;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / ne).collect();
    let se: Vec<f64> = if single {
        let nt = n_traj as f64;
        (0..cells)
            .map(|c| {
                let var = (runs[0].second_moment[c] - mean[c] * mean[c]).max(0.0) * nt / (nt - 1.0);
                (var / nt).sqrt()
            })
            .collect()
    } else {
        (0..cells)
            .map(|c| {
                let var = ((sum_sq[c] - ne * mean[c] * mean[c]) / (ne - 1.0)).max(0.0);
                (var / ne).sqrt()
            })
            .collect()
    };
    let acc: crate::stats::MeanAccumulator = runs.iter().flat_map(|r| r.exit_times.iter().copied()).collect();
    let censored = runs.iter().map(|r| r.censored).sum();
    Ok(GreenEstimate {
        grid: grid.clone(),
        n_env,
        n_traj,
        env_indices,
        per_env: runs.into_iter().map(|r| r.density).collect(),
        mean,
        se,
        mean_exit_time: acc.mean(),
        exit_time_se: acc.standard_error(),
        censored,
        flagged: censored > 0,
    })
}

/// Green weights and drifts at one margin cell, for the environments
/// that visited it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginSample {
    pub cell: usize,
    /// Positions in `GreenEstimate::env_indices`.
    pub envs: Vec<usize>,
    pub weights: Vec<f64>,
    pub drifts: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuxiliaryDriftField {
    pub grid: DomainGrid,
    pub range: f64,
    /// `b′_U` per cell; zero at the origin cell and on cells never visited.
    pub drift: Vec<Vector>,
    pub reliable: Vec<bool>,
    pub margin: Vec<bool>,
    pub origin: usize,
    /// Drift used by the auxiliary diffusion: unreliable cells (and the
    /// origin) take the value of the nearest reliable cell.
    pub filled: Vec<Vector>,
    /// Environments behind the estimate; 0 for injected fields.
    pub n_env: usize,
    pub margin_samples: Vec<MarginSample>,
}

/// Reliability floor: a cell is masked when its SE exceeds this fraction of its mean.
pub const RELIABILITY_RATIO: f64 = 0.5;

impl AuxiliaryDriftField {
    /// Field from explicit per-cell values.
    pub fn from_values(grid: DomainGrid, range: f64, drift: Vec<Vector>, reliable: Vec<bool>) -> Result<Self> {
        if drift.len() != grid.len() || reliable.len() != grid.len() {
            return Err(Error::invalid("drift", "one value per cell required"));
        }
        let origin = grid.origin();
        let mut reliable = reliable;
        reliable[origin] = false;
        let mut drift = drift;
        drift[origin] = Vector::zeros(grid.dim());
        let filled = fill_nearest(&grid, &drift, &reliable)?;
        let margin = grid.margin(range);
        Ok(Self {
            grid,
            range,
            drift,
            reliable,
            margin,
            origin,
            filled,
            n_env: 0,
            margin_samples: Vec::new(),
        })
    }

    /// Margin cells other than the origin.
    pub fn margin_cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.grid.len()).filter(move |&c| self.margin[c] && c != self.origin)
    }

    /// `inf b′_U·l` over reliable margin cells.
    pub fn epsilon_hat(&self, l: &Vector) -> Option<f64> {
        self.margin_cells()
            .filter(|&c| self.reliable[c])
            .map(|c| self.drift[c].dot(l))
            .reduce(f64::min)
    }

    /// Multilinear interpolation of the filled field, clamped to the grid.
    pub fn interpolate(&self, x: &Vector) -> Vector {
        let g = &self.grid;
        let d = g.dim;
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0f64; MAX_DIM];
        for i in 0..d {
            let u = x[i] / g.cell - g.lo_index[i] as f64;
            let max = (g.shape[i] - 1) as f64;
            let u = u.clamp(0.0, max);
            let k = (u.floor() as usize).min(g.shape[i].saturating_sub(2));
            base[i] = k;
            frac[i] = if g.shape[i] == 1 { 0.0 } else { u - k as f64 };
        }
        let mut out = Vector::zeros(d);
        for corner in 0..(1usize << d) {
            let mut m = base;
            let mut w = 1.0;
            for i in 0..d {
                let up = (corner >> i) & 1 == 1;
                if up {
                    if g.shape[i] == 1 {
                        w = 0.0;
                        break;
                    }
                    m[i] += 1;
                    w *= frac[i];
                } else {
                    w *= 1.0 - frac[i];
                }
            }
            if w != 0.0 {
                out += self.filled[g.flat(&m)] * w;
            }
        }
        out
    }
}

/// Replaces unreliable cells by the value of the nearest reliable cell (BFS order).
fn fill_nearest(grid: &DomainGrid, drift: &[Vector], reliable: &[bool]) -> Result<Vec<Vector>> {
    let mut filled = drift.to_vec();
    let mut seen = reliable.to_vec();
    let mut queue: VecDeque<usize> = (0..grid.len()).filter(|&c| reliable[c]).collect();
    if queue.is_empty() {
        return Err(Error::InsufficientData("no reliable cells in the drift field".into()));
    }
    while let Some(c) = queue.pop_front() {
        let value = filled[c];
        for nb in grid.neighbors(c).collect::<Vec<_>>() {
            if !seen[nb] {
                seen[nb] = true;
                filled[nb] = value;
                queue.push_back(nb);
            }
        }
    }
    Ok(filled)
}

/// `b′_U(x) = E[ĝ(x) b(x, ω)] / E[ĝ(x)]` per cell.
pub fn auxiliary_drift(spec: &Arc<EnvironmentSpec>, green: &GreenEstimate) -> Result<AuxiliaryDriftField> {
    let grid = &green.grid;
    let d = grid.dim();
    let cells = grid.len();
    let margin = grid.margin(spec.range);
    let drifts: Vec<Vec<Vector>> = green
        .env_indices
        .par_iter()
        .zip(&green.per_env)
        .map(|(&e, occ)| {
            let env = Environment::new(spec.clone(), e);
            let mut probe = env.probe();
            occ.iter().map(|&(c, _)| probe.drift(&grid.center(c))).collect()
        })
        .collect();
    let mut num = vec![Vector::zeros(d); cells];
    let mut den = vec![0.0; cells];
    let mut samples: Vec<Option<MarginSample>> = vec![None; cells];
    for (pos, (occ, bs)) in green.per_env.iter().zip(&drifts).enumerate() {
        for (&(c, w), &b) in occ.iter().zip(bs) {
            num[c] += b * w;
            den[c] += w;
            if margin[c] {
                let s = samples[c].get_or_insert_with(|| MarginSample {
                    cell: c,
                    envs: Vec::new(),
                    weights: Vec::new(),
                    drifts: Vec::new(),
                });
                s.envs.push(pos);
                s.weights.push(w);
                s.drifts.push(b);
            }
        }
    }
    let drift: Vec<Vector> = (0..cells)
        .map(|c| if den[c] > 0.0 { num[c] * (1.0 / den[c]) } else { Vector::zeros(d) })
        .collect();
    let reliable: Vec<bool> = (0..cells)
        .map(|c| green.mean[c] > 0.0 && green.se[c] <= RELIABILITY_RATIO * green.mean[c])
        .collect();
    let mut field = AuxiliaryDriftField::from_values(grid.clone(), spec.range, drift, reliable)?;
    field.n_env = green.n_env;
    field.margin_samples = samples.into_iter().flatten().collect();
    Ok(field)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KVerdict {
    Holds,
    Fails,
    /// Unreliable cells inside the margin.
    Inconclusive,
    /// Every margin is empty (`inf ∅ = +∞`).
    Vacuous,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainK {
    pub label: String,
    pub margin_cells: usize,
    pub unreliable_margin_cells: usize,
    pub epsilon_hat: Option<f64>,
    /// 5% bootstrap quantile of the margin infimum over environments.
    pub lower_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KReport {
    pub domains: Vec<DomainK>,
    pub epsilon_hat: Option<f64>,
    pub lower_bound: Option<f64>,
    pub verdict: KVerdict,
}

/// Condition (K) over a finite family of domains.
pub fn check_condition_k(
    fields: &[(String, AuxiliaryDriftField)],
    l: &Vector,
    bootstrap: usize,
    rng: &mut ChaCha8Rng,
) -> Result<KReport> {
    require_unit("l", l)?;
    let mut domains = Vec::new();
    for (label, field) in fields {
        let margin: Vec<usize> = field.margin_cells().collect();
        let unreliable = margin.iter().filter(|&&c| !field.reliable[c]).count();
        let epsilon_hat = field.epsilon_hat(l);
        let lower_bound = epsilon_hat.map(|eps| bootstrap_infimum(field, field.n_env, l, bootstrap, rng).unwrap_or(eps));
        domains.push(DomainK {
            label: label.clone(),
            margin_cells: margin.len(),
            unreliable_margin_cells: unreliable,
            epsilon_hat: if unreliable > 0 { None } else { epsilon_hat },
            lower_bound: if unreliable > 0 { None } else { lower_bound },
        });
    }
    let verdict = if domains.iter().any(|d| d.unreliable_margin_cells > 0) {
        KVerdict::Inconclusive
    } else if domains.iter().all(|d| d.margin_cells == 0) {
        KVerdict::Vacuous
    } else {
        let eps = domains.iter().filter_map(|d| d.epsilon_hat).fold(f64::INFINITY, f64::min);
        let lcb = domains.iter().filter_map(|d| d.lower_bound).fold(f64::INFINITY, f64::min);
        if eps > 0.0 && lcb > 0.0 {
            KVerdict::Holds
        } else {
            KVerdict::Fails
        }
    };
    let finite = |v: f64| v.is_finite().then_some(v);
    Ok(KReport {
        epsilon_hat: finite(domains.iter().filter_map(|d| d.epsilon_hat).fold(f64::INFINITY, f64::min)),
        lower_bound: finite(domains.iter().filter_map(|d| d.lower_bound).fold(f64::INFINITY, f64::min)),
        domains,
        verdict,
    })
}

/// Lower 5% quantile of `min_cells b′·l` under resampling of environments.
fn bootstrap_infimum(
    field: &AuxiliaryDriftField,
    n_env: usize,
    l: &Vector,
    reps: usize,
    rng: &mut ChaCha8Rng,
) -> Option<f64> {
    let samples: Vec<&MarginSample> = field
        .margin_samples
        .iter()
        .filter(|s| s.cell != field.origin && field.reliable[s.cell])
        .collect();
    if reps == 0 || n_env < 2 || samples.is_empty() {
        return None;
    }
    let projected: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.drifts.iter().map(|b| b.dot(l)).collect())
        .collect();
    let mut mins = Vec::with_capacity(reps);
    let mut counts = vec![0u32; n_env];
    for _ in 0..reps {
        counts.iter_mut().for_each(|c| *c = 0);
        for _ in 0..n_env {
            counts[rng.random_range(0..n_env)] += 1;
        }
        let mut m = f64::INFINITY;
        for (s, bl) in samples.iter().zip(&projected) {
            let mut num = 0.0;
            let mut den = 0.0;
            for ((&e, &w), &b) in s.envs.iter().zip(&s.weights).zip(bl) {
                let w = w * counts[e] as f64;
                num += w * b;
                den += w;
            }
            if den > 0.0 {
                m = m.min(num / den);
            }
        }
        mins.push(m);
    }
    mins.sort_by(f64::total_cmp);
    Some(mins[(0.05 * reps as f64) as usize])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitLawReport {
    pub n: usize,
    pub annealed_exits: Vec<Vector>,
    pub auxiliary_exits: Vec<Vector>,
    pub censored_annealed: usize,
    pub censored_auxiliary: usize,
    pub test: TestResult,
}

/// Environment indices of annealed exit samples start here.
pub const EXIT_ENV_OFFSET: u64 = 1 << 42;

/// Exit point of the auxiliary diffusion `dX = b′(X) dt + dW` from 0.
pub fn auxiliary_exit(
    field: &AuxiliaryDriftField,
    region: &Region,
    integrator: &IntegratorConfig,
    rng: &mut ChaCha8Rng,
) -> ExitOutcome {
    let d = field.grid.dim();
    let h = integrator.grid_step();
    let sqrt_h = h.sqrt();
    let mut x = Vector::zeros(d);
    let steps = integrator.steps_for(integrator.max_time);
    for i in 0..steps {
        let b = field.interpolate(&x);
        let next = x + b * h + gaussian(d, rng) * sqrt_h;
        if !region.contains(&next) {
            return ExitOutcome::Exited(crate::sde::ExitEvent {
                time: (i + 1) as f64 * h,
                position: next,
                face: None,
                bridged: false,
            });
        }
        x = next;
    }
    ExitOutcome::Timeout {
        time: steps as f64 * h,
        position: x,
    }
}

/// Two-sample comparison of annealed and auxiliary exit laws from 0.
pub fn exit_law_identity_test(
    spec: &Arc<EnvironmentSpec>,
    field: &AuxiliaryDriftField,
    integrator: &IntegratorConfig,
    n: usize,
    permutations: usize,
) -> Result<ExitLawReport> {
    let region = field.grid.domain.region();
    let origin = Vector::zeros(spec.dimension);
    let annealed: Vec<ExitOutcome> = (0..n as u64)
        .into_par_iter()
        .map(|k| {
            let env_index = EXIT_ENV_OFFSET + k;
            let env = Environment::new(spec.clone(), env_index);
            let stream = StreamId::new(spec.master_seed, env_index, k);
            let mut stepper = Stepper::for_stream(&env, integrator, stream);
            let mut crossing = stream.rng(StreamTag::Crossing);
            run_to_exit(&mut stepper, origin, &region, integrator, integrator.max_time, &mut crossing, |_, _| {})
        })
        .collect();
    let auxiliary: Vec<ExitOutcome> = (0..n as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = StreamId::new(spec.master_seed, EXIT_ENV_OFFSET, k).rng(StreamTag::Auxiliary);
            auxiliary_exit(field, &region, integrator, &mut rng)
        })
        .collect();
    let a: Vec<Vector> = annealed.iter().filter_map(|o| o.exit().map(|e| e.position)).collect();
    let b: Vec<Vector> = auxiliary.iter().filter_map(|o| o.exit().map(|e| e.position)).collect();
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData("no exits within the horizon".into()));
    }
    let mut rng = StreamId::new(spec.master_seed, EXIT_ENV_OFFSET, u64::MAX).rng(StreamTag::Analysis);
    let test = energy_distance_test(&a, &b, permutations, &mut rng);
    Ok(ExitLawReport {
        n,
        censored_annealed: n - a.len(),
        censored_auxiliary: n - b.len(),
        annealed_exits: a,
        auxiliary_exits: b,
        test,
    })
}

/// Chi-square uniformity of exit directions seen from `center` over `bins` sectors (d = 2)
/// or equal-area hemisphere/azimuth cells (d = 3).
pub fn exit_direction_uniformity(points: &[Vector], center: &Vector, bins: usize) -> TestResult {
    let mut counts = vec![0u64; bins];
    for p in points {
        let u = *p - *center;
        let idx = match u.dim() {
            1 => usize::from(u[0] > 0.0) * (bins / 2),
            2 => {
                let a = (u[1].atan2(u[0]) + std::f64::consts::PI) / std::f64::consts::TAU;
                ((a * bins as f64) as usize).min(bins - 1)
            }
            _ => {
                let z = u[2] / u.norm();
                let half = bins / 2;
                let a = (u[1].atan2(u[0]) + std::f64::consts::PI) / std::f64::consts::TAU;
                // Archimedes: z is uniform on [−1, 1] for uniform points on the sphere.
                usize::from(z >= 0.0) * half + ((a * half as f64) as usize).min(half - 1)
            }
        };
        counts[idx] += 1;
    }
    if points.first().is_some_and(|p| p.dim() == 1) {
        counts.retain(|&c| c > 0 || bins == 2);
        counts.truncate(2);
    }
    chi_square_uniform(&counts)
}

/// Settings for Green estimation over a domain family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KalikowConfig {
    /// Cell size as a fraction of `R` (at most 1/4).
    #[serde(default = "default_cell_fraction")]
    pub cell_fraction: f64,
    pub n_env: usize,
    pub n_traj: usize,
    #[serde(default = "default_scales")]
    pub scales: Vec<f64>,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
}

fn default_cell_fraction() -> f64 {
    0.25
}

fn default_scales() -> Vec<f64> {
    vec![12.0, 24.0, 48.0]
}

fn default_bootstrap() -> usize {
    200
}

impl KalikowConfig {
    pub fn new(n_env: usize, n_traj: usize) -> Self {
        Self {
            cell_fraction: default_cell_fraction(),
            n_env,
            n_traj,
            scales: default_scales(),
            bootstrap: default_bootstrap(),
        }
    }

    pub fn validate(&self) -> Vec<crate::FieldError> {
        let mut errors = Vec::new();
        if !(self.cell_fraction > 0.0 && self.cell_fraction <= 0.25) {
            errors.push(crate::FieldError::new("parameters.cell_fraction", "must lie in (0, 0.25]"));
        }
        if self.n_env == 0 {
            errors.push(crate::FieldError::new("parameters.n_env", "must be positive"));
        }
        if self.n_traj == 0 {
            errors.push(crate::FieldError::new("parameters.n_traj", "must be positive"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 6.0)) {
            errors.push(crate::FieldError::new("parameters.scales", "need scales above 6"));
        }
        errors
    }
}

/// Green estimate and auxiliary drift for each domain of the family.
pub fn family_fields(
    spec: &Arc<EnvironmentSpec>,
    l: &Vector,
    integrator: &IntegratorConfig,
    cfg: &KalikowConfig,
) -> Result<Vec<(String, GreenEstimate, AuxiliaryDriftField)>> {
    let cell = cfg.cell_fraction * spec.range;
    domain_family(l, spec.range, &cfg.scales)
        .into_iter()
        .map(|(label, domain)| {
            let grid = DomainGrid::new(domain, cell)?;
            let green = estimate_green(spec, &grid, integrator, cfg.n_env, cfg.n_traj)?;
            let field = auxiliary_drift(spec, &green)?;
            Ok((label, green, field))
        })
        .collect()
}

/// Condition (K) over the domain family of `cfg`.
pub fn condition_k_for_spec(
    spec: &Arc<EnvironmentSpec>,
    l: &Vector,
    integrator: &IntegratorConfig,
    cfg: &KalikowConfig,
) -> Result<KReport> {
    let fields: Vec<(String, AuxiliaryDriftField)> = family_fields(spec, l, integrator, cfg)?
        .into_iter()
        .map(|(label, _, field)| (label, field))
        .collect();
    let mut rng = StreamId::new(spec.master_seed, 0, 0x6b).rng(StreamTag::Analysis);
    check_condition_k(&fields, l, cfg.bootstrap, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TiltRow {
    pub base_scale: f64,
    pub ratio: f64,
    pub verdict: KVerdict,
    pub epsilon_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionReport {
    pub split: SignSplit,
    pub ratio: Option<f64>,
    pub k: Option<KReport>,
    /// Smallest scanned ratio at which (K) holds.
    pub c_e_hat: Option<f64>,
    pub scan: Vec<TiltRow>,
    /// `mean_plus − ĉ_e mean_minus`.
    pub margin: Option<f64>,
    pub predicted_t: bool,
    pub vacuous: bool,
    pub note: String,
}

/// Prediction rule: (T) is predicted iff `mean_plus > c_e · mean_minus`.
pub fn predicted_t(mean_plus: f64, mean_minus: f64, c_e: f64) -> (bool, f64) {
    let margin = mean_plus - c_e * mean_minus;
    (margin > 0.0, margin)
}

/// Same law with the base drift scaled by `factor` (marks unchanged); this
/// moves `mean_plus / mean_minus` monotonically.
pub fn tilted(spec: &EnvironmentSpec, factor: f64) -> EnvironmentSpec {
    let mut out = spec.clone();
    out.base_drift = spec.base_drift * factor;
    out
}

/// Drift-sign criterion: sign split of `b(0)·l`, condition (K) on the environment
/// and an empirical `ĉ_e` from a scan over base-drift tilts.
pub fn criterion_check(
    spec: &Arc<EnvironmentSpec>,
    l: &Vector,
    n_env_moments: usize,
    integrator: &IntegratorConfig,
    cfg: &KalikowConfig,
    tilts: &[f64],
) -> Result<CriterionReport> {
    let split = sign_split_moments(spec, l, n_env_moments)?;
    if split.mean_minus == 0.0 {
        return Ok(CriterionReport {
            split,
            ratio: None,
            k: None,
            c_e_hat: None,
            scan: Vec::new(),
            margin: None,
            predicted_t: true,
            vacuous: true,
            note: "non-nestling regime; criterion vacuously satisfied".into(),
        });
    }
    let k = condition_k_for_spec(spec, l, integrator, cfg)?;
    let mut scan = Vec::new();
    for &factor in tilts {
        let tilted = tilted(spec, factor);
        if !tilted.validate().is_empty() {
            continue;
        }
        let tilted = Arc::new(tilted);
        let s = sign_split_moments(&tilted, l, n_env_moments)?;
        let ratio = if s.mean_minus > 0.0 { s.mean_plus / s.mean_minus } else { f64::INFINITY };
        let rep = condition_k_for_spec(&tilted, l, integrator, cfg)?;
        scan.push(TiltRow {
            base_scale: factor,
            ratio,
            verdict: rep.verdict,
            epsilon_hat: rep.epsilon_hat,
        });
    }
    scan.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
    let c_e_hat = scan
        .iter()
        .find(|r| r.verdict == KVerdict::Holds && r.ratio.is_finite())
        .map(|r| r.ratio);
    let ratio = split.mean_plus / split.mean_minus;
    let (predicted, margin) = match c_e_hat {
        Some(c) => {
            let (p, m) = predicted_t(split.mean_plus, split.mean_minus, c);
            // Ties at the flip point count as predicted.
            (p || (ratio - c).abs() < 1e-12, Some(m))
        }
        None => (false, None),
    };
    Ok(CriterionReport {
        split,
        ratio: Some(ratio),
        k: Some(k),
        c_e_hat,
        scan,
        margin,
        predicted_t: predicted,
        vacuous: false,
        note: "c_e is estimated empirically from a finite domain family".into(),
    })
}

/// (K) on the family and the (T) ladder fit at γ = 1 for the same spec.
pub fn k_implies_t(
    spec: &Arc<EnvironmentSpec>,
    l: &Vector,
    integrator: &IntegratorConfig,
    cfg: &KalikowConfig,
    ladder: &[f64],
    n: u64,
) -> Result<(KReport, ConditionTFit)> {
    let k = condition_k_for_spec(spec, l, integrator, cfg)?;
    let est = slab_ladder(spec, l, 1.0, ladder, integrator, n)?;
    Ok((k, fit_condition_t(&est, 1.0)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{AmplitudeLaw, SigmaMode};
    use crate::sde::BoundaryCorrection;
    use rand::SeedableRng;

    fn unit_interval_grid(cell: f64) -> DomainGrid {
        let domain = Domain::Box {
            lo: Vector::from_slice(&[-0.5]),
            hi: Vector::from_slice(&[0.5]),
        };
        DomainGrid::new(domain, cell).unwrap()
    }

    #[test]
    fn grid_geometry() {
        let g = unit_interval_grid(0.025);
        assert_eq!(g.len(), 41);
        assert_eq!(g.center(g.origin()), Vector::zeros(1));
        assert_eq!(g.cell_of(&Vector::from_slice(&[0.0124])), Some(g.origin()));
        assert_eq!(g.cell_of(&Vector::from_slice(&[0.9])), None);
        let ball = Domain::Ball {
            center: Vector::from_slice(&[1.0, 0.0]),
            radius: 3.0,
        };
        let g = DomainGrid::new(ball, 0.25).unwrap();
        for c in 0..g.len() {
            assert_eq!(g.cell_of(&g.center(c)), Some(c));
        }
        assert!(DomainGrid::new(
            Domain::Ball {
                center: Vector::from_slice(&[5.0]),
                radius: 1.0
            },
            0.1
        )
        .is_err());
    }

    #[test]
    fn family_places_origin_six_ranges_from_back_wall() {
        let l = Vector::basis(2, 0);
        let fam = domain_family(&l, 0.5, &[12.0, 24.0]);
        assert_eq!(fam.len(), 4);
        for (_, d) in &fam {
            let dist = d.boundary_distance(&Vector::zeros(2));
            assert!((dist - 3.0).abs() < 1e-12, "{dist}");
        }
        assert_eq!(domain_family(&Vector::basis(1, 0), 1.0, &[12.0]).len(), 1);
    }

    #[test]
    fn interval_green_function_oracle() {
        // g(0, y) on (−1/2, 1/2) is the tent 1/2 − |y|; mean exit time 1/4.
        let spec = Arc::new(EnvironmentSpec::constant(Vector::zeros(1), 0.1, 3));
        let cfg = IntegratorConfig::new(0.0001, BoundaryCorrection::BridgeTest, 100.0);
        let grid = unit_interval_grid(0.025);
        let g = estimate_green(&spec, &grid, &cfg, 1, 4000).unwrap();
        let mid = g.mean[grid.origin()];
        let cell_average = 0.5 - 0.025 / 4.0;
        assert!((mid - cell_average).abs() < 0.05 * cell_average, "{mid}");
        assert!((g.total_mass() - g.mean_exit_time).abs() < 1e-9);
        assert!((g.mean_exit_time - 0.25).abs() < 3.0 * g.exit_time_se, "{}", g.mean_exit_time);
        assert!(!g.flagged);
        // Cells whose centres lie outside the interval see no time.
        for c in 0..grid.len() {
            if grid.center(c)[0].abs() > 0.5 + 0.0125 {
                assert_eq!(g.mean[c], 0.0);
            }
        }
        // Interior lower bound: pooled estimate minus 3 SE stays positive.
        for c in 0..grid.len() {
            if grid.domain.boundary_distance(&grid.center(c)) > 0.1 {
                assert!(g.mean[c] - 3.0 * g.se[c] > 0.0);
            }
        }
    }

    #[test]
    fn deterministic_ensemble_gives_base_drift() {
        let v0 = Vector::from_slice(&[0.4, -0.1]);
        let spec = Arc::new(EnvironmentSpec::constant(v0, 0.5, 2));
        let cfg = IntegratorConfig::new(0.02, BoundaryCorrection::None, 200.0);
        let grid = DomainGrid::new(
            Domain::Ball {
                center: Vector::zeros(2),
                radius: 1.5,
            },
            0.125,
        )
        .unwrap();
        let g = estimate_green(&spec, &grid, &cfg, 3, 30).unwrap();
        let f = auxiliary_drift(&spec, &g).unwrap();
        let mut checked = 0;
        for c in 0..grid.len() {
            if f.reliable[c] {
                assert!((f.drift[c] - v0).norm() < 1e-12);
                checked += 1;
            }
        }
        assert!(checked > 0);
        assert_eq!(f.drift[f.origin], Vector::zeros(2));
    }

    fn bumpy_1d(seed: u64) -> Arc<EnvironmentSpec> {
        Arc::new(EnvironmentSpec {
            dimension: 1,
            range: 1.0,
            drift_bound: 2.0,
            lipschitz_K: 1000.0,
            ellipticity_nu: 1.0,
            base_drift: Vector::from_slice(&[0.5]),
            bump_intensity: 0.5,
            bump_amplitude_law: AmplitudeLaw::UniformSegment {
                from: Vector::from_slice(&[-0.4]),
                to: Vector::from_slice(&[0.6]),
            },
            sigma_mode: SigmaMode::Identity,
            master_seed: seed,
        })
    }

    #[test]
    fn single_environment_reproduces_its_drift() {
        let spec = bumpy_1d(4);
        let cfg = IntegratorConfig::new(0.02, BoundaryCorrection::BridgeTest, 500.0);
        let grid = DomainGrid::new(
            Domain::Box {
                lo: Vector::from_slice(&[-3.0]),
                hi: Vector::from_slice(&[6.0]),
            },
            0.25,
        )
        .unwrap();
        let g = estimate_green(&spec, &grid, &cfg, 1, 50).unwrap();
        let f = auxiliary_drift(&spec, &g).unwrap();
        let env = Environment::new(spec.clone(), g.env_indices[0]);
        let mut checked = 0;
        for c in 0..grid.len() {
            if f.reliable[c] {
                assert!((f.drift[c] - env.drift(&grid.center(c))).norm() < 1e-12);
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn auxiliary_drift_is_convex_combination() {
        let spec = bumpy_1d(6);
        let cfg = IntegratorConfig::new(0.02, BoundaryCorrection::BridgeTest, 500.0);
        let grid = DomainGrid::new(
            Domain::Box {
                lo: Vector::from_slice(&[-3.0]),
                hi: Vector::from_slice(&[6.0]),
            },
            0.25,
        )
        .unwrap();
        let g = estimate_green(&spec, &grid, &cfg, 20, 5).unwrap();
        let f = auxiliary_drift(&spec, &g).unwrap();
        for s in &f.margin_samples {
            let lo = s.drifts.iter().map(|b| b[0]).fold(f64::INFINITY, f64::min);
            let hi = s.drifts.iter().map(|b| b[0]).fold(f64::NEG_INFINITY, f64::max);
            let v = f.drift[s.cell][0];
            if s.cell != f.origin {
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
        for b in &f.drift {
            assert!(b.norm() <= spec.drift_bound + 1e-12);
        }
    }

    fn injected(values: impl Fn(&Vector) -> Vector, scale: f64) -> AuxiliaryDriftField {
        let l = Vector::basis(2, 0);
        let (_, domain) = domain_family(&l, 1.0, &[scale]).remove(0);
        let grid = DomainGrid::new(domain, 0.5).unwrap();
        let drift = (0..grid.len()).map(|c| values(&grid.center(c))).collect();
        let reliable = vec![true; grid.len()];
        AuxiliaryDriftField::from_values(grid, 1.0, drift, reliable).unwrap()
    }

    #[test]
    fn injected_fields_drive_the_verdict() {
        let l = Vector::basis(2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let good = injected(|_| l * 0.3, 12.0);
        let rep = check_condition_k(&[("ball".into(), good)], &l, 50, &mut rng).unwrap();
        assert_eq!(rep.verdict, KVerdict::Holds);
        assert!((rep.epsilon_hat.unwrap() - 0.3).abs() < 1e-12);

        let target = Vector::from_slice(&[2.0, 1.0]);
        let bad = injected(
            |c| if c.distance(&target) < 1e-9 { l * -0.01 } else { l * 0.3 },
            12.0,
        );
        let rep = check_condition_k(&[("ball".into(), bad)], &l, 50, &mut rng).unwrap();
        assert_eq!(rep.verdict, KVerdict::Fails);

        let small = injected(|_| l * 0.3, 4.0 + 1e-9);
        assert_eq!(small.margin_cells().count(), 0);
        let rep = check_condition_k(&[("tiny".into(), small)], &l, 50, &mut rng).unwrap();
        assert_eq!(rep.verdict, KVerdict::Vacuous);
    }

    #[test]
    fn unreliable_margin_is_inconclusive() {
        let l = Vector::basis(2, 0);
        let mut f = injected(|_| l * 0.3, 12.0);
        let c = f.margin_cells().nth(3).unwrap();
        f.reliable[c] = false;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rep = check_condition_k(&[("ball".into(), f)], &l, 50, &mut rng).unwrap();
        assert_eq!(rep.verdict, KVerdict::Inconclusive);
    }

    #[test]
    fn interpolation_reproduces_linear_fields() {
        let l = Vector::basis(2, 0);
        let f = injected(|c| Vector::from_slice(&[0.1 * c[0] + 0.2, -0.05 * c[1]]), 12.0);
        // The origin cell is filled from a neighbour, so probe away from it.
        let x = Vector::from_slice(&[3.3, -2.1]);
        let b = f.interpolate(&x);
        assert!((b - Vector::from_slice(&[0.1 * 3.3 + 0.2, 0.105])).norm() < 1e-12, "{b:?}");
        // Far outside: clamped to the grid.
        assert!(f.interpolate(&(l * 1000.0)).is_finite());
    }

    #[test]
    fn flat_ball_exits_are_uniform_and_identical_in_law() {
        let spec = Arc::new(EnvironmentSpec::constant(Vector::zeros(2), 0.25, 8));
        let cfg = IntegratorConfig::new(0.01, BoundaryCorrection::None, 200.0);
        let domain = Domain::Ball {
            center: Vector::zeros(2),
            radius: 1.0,
        };
        let grid = DomainGrid::new(domain, 0.0625).unwrap();
        let drift = vec![Vector::zeros(2); grid.len()];
        let reliable = vec![true; grid.len()];
        let field = AuxiliaryDriftField::from_values(grid, 0.25, drift, reliable).unwrap();
        let rep = exit_law_identity_test(&spec, &field, &cfg, 600, 99).unwrap();
        assert!(rep.test.p_value > 0.01, "{:?}", rep.test);
        let c = Vector::zeros(2);
        assert!(exit_direction_uniformity(&rep.annealed_exits, &c, 16).p_value > 0.001);
        assert!(exit_direction_uniformity(&rep.auxiliary_exits, &c, 16).p_value > 0.001);
    }

    #[test]
    fn criterion_arithmetic() {
        let (ok, margin) = predicted_t(0.3, 0.1, 2.0);
        assert!(ok);
        assert!((margin - 0.1).abs() < 1e-12);
        assert!(!predicted_t(0.1, 0.1, 2.0).0);
    }

    #[test]
    fn non_nestling_criterion_is_vacuous() {
        let spec = Arc::new(EnvironmentSpec::constant(Vector::from_slice(&[0.5]), 1.0, 1));
        let cfg = IntegratorConfig::default();
        let rep = criterion_check(&spec, &Vector::basis(1, 0), 100, &cfg, &KalikowConfig::new(2, 2), &[1.0]).unwrap();
        assert!(rep.vacuous && rep.predicted_t);
        assert!(rep.note.contains("vacuously"));
    }
}

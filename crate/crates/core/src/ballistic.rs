//! Slab exit estimates, the (T)_γ ladder fit, τ₁ integrability and the
//! ballistic statistics computed from renewal blocks.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::env::{Environment, EnvironmentSpec};
use crate::error::{require_unit, Result};
use crate::regen::{RegenScan, RegenerationRecord};
use crate::rng::{mix, StreamId, StreamTag};
use crate::sde::{run_to_exit, ExitOutcome, IntegratorConfig, Region, Stepper};
use crate::stats::{clopper_pearson_upper, weighted_linear_fit, wilson, Interval, MeanAccumulator};
use crate::vector::Vector;
use crate::Error;

/// Default γ ladder probing (T′) against (T).
pub const GAMMA_LADDER: [f64; 4] = [0.4, 0.6, 0.8, 1.0];

/// `{x : −bL < x·l < L}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlabSpec {
    pub l: Vector,
    pub depth_ratio: f64,
    pub width: f64,
}

impl SlabSpec {
    pub fn new(l: Vector, depth_ratio: f64, width: f64) -> Result<Self> {
        require_unit("l", &l)?;
        if !(depth_ratio > 0.0) {
            return Err(Error::invalid("depth_ratio", "must be > 0"));
        }
        if !(width > 0.0) {
            return Err(Error::invalid("L", "must be > 0"));
        }
        Ok(Self { l, depth_ratio, width })
    }

    /// The slab `U_{β,L}` with left wall at `−L^β`.
    pub fn with_left_wall_exponent(l: Vector, beta: f64, width: f64) -> Result<Self> {
        Self::new(l, width.powf(beta - 1.0), width)
    }

    pub fn region(&self) -> Region {
        Region::slab(self.l, self.depth_ratio, self.width)
    }

    fn salt(&self) -> u64 {
        let mut words = vec![self.depth_ratio.to_bits(), self.width.to_bits()];
        words.extend(self.l.as_slice().iter().map(|c| c.to_bits()));
        mix(&words)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlabExitEstimate {
    pub slab: SlabSpec,
    pub n: u64,
    pub exit_left: u64,
    pub exit_right: u64,
    pub censored: u64,
    pub p_hat: f64,
    /// Wilson 95% interval for the exit-left probability.
    pub ci: Interval,
    /// More than 5% of the trajectories reached the horizon.
    pub censoring_warning: bool,
}

impl SlabExitEstimate {
    pub fn from_counts(slab: SlabSpec, exit_left: u64, exit_right: u64, censored: u64) -> Self {
        let n = exit_left + exit_right + censored;
        Self {
            slab,
            n,
            exit_left,
            exit_right,
            censored,
            p_hat: exit_left as f64 / n as f64,
            ci: wilson(exit_left, n, 0.05),
            censoring_warning: censored as f64 > 0.05 * n as f64,
        }
    }
}

/// Annealed exit-left probability of `slab` from 0, one environment per path.
pub fn slab_exit_probability(
    spec: &Arc<EnvironmentSpec>,
    slab: &SlabSpec,
    integrator: &IntegratorConfig,
    n: u64,
) -> Result<SlabExitEstimate> {
    if n < 100 {
        return Err(Error::invalid("n", "need at least 100 trajectories"));
    }
    let region = slab.region();
    let origin = Vector::zeros(spec.dimension);
    let salt = slab.salt();
    let (left, right, censored) = (0..n)
        .into_par_iter()
        .map(|k| {
            let env = Environment::new(spec.clone(), k);
            let stream = StreamId::new(spec.master_seed, k, salt ^ k);
            let mut stepper = Stepper::for_stream(&env, integrator, stream);
            let mut crossing = stream.rng(StreamTag::Crossing);
            let out = run_to_exit(&mut stepper, origin, &region, integrator, integrator.max_time, &mut crossing, |_, _| {});
            match out {
                ExitOutcome::Exited(e) if e.face == Some(0) => (1u64, 0u64, 0u64),
                ExitOutcome::Exited(_) => (0, 1, 0),
                ExitOutcome::Timeout { .. } => (0, 0, 1),
            }
        })
        .reduce(|| (0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    Ok(SlabExitEstimate::from_counts(*slab, left, right, censored))
}

/// Slab estimates over a ladder of widths.
pub fn slab_ladder(
    spec: &Arc<EnvironmentSpec>,
    l: &Vector,
    depth_ratio: f64,
    ladder: &[f64],
    integrator: &IntegratorConfig,
    n: u64,
) -> Result<Vec<SlabExitEstimate>> {
    ladder
        .iter()
        .map(|&w| slab_exit_probability(spec, &SlabSpec::new(*l, depth_ratio, w)?, integrator, n))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TVerdict {
    Consistent,
    NotConsistent,
    /// Every cell had zero exits to the left.
    BelowResolution,
}

impl TVerdict {
    pub fn is_consistent(self) -> bool {
        matches!(self, TVerdict::Consistent | TVerdict::BelowResolution)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionTFit {
    pub gamma: f64,
    pub slope: Option<f64>,
    pub slope_se: Option<f64>,
    pub intercept: Option<f64>,
    /// Number of zero-count cells entered at their one-sided upper bound.
    pub bounded_cells: usize,
    pub verdict: TVerdict,
}

impl ConditionTFit {
    /// Upper end of the 95% confidence interval for the slope.
    pub fn slope_upper(&self) -> Option<f64> {
        Some(self.slope? + 1.96 * self.slope_se?)
    }
}

/// Weighted least-squares fit of `log p̂_L` against `L^γ`.
///
/// Weights are inverse delta-method variances `n p / (1 − p)`. Zero-count
/// cells enter at their one-sided 95% Clopper–Pearson upper bound, which
/// can only make the fitted decay look slower. The verdict requires the
/// upper end of the 95% confidence interval for the slope to be negative.
pub fn fit_condition_t(estimates: &[SlabExitEstimate], gamma: f64) -> Result<ConditionTFit> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid("gamma", "must lie in (0, 1]"));
    }
    if estimates.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} ladder points, need at least 3",
            estimates.len()
        )));
    }
    let bounded_cells = estimates.iter().filter(|e| e.exit_left == 0).count();
    if bounded_cells == estimates.len() {
        return Ok(ConditionTFit {
            gamma,
            slope: None,
            slope_se: None,
            intercept: None,
            bounded_cells,
            verdict: TVerdict::BelowResolution,
        });
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    for e in estimates {
        let n = e.n as f64;
        let p = if e.exit_left == 0 {
            clopper_pearson_upper(0, e.n, 0.05)
        } else {
            e.p_hat.min(1.0 - 0.5 / n)
        };
        xs.push(e.slab.width.powf(gamma));
        ys.push(p.ln());
        ws.push(n * p / (1.0 - p));
    }
    let fit = weighted_linear_fit(&xs, &ys, &ws)
        .ok_or_else(|| Error::InsufficientData("ladder widths are not distinct".into()))?;
    let verdict = if fit.slope + 1.96 * fit.slope_se < 0.0 {
        TVerdict::Consistent
    } else {
        TVerdict::NotConsistent
    };
    Ok(ConditionTFit {
        gamma,
        slope: Some(fit.slope),
        slope_se: Some(fit.slope_se),
        intercept: Some(fit.intercept),
        bounded_cells,
        verdict,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionFit {
    pub direction: Vector,
    pub estimates: Vec<SlabExitEstimate>,
    pub fit: ConditionTFit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeighborhoodReport {
    pub gamma: f64,
    pub cone_half_angle: f64,
    pub rows: Vec<DirectionFit>,
    pub consistent: bool,
}

/// `l` together with directions on the cone of half-angle `angle` around it.
pub fn cone_directions(l: &Vector, angle: f64, n_dirs: usize) -> Vec<Vector> {
    let d = l.dim();
    let mut out = vec![*l];
    match d {
        1 => {}
        2 => {
            let perp = Vector::from_slice(&[-l[1], l[0]]);
            for sign in [1.0, -1.0] {
                out.push(*l * angle.cos() + perp * (sign * angle.sin()));
            }
        }
        _ => {
            let seed = if l[0].abs() < 0.9 { Vector::basis(3, 0) } else { Vector::basis(3, 1) };
            let e1 = seed.orthogonal_part(l).normalized().unwrap();
            let e2 = Vector::from_slice(&[
                l[1] * e1[2] - l[2] * e1[1],
                l[2] * e1[0] - l[0] * e1[2],
                l[0] * e1[1] - l[1] * e1[0],
            ]);
            for k in 0..n_dirs {
                let phi = std::f64::consts::TAU * k as f64 / n_dirs as f64;
                let around = e1 * phi.cos() + e2 * phi.sin();
                out.push(*l * angle.cos() + around * angle.sin());
            }
        }
    }
    out.into_iter().map(|v| v.normalized().unwrap()).collect()
}

/// Repeats the ladder fit over a cone of directions around `l`.
#[allow(clippy::too_many_arguments)]
pub fn neighborhood_t(
    spec: &Arc<EnvironmentSpec>,
    l: &Vector,
    gamma: f64,
    cone_half_angle: f64,
    n_dirs: usize,
    depth_ratio: f64,
    ladder: &[f64],
    integrator: &IntegratorConfig,
    n: u64,
) -> Result<NeighborhoodReport> {
    require_unit("l", l)?;
    if spec.dimension > 1 && n_dirs < 3 {
        return Err(Error::invalid("n_dirs", "need at least 3 directions"));
    }
    let mut rows = Vec::new();
    for direction in cone_directions(l, cone_half_angle, n_dirs) {
        let estimates = slab_ladder(spec, &direction, depth_ratio, ladder, integrator, n)?;
        let fit = fit_condition_t(&estimates, gamma)?;
        rows.push(DirectionFit {
            direction,
            estimates,
            fit,
        });
    }
    let consistent = rows.iter().all(|r| r.fit.verdict.is_consistent());
    Ok(NeighborhoodReport {
        gamma,
        cone_half_angle,
        rows,
        consistent,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailFit {
    pub gamma: f64,
    pub mu: f64,
    pub mu_se: f64,
    pub intercept: f64,
}

impl TailFit {
    pub fn mu_lower(&self) -> f64 {
        self.mu - 1.96 * self.mu_se
    }
}

const SURVIVAL_LEVELS: [f64; 12] = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.02, 0.01];

fn tail_point_fit(sorted: &[f64], gamma: f64) -> Option<(f64, f64)> {
    let n = sorted.len() as f64;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    for &s in SURVIVAL_LEVELS.iter().filter(|&&s| s * n >= 10.0) {
        let u = sorted[((1.0 - s) * n) as usize];
        let above = sorted.len() - sorted.partition_point(|&x| x <= u);
        if above == 0 || above == sorted.len() {
            continue;
        }
        let surv = above as f64 / n;
        xs.push(u.powf(gamma));
        ys.push(surv.ln());
        ws.push(n * surv / (1.0 - surv));
    }
    let fit = weighted_linear_fit(&xs, &ys, &ws)?;
    Some((-fit.slope, fit.intercept))
}

/// Fit of `log P[S > s] ≈ c − μ s^γ` with a bootstrap standard error for `μ`.
pub fn stretched_exponential_fit(samples: &[f64], gamma: f64, rng: &mut ChaCha8Rng) -> Option<TailFit> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mu, intercept) = tail_point_fit(&sorted, gamma)?;
    let mut boot = MeanAccumulator::default();
    let mut resample = vec![0.0; sorted.len()];
    for _ in 0..200 {
        for r in resample.iter_mut() {
            *r = sorted[rng.random_range(0..sorted.len())];
        }
        resample.sort_by(f64::total_cmp);
        if let Some((m, _)) = tail_point_fit(&resample, gamma) {
            boot.push(m);
        }
    }
    Some(TailFit {
        gamma,
        mu,
        mu_se: boot.variance().sqrt(),
        intercept,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrabilityVerdict {
    Integrable,
    NotIntegrable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tau1Report {
    pub trajectories: usize,
    pub uncensored: usize,
    /// Survival of `sup_{t ≤ τ₁} |X_t|` on uncensored records.
    pub tail_table: Vec<(f64, f64)>,
    pub fit: Option<TailFit>,
    /// `P̂[no backtrack by R before H]`.
    pub no_backtrack: f64,
    /// `P̂[no backtrack before H | none before H/4]`; near 1 for transient
    /// motion, near 1/2 for diffusive motion.
    pub late_survival: f64,
    pub transient: bool,
    pub verdict: IntegrabilityVerdict,
}

/// Minimum late-horizon survival for the motion to count as transient.
pub const LATE_SURVIVAL_THRESHOLD: f64 = 0.8;

/// Minimum uncensored `τ₁` records needed to fit the tail.
pub const MIN_TAU1_RECORDS: usize = 200;

/// Integrability of `exp{μ sup_{t ≤ τ₁} |X_t|^γ}` from regeneration scans.
///
/// Negative when the direction is not transient, i.e. when backtracks keep
/// occurring late in the horizon so `τ₁` is not a.s. finite; otherwise the
/// verdict is positive iff the fitted `μ̂` has a positive lower bound.
pub fn tau1_integrability(scans: &[RegenScan], gamma: f64, rng: &mut ChaCha8Rng) -> Result<Tau1Report> {
    let live: Vec<&RegenScan> = scans.iter().filter(|s| !s.failed).collect();
    if live.len() < MIN_TAU1_RECORDS {
        return Err(Error::InsufficientData(format!(
            "{} trajectories, need {MIN_TAU1_RECORDS}",
            live.len()
        )));
    }
    let horizon = live[0].horizon as f64;
    let survived = |s: &&RegenScan, t: f64| s.start_backtrack.is_none_or(|j| j > t);
    let early = live.iter().filter(|s| survived(s, horizon / 4.0)).count();
    let late = live.iter().filter(|s| survived(s, horizon)).count();
    let no_backtrack = late as f64 / live.len() as f64;
    let late_survival = if early == 0 { 0.0 } else { late as f64 / early as f64 };
    let transient = early > 0 && late_survival >= LATE_SURVIVAL_THRESHOLD;

    let samples: Vec<f64> = live
        .iter()
        .filter_map(|s| s.records.first())
        .filter(|r| !r.censored)
        .map(|r| r.sup_displacement)
        .collect();
    let tail_table = survival_table(&samples);
    if !transient {
        return Ok(Tau1Report {
            trajectories: live.len(),
            uncensored: samples.len(),
            tail_table,
            fit: None,
            no_backtrack,
            late_survival,
            transient,
            verdict: IntegrabilityVerdict::NotIntegrable,
        });
    }
    if samples.len() < MIN_TAU1_RECORDS {
        return Err(Error::InsufficientData(format!(
            "{} uncensored tau_1 records, need {MIN_TAU1_RECORDS}",
            samples.len()
        )));
    }
    let fit = stretched_exponential_fit(&samples, gamma, rng);
    let verdict = match fit {
        Some(f) if f.mu_lower() > 0.0 => IntegrabilityVerdict::Integrable,
        _ => IntegrabilityVerdict::NotIntegrable,
    };
    Ok(Tau1Report {
        trajectories: live.len(),
        uncensored: samples.len(),
        tail_table,
        fit,
        no_backtrack,
        late_survival,
        transient,
        verdict,
    })
}

/// Empirical survival at the sample deciles.
pub fn survival_table(samples: &[f64]) -> Vec<(f64, f64)> {
    if samples.is_empty() {
        return Vec::new();
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    (1..10)
        .map(|j| {
            let u = sorted[((j as f64 / 10.0) * n) as usize];
            let above = sorted.len() - sorted.partition_point(|&x| x <= u);
            (u, above as f64 / n)
        })
        .collect()
}

/// A plain (uncoupled) long trajectory sampled at integer times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LongPath {
    pub trajectory_index: u64,
    pub positions: Vec<Vector>,
}

impl LongPath {
    pub fn duration(&self) -> f64 {
        (self.positions.len() - 1) as f64
    }
}

/// Environment indices of long trajectories are offset to stay disjoint
/// from those of regeneration scans.
pub const LONG_PATH_ENV_OFFSET: u64 = 1 << 40;

/// Annealed long trajectories from 0 over `duration` time units.
pub fn long_paths(
    spec: &Arc<EnvironmentSpec>,
    integrator: &IntegratorConfig,
    duration: u64,
    indices: std::ops::Range<u64>,
) -> Vec<LongPath> {
    let n = integrator.steps_per_unit();
    indices
        .into_par_iter()
        .map(|k| {
            let env_index = LONG_PATH_ENV_OFFSET + k;
            let env = Environment::new(spec.clone(), env_index);
            let mut stepper = Stepper::for_stream(&env, integrator, StreamId::new(spec.master_seed, env_index, k));
            let mut x = Vector::zeros(spec.dimension);
            let mut positions = Vec::with_capacity(duration as usize + 1);
            positions.push(x);
            for _ in 0..duration {
                for _ in 0..n {
                    x = stepper.step(&x).0;
                }
                positions.push(x);
            }
            LongPath {
                trajectory_index: k,
                positions,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VelocityEstimate {
    pub velocity: Vector,
    pub standard_error: Vector,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransverseRow {
    pub time: f64,
    pub mean_sup: f64,
    /// `mean_sup / T^ρ` for each exponent.
    pub ratios: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BallisticReport {
    pub v_hat_direction: Vector,
    pub velocity: VelocityEstimate,
    pub covariance: Vec<Vec<f64>>,
    /// `X_H/H` over the coupled trajectories the blocks were cut from.
    pub direct_velocity: VelocityEstimate,
    /// Every component of the block and direct velocities within 5 SE.
    pub velocities_agree: bool,
    /// `X_T/T` over independent uncoupled trajectories.
    pub plain_velocity: VelocityEstimate,
    /// Block velocity minus plain velocity: the drift the `λ = 0` kernel
    /// approximation introduces.
    pub coupling_bias: VelocityEstimate,
    pub plain_velocities_agree: bool,
    pub first_half: VelocityEstimate,
    pub second_half: VelocityEstimate,
    pub halves_agree: bool,
    /// `E[X_{τ₁}·l | D = ∞] / E[τ₁ | D = ∞]` with its standard error.
    pub renewal_identity: Option<(f64, f64)>,
    pub renewal_identity_agrees: Option<bool>,
    pub velocity_l_lower: f64,
    pub tau1_survival: Vec<Tau1SurvivalRow>,
    pub transverse: Vec<TransverseRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tau1SurvivalRow {
    pub u: f64,
    pub survival: f64,
    pub log_log_u: f64,
    pub log_neg_log_survival: f64,
}

/// Minimum long trajectories for the direct velocity.
pub const MIN_LONG_PATHS: usize = 50;

/// Ratio estimator `Σ ΔX / Σ Δτ` with a delta-method standard error, and the
/// block covariance `E[(ΔX − v Δτ)(ΔX − v Δτ)ᵀ] / E[Δτ]`.
pub fn block_velocity(blocks: &[&RegenerationRecord]) -> (VelocityEstimate, Vec<Vec<f64>>) {
    let d = blocks[0].block_increment.unwrap().dim();
    let nb = blocks.len() as f64;
    let mut sum_x = Vector::zeros(d);
    let mut sum_t = 0.0;
    for r in blocks {
        sum_x += r.block_increment.unwrap();
        sum_t += r.block_duration.unwrap() as f64;
    }
    let v = sum_x * (1.0 / sum_t);
    let mean_t = sum_t / nb;
    let mut cov = vec![vec![0.0; d]; d];
    for r in blocks {
        let z = r.block_increment.unwrap() - v * r.block_duration.unwrap() as f64;
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += z[i] * z[j];
            }
        }
    }
    let mut se = Vector::zeros(d);
    for i in 0..d {
        let var_resid = if nb > 1.0 { cov[i][i] / (nb - 1.0) } else { 0.0 };
        se[i] = (var_resid / nb).sqrt() / mean_t;
    }
    for row in cov.iter_mut() {
        for c in row.iter_mut() {
            *c /= nb * mean_t;
        }
    }
    (
        VelocityEstimate {
            velocity: v,
            standard_error: se,
            blocks: blocks.len(),
        },
        cov,
    )
}

fn mean_velocity(samples: impl Iterator<Item = Vector>, d: usize) -> VelocityEstimate {
    let mut acc = vec![MeanAccumulator::default(); d];
    let mut n = 0;
    for v in samples {
        for (i, a) in acc.iter_mut().enumerate() {
            a.push(v[i]);
        }
        n += 1;
    }
    VelocityEstimate {
        velocity: Vector::from_slice(&acc.iter().map(|a| a.mean()).collect::<Vec<_>>()),
        standard_error: Vector::from_slice(&acc.iter().map(|a| a.standard_error()).collect::<Vec<_>>()),
        blocks: n,
    }
}

fn agree(a: &VelocityEstimate, b: &VelocityEstimate, k: f64) -> bool {
    (0..a.velocity.dim()).all(|i| {
        let se = (a.standard_error[i].powi(2) + b.standard_error[i].powi(2)).sqrt();
        (a.velocity[i] - b.velocity[i]).abs() <= k * se.max(1e-12)
    })
}

/// Velocity, covariance, direction and fluctuation statistics.
pub fn ballistic_statistics(scans: &[RegenScan], long: &[LongPath], l: &Vector) -> Result<BallisticReport> {
    require_unit("l", l)?;
    let live: Vec<&RegenScan> = scans.iter().filter(|s| !s.failed).collect();
    let blocks: Vec<&RegenerationRecord> = live
        .iter()
        .flat_map(|s| s.uncensored())
        .filter(|r| r.k >= 1)
        .collect();
    if blocks.len() < crate::regen::MIN_RENEWAL_BLOCKS {
        return Err(Error::InsufficientData(format!(
            "{} uncensored blocks, need {}",
            blocks.len(),
            crate::regen::MIN_RENEWAL_BLOCKS
        )));
    }
    if long.len() < MIN_LONG_PATHS {
        return Err(Error::InsufficientData(format!(
            "{} long trajectories, need {MIN_LONG_PATHS}",
            long.len()
        )));
    }
    let d = l.dim();
    let (velocity, covariance) = block_velocity(&blocks);
    let mean_inc = blocks
        .iter()
        .fold(Vector::zeros(d), |acc, r| acc + r.block_increment.unwrap());
    let v_hat_direction = mean_inc
        .normalized()
        .ok_or_else(|| Error::InsufficientData("zero mean block increment".into()))?;

    let k_max = blocks.iter().map(|r| r.k).max().unwrap();
    let split = k_max.div_ceil(2).max(1);
    let (lo, hi): (Vec<&RegenerationRecord>, Vec<&RegenerationRecord>) = blocks.iter().partition(|r| r.k <= split);
    let (first_half, second_half) = if lo.len() >= 2 && hi.len() >= 2 {
        (block_velocity(&lo).0, block_velocity(&hi).0)
    } else {
        (velocity.clone(), velocity.clone())
    };
    let halves_agree = agree(&first_half, &second_half, 3.0);

    let direct_velocity = mean_velocity(live.iter().map(|s| s.end * (1.0 / s.horizon as f64)), d);
    let velocities_agree = agree(&velocity, &direct_velocity, 5.0);
    let plain_velocity = mean_velocity(
        long.iter().map(|p| *p.positions.last().unwrap() * (1.0 / p.duration())),
        d,
    );
    let plain_velocities_agree = agree(&velocity, &plain_velocity, 5.0);
    let coupling_bias = VelocityEstimate {
        velocity: velocity.velocity - plain_velocity.velocity,
        standard_error: Vector::from_slice(
            &(0..d)
                .map(|i| velocity.standard_error[i].hypot(plain_velocity.standard_error[i]))
                .collect::<Vec<_>>(),
        ),
        blocks: blocks.len(),
    };

    let zero: Vec<&RegenerationRecord> = live
        .iter()
        .filter(|s| s.start_backtrack.is_none())
        .filter_map(|s| s.records.first())
        .filter(|r| !r.censored)
        .collect();
    let (renewal_identity, renewal_identity_agrees) = if zero.len() >= 2 {
        let (est, _) = block_velocity(&zero);
        let vl = est.velocity.dot(l);
        let se = (0..d)
            .map(|i| (est.standard_error[i] * l[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        let block_se = (0..d)
            .map(|i| (velocity.standard_error[i] * l[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        let ok = (vl - velocity.velocity.dot(l)).abs() <= 3.0 * (se * se + block_se * block_se).sqrt();
        (Some((vl, se)), Some(ok))
    } else {
        (None, None)
    };
    let vl_se = (0..d)
        .map(|i| (velocity.standard_error[i] * l[i]).powi(2))
        .sum::<f64>()
        .sqrt();
    let velocity_l_lower = velocity.velocity.dot(l) - 1.645 * vl_se;

    let tau1: Vec<f64> = live
        .iter()
        .filter_map(|s| s.records.first())
        .map(|r| if r.censored { f64::INFINITY } else { r.block_duration.unwrap() as f64 })
        .collect();
    let tau1_survival = tau1_survival_table(&tau1, live[0].horizon);
    let transverse = transverse_profile(long, &v_hat_direction, &[0.6, 0.8, 1.0]);
    Ok(BallisticReport {
        v_hat_direction,
        velocity,
        covariance,
        direct_velocity,
        velocities_agree,
        plain_velocity,
        coupling_bias,
        plain_velocities_agree,
        first_half,
        second_half,
        halves_agree,
        renewal_identity,
        renewal_identity_agrees,
        velocity_l_lower,
        tau1_survival,
        transverse,
    })
}

/// `P̂[τ₁ > u]` on a geometric grid; censored values count as exceeding
/// every `u` below the horizon.
pub fn tau1_survival_table(tau1: &[f64], horizon: u64) -> Vec<Tau1SurvivalRow> {
    let n = tau1.len() as f64;
    let mut rows = Vec::new();
    let mut u = 2.0f64;
    while u < horizon as f64 {
        let s = tau1.iter().filter(|&&t| t > u).count() as f64 / n;
        rows.push(Tau1SurvivalRow {
            u,
            survival: s,
            log_log_u: u.ln().ln(),
            log_neg_log_survival: if s > 0.0 && s < 1.0 { (-s.ln()).ln() } else { f64::NAN },
        });
        u *= 2.0;
    }
    rows
}

/// Mean of `sup_{t ≤ T} |Π X_t|` against `T^ρ` at dyadic fractions of the duration.
pub fn transverse_profile(long: &[LongPath], direction: &Vector, rhos: &[f64]) -> Vec<TransverseRow> {
    let len = long.iter().map(|p| p.positions.len()).min().unwrap_or(0);
    if len < 2 {
        return Vec::new();
    }
    let total = len - 1;
    let mut times: Vec<usize> = (0..5).map(|k| total >> k).filter(|&t| t >= 1).collect();
    times.sort_unstable();
    times.dedup();
    times
        .into_iter()
        .map(|t| {
            let acc: MeanAccumulator = long
                .iter()
                .map(|p| {
                    p.positions[..=t]
                        .iter()
                        .map(|x| x.orthogonal_part(direction).norm())
                        .fold(0.0, f64::max)
                })
                .collect();
            let tf = t as f64;
            TransverseRow {
                time: tf,
                mean_sup: acc.mean(),
                ratios: rhos.iter().map(|&r| (r, acc.mean() / tf.powf(r))).collect(),
            }
        })
        .collect()
}

/// A seeded analysis stream for bootstrap and permutation steps.
pub fn analysis_rng(master_seed: u64, salt: u64) -> ChaCha8Rng {
    crate::rng::substream(master_seed, StreamTag::Analysis, 0, salt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regen::synthetic_scan;
    use crate::sde::BoundaryCorrection;
    use rand::SeedableRng;

    fn e(d: usize) -> Vector {
        Vector::basis(d, 0)
    }

    fn synthetic(width: f64, n: u64, p: f64) -> SlabExitEstimate {
        let left = (n as f64 * p).round() as u64;
        SlabExitEstimate::from_counts(SlabSpec::new(e(1), 1.0, width).unwrap(), left, n - left, 0)
    }

    #[test]
    fn slab_spec_validation() {
        assert!(SlabSpec::new(Vector::from_slice(&[1.0, 0.1]), 1.0, 1.0).is_err());
        assert!(SlabSpec::new(e(2), 0.0, 1.0).is_err());
        let s = SlabSpec::with_left_wall_exponent(e(1), 0.5, 16.0).unwrap();
        assert!((s.depth_ratio * s.width - 4.0).abs() < 1e-12);
    }

    #[test]
    fn counts_sum_to_n() {
        let s = SlabExitEstimate::from_counts(SlabSpec::new(e(1), 1.0, 1.0).unwrap(), 3, 90, 7);
        assert_eq!(s.n, 100);
        assert!(s.censoring_warning);
        assert!((0.0..=1.0).contains(&s.p_hat));
    }

    #[test]
    fn symmetric_slab_is_fair() {
        let spec = Arc::new(EnvironmentSpec::constant(Vector::zeros(2), 1.0, 3));
        let cfg = IntegratorConfig::new(0.01, BoundaryCorrection::BridgeTest, 1000.0);
        let est = slab_exit_probability(&spec, &SlabSpec::new(e(2), 1.0, 1.5).unwrap(), &cfg, 4000).unwrap();
        assert_eq!(est.exit_left + est.exit_right + est.censored, 4000);
        let se = (0.25f64 / 4000.0).sqrt();
        assert!((est.p_hat - 0.5).abs() < 3.0 * se, "{}", est.p_hat);
    }

    #[test]
    fn harmonic_oracle_for_deep_slab() {
        // Exit-left for BM from 0 on (−2L, L) is L / 3L = 1/3.
        let spec = Arc::new(EnvironmentSpec::constant(Vector::zeros(1), 1.0, 5));
        let cfg = IntegratorConfig::new(0.01, BoundaryCorrection::BridgeTest, 1000.0);
        let est = slab_exit_probability(&spec, &SlabSpec::new(e(1), 2.0, 1.0).unwrap(), &cfg, 4000).unwrap();
        let se = (2.0f64 / 9.0 / 4000.0).sqrt();
        assert!((est.p_hat - 1.0 / 3.0).abs() < 3.0 * se, "{}", est.p_hat);
    }

    #[test]
    fn too_few_trajectories_rejected() {
        let spec = Arc::new(EnvironmentSpec::constant(Vector::zeros(1), 1.0, 5));
        let slab = SlabSpec::new(e(1), 1.0, 1.0).unwrap();
        assert!(slab_exit_probability(&spec, &slab, &IntegratorConfig::default(), 99).is_err());
    }

    #[test]
    fn exponential_ladder_fits_its_rate() {
        let ladder: Vec<SlabExitEstimate> = [10.0, 20.0, 40.0]
            .iter()
            .map(|&w| synthetic(w, 10_000_000, (-0.1 * w).exp()))
            .collect();
        let fit = fit_condition_t(&ladder, 1.0).unwrap();
        assert!((fit.slope.unwrap() + 0.1).abs() < 2e-3, "{fit:?}");
        assert_eq!(fit.verdict, TVerdict::Consistent);
    }

    #[test]
    fn flat_ladder_is_not_consistent() {
        let ladder: Vec<SlabExitEstimate> = [10.0, 20.0, 40.0].iter().map(|&w| synthetic(w, 1000, 0.3)).collect();
        let fit = fit_condition_t(&ladder, 1.0).unwrap();
        assert!(fit.slope.unwrap().abs() < 1e-12);
        assert_eq!(fit.verdict, TVerdict::NotConsistent);
    }

    #[test]
    fn zero_cells_enter_as_upper_bounds() {
        let ladder = vec![synthetic(2.0, 1000, 0.2), synthetic(4.0, 1000, 0.04), synthetic(8.0, 1000, 0.0)];
        let fit = fit_condition_t(&ladder, 1.0).unwrap();
        assert_eq!(fit.bounded_cells, 1);
        assert!(fit.slope.unwrap() < 0.0);
        let all_zero: Vec<_> = [2.0, 4.0, 8.0].iter().map(|&w| synthetic(w, 1000, 0.0)).collect();
        let fit = fit_condition_t(&all_zero, 1.0).unwrap();
        assert_eq!(fit.verdict, TVerdict::BelowResolution);
        assert!(fit.slope.is_none());
    }

    #[test]
    fn short_ladders_and_bad_gamma_refused() {
        let two = vec![synthetic(2.0, 1000, 0.2), synthetic(4.0, 1000, 0.1)];
        assert!(matches!(fit_condition_t(&two, 1.0), Err(Error::InsufficientData(_))));
        let three = vec![synthetic(2.0, 1000, 0.2), synthetic(4.0, 1000, 0.1), synthetic(8.0, 1000, 0.05)];
        assert!(fit_condition_t(&three, 0.0).is_err());
        assert!(fit_condition_t(&three, 1.5).is_err());
    }

    #[test]
    fn cone_directions_have_the_right_angle() {
        assert_eq!(cone_directions(&e(1), 0.3, 5), vec![e(1)]);
        for d in [2, 3] {
            let dirs = cone_directions(&e(d), 0.3, 5);
            assert_eq!(dirs.len(), if d == 2 { 3 } else { 6 });
            for v in &dirs[1..] {
                assert!(v.is_unit(1e-12));
                assert!((v.dot(&e(d)) - 0.3f64.cos()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn synthetic_exponential_tail() {
        use rand_distr::{Distribution, Exp};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let exp = Exp::new(2.0).unwrap();
        let xs: Vec<f64> = (0..20_000).map(|_| exp.sample(&mut rng)).collect();
        let fit = stretched_exponential_fit(&xs, 1.0, &mut rng).unwrap();
        assert!((fit.mu - 2.0).abs() < 3.0 * fit.mu_se + 0.02, "{fit:?}");
        assert!(fit.mu_lower() > 0.0);
    }

    fn constant_blocks(n: u64) -> Vec<RegenScan> {
        (0..n)
            .map(|i| synthetic_scan(i, &[(1, e(2) * 0.7); 4], true))
            .collect()
    }

    fn straight_paths(n: u64, v: f64) -> Vec<LongPath> {
        (0..n)
            .map(|k| LongPath {
                trajectory_index: k,
                positions: (0..=64).map(|t| e(2) * (v * t as f64)).collect(),
            })
            .collect()
    }

    #[test]
    fn injected_constant_blocks() {
        let report = ballistic_statistics(&constant_blocks(100), &straight_paths(60, 0.7), &e(2)).unwrap();
        assert!((report.velocity.velocity - e(2) * 0.7).norm() < 1e-12);
        assert!(report.covariance.iter().flatten().all(|c| c.abs() < 1e-12));
        assert!(report.velocities_agree);
        assert!(report.plain_velocities_agree);
        assert!(report.coupling_bias.velocity.norm() < 1e-12);
        assert!(report.halves_agree);
        assert_eq!(report.v_hat_direction, e(2));
        assert!(report.transverse.iter().all(|r| r.mean_sup.abs() < 1e-12));
    }

    #[test]
    fn ballistic_statistics_refuse_small_inputs() {
        assert!(ballistic_statistics(&constant_blocks(10), &straight_paths(60, 0.7), &e(2)).is_err());
        assert!(ballistic_statistics(&constant_blocks(100), &straight_paths(10, 0.7), &e(2)).is_err());
    }

    #[test]
    fn tau1_integrability_refuses_few_trajectories() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(tau1_integrability(&constant_blocks(50), 1.0, &mut rng).is_err());
    }

    #[test]
    fn covariance_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scans: Vec<RegenScan> = (0..100)
            .map(|i| {
                let blocks: Vec<(u64, Vector)> = (0..4)
                    .map(|_| {
                        let d = rng.random_range(1..6u64);
                        let x = Vector::from_slice(&[d as f64 + rng.random::<f64>(), rng.random::<f64>() - 0.5]);
                        (d, x)
                    })
                    .collect();
                synthetic_scan(i, &blocks, true)
            })
            .collect();
        let report = ballistic_statistics(&scans, &straight_paths(60, 1.0), &e(2)).unwrap();
        let c = &report.covariance;
        assert!((c[0][1] - c[1][0]).abs() < 1e-12);
        assert!(c[0][0] >= 0.0 && c[1][1] >= 0.0);
        assert!(c[0][0] * c[1][1] - c[0][1] * c[0][1] >= -1e-12);
        assert!(report.v_hat_direction.is_unit(1e-12));
    }
}

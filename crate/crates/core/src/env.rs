//! Random environments built from a marked Poisson bump field.
//!
//! The drift at `x` is `base_drift + Σ m_i φ(|x − ξ_i| / ρ)` with `ρ = R/2`,
//! where `{ξ_i}` is a homogeneous Poisson process generated lazily per
//! lattice cell of side `R` and `m_i` are i.i.d. marks. The result is
//! projected radially onto the ball of radius `drift_bound`. Because `φ` is
//! supported in the unit ball, the field on a set `F` only depends on the
//! Poisson points within `R/2` of `F`.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{require_unit, FieldError, Result};
use crate::rng::{cell_stream, StreamTag};
use crate::stats::MeanAccumulator;
use crate::vector::{Vector, MAX_DIM};
use crate::Error;

/// Upper bound on `sup_r |φ'(r)|` for the unit bump `φ(r) = exp(1 − 1/(1 − r²))`.
pub const BUMP_GRADIENT_BOUND: f64 = 2.1704;

/// `∫_{|z|<1} φ(|z|) dz` for d = 1, 2, 3.
const BUMP_INTEGRAL: [f64; MAX_DIM] = [1.206_900_3, 1.268_112_2, 1.199_004_0];

/// Cells whose Poisson count would exceed the cap have probability below this.
pub const POISSON_TAIL_TOLERANCE: f64 = 1e-10;

/// Smooth bump with `φ(0) = 1`, supported in `[0, 1)`.
#[inline]
pub fn bump(r: f64) -> f64 {
    if r >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - r * r)).exp()
    }
}

/// Law of the bump marks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AmplitudeLaw {
    Constant { value: Vector },
    UniformBall { center: Vector, radius: f64 },
    UniformSegment { from: Vector, to: Vector },
}

impl AmplitudeLaw {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vector {
        match self {
            AmplitudeLaw::Constant { value } => *value,
            AmplitudeLaw::UniformBall { center, radius } => {
                let d = center.dim();
                loop {
                    let mut v = Vector::zeros(d);
                    for i in 0..d {
                        v[i] = rng.random::<f64>() * 2.0 - 1.0;
                    }
                    if v.norm_sq() <= 1.0 {
                        return *center + v * *radius;
                    }
                }
            }
            AmplitudeLaw::UniformSegment { from, to } => {
                let t: f64 = rng.random();
                *from + (*to - *from) * t
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            AmplitudeLaw::Constant { value } => value.dim(),
            AmplitudeLaw::UniformBall { center, .. } => center.dim(),
            AmplitudeLaw::UniformSegment { from, .. } => from.dim(),
        }
    }

    /// Largest mark magnitude in the support.
    pub fn max_norm(&self) -> f64 {
        match self {
            AmplitudeLaw::Constant { value } => value.norm(),
            AmplitudeLaw::UniformBall { center, radius } => center.norm() + radius,
            AmplitudeLaw::UniformSegment { from, to } => from.norm().max(to.norm()),
        }
    }

    /// Upper bound on `E|m|`.
    pub fn mean_norm_bound(&self) -> f64 {
        match self {
            AmplitudeLaw::Constant { value } => value.norm(),
            AmplitudeLaw::UniformBall { center, radius } => {
                let d = center.dim() as f64;
                center.norm() + radius * d / (d + 1.0)
            }
            AmplitudeLaw::UniformSegment { from, to } => {
                let n = 1024;
                (0..n)
                    .map(|i| (*from + (*to - *from) * ((i as f64 + 0.5) / n as f64)).norm())
                    .sum::<f64>()
                    / n as f64
            }
        }
    }

    fn validate(&self, field: &str, dim: usize, errors: &mut Vec<FieldError>) {
        if self.dim() != dim {
            errors.push(FieldError::new(
                field,
                format!("mark dimension {} differs from dimension {dim}", self.dim()),
            ));
        }
        match self {
            AmplitudeLaw::UniformBall { center, radius } => {
                if !(radius.is_finite() && *radius >= 0.0) {
                    errors.push(FieldError::new(field, "radius must be finite and >= 0"));
                }
                if !center.is_finite() {
                    errors.push(FieldError::new(field, "center must be finite"));
                }
            }
            AmplitudeLaw::UniformSegment { from, to } => {
                if from.dim() != to.dim() {
                    errors.push(FieldError::new(field, "segment endpoints differ in dimension"));
                }
                if !(from.is_finite() && to.is_finite()) {
                    errors.push(FieldError::new(field, "segment endpoints must be finite"));
                }
            }
            AmplitudeLaw::Constant { value } => {
                if !value.is_finite() {
                    errors.push(FieldError::new(field, "value must be finite"));
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    Identity,
    ScalarField,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub dimension: usize,
    pub range: f64,
    pub drift_bound: f64,
    pub lipschitz_K: f64,
    pub ellipticity_nu: f64,
    pub base_drift: Vector,
    pub bump_intensity: f64,
    pub bump_amplitude_law: AmplitudeLaw,
    pub sigma_mode: SigmaMode,
    pub master_seed: u64,
}

impl EnvironmentSpec {
    /// Environment with no bumps: `b ≡ base_drift`, `σ = Id`.
    pub fn constant(base_drift: Vector, range: f64, master_seed: u64) -> Self {
        let d = base_drift.dim();
        Self {
            dimension: d,
            range,
            drift_bound: base_drift.norm().max(1.0),
            lipschitz_K: 1.0,
            ellipticity_nu: 1.0,
            base_drift,
            bump_intensity: 0.0,
            bump_amplitude_law: AmplitudeLaw::Constant {
                value: Vector::zeros(d),
            },
            sigma_mode: SigmaMode::Identity,
            master_seed,
        }
    }

    pub fn bump_radius(&self) -> f64 {
        0.5 * self.range
    }

    /// Expected number of Poisson points per lattice cell.
    pub fn mean_cell_count(&self) -> f64 {
        self.bump_intensity * self.range.powi(self.dimension as i32)
    }

    /// Largest count a cell can hold; higher counts have total probability
    /// below [`POISSON_TAIL_TOLERANCE`] and are truncated.
    pub fn cell_count_cap(&self) -> usize {
        poisson_cap(self.mean_cell_count())
    }

    /// Sure bound on the Lipschitz constant of the drift field.
    ///
    /// A ball of radius `R/2` meets at most `2^d` cells, each holding at most
    /// `cell_count_cap()` points, and the radial clip is non-expansive.
    pub fn lipschitz_bound(&self) -> f64 {
        if self.bump_intensity == 0.0 {
            return 0.0;
        }
        let cells = (1usize << self.dimension) as f64;
        cells
            * self.cell_count_cap() as f64
            * self.bump_amplitude_law.max_norm()
            * BUMP_GRADIENT_BOUND
            / self.bump_radius()
    }

    /// Upper bound on `E|b(0, ω)|` before clipping.
    pub fn expected_field_magnitude(&self) -> f64 {
        let d = self.dimension.clamp(1, MAX_DIM);
        self.base_drift.norm()
            + self.bump_intensity
                * self.bump_radius().powi(d as i32)
                * BUMP_INTEGRAL[d - 1]
                * self.bump_amplitude_law.mean_norm_bound()
    }

    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = Vec::new();
        let f = |name: &str| format!("environment.{name}");
        if !(1..=MAX_DIM).contains(&self.dimension) {
            errors.push(FieldError::new(
                f("dimension"),
                format!("must be in 1..={MAX_DIM}"),
            ));
            return errors;
        }
        if !(self.range.is_finite() && self.range > 0.0) {
            errors.push(FieldError::new(f("range"), "must be > 0"));
        }
        if !(self.drift_bound.is_finite() && self.drift_bound > 0.0) {
            errors.push(FieldError::new(f("drift_bound"), "must be > 0"));
        }
        if !(self.lipschitz_K.is_finite() && self.lipschitz_K > 0.0) {
            errors.push(FieldError::new(f("lipschitz_K"), "must be > 0"));
        }
        if !(self.ellipticity_nu.is_finite() && self.ellipticity_nu >= 1.0) {
            errors.push(FieldError::new(f("ellipticity_nu"), "must be >= 1"));
        }
        if !(self.bump_intensity.is_finite() && self.bump_intensity >= 0.0) {
            errors.push(FieldError::new(f("bump_intensity"), "must be >= 0"));
        }
        if self.base_drift.dim() != self.dimension {
            errors.push(FieldError::new(
                f("base_drift"),
                format!("has {} components, expected {}", self.base_drift.dim(), self.dimension),
            ));
        } else if !(self.base_drift.norm() <= self.drift_bound) {
            errors.push(FieldError::new(
                f("base_drift"),
                format!(
                    "|base_drift| = {} exceeds drift_bound {}",
                    self.base_drift.norm(),
                    self.drift_bound
                ),
            ));
        }
        self.bump_amplitude_law
            .validate(&f("bump_amplitude_law"), self.dimension, &mut errors);
        if !errors.is_empty() {
            return errors;
        }
        let bound = self.lipschitz_bound();
        if bound > self.lipschitz_K {
            errors.push(FieldError::new(
                f("lipschitz_K"),
                format!(
                    "analytic Lipschitz bound 2^d * cap * max|m| * sup|phi'| / (R/2) = {bound:.4} exceeds lipschitz_K = {}; reduce bump_amplitude_law or bump_intensity",
                    self.lipschitz_K
                ),
            ));
        }
        let magnitude = self.expected_field_magnitude();
        if magnitude > 0.8 * self.drift_bound {
            errors.push(FieldError::new(
                f("drift_bound"),
                format!(
                    "expected field magnitude bound {magnitude:.4} exceeds 0.8 * drift_bound = {:.4}; radial clipping would be active",
                    0.8 * self.drift_bound
                ),
            ));
        }
        errors
    }

    pub fn validated(self) -> Result<Arc<Self>> {
        let errors = self.validate();
        if errors.is_empty() {
            Ok(Arc::new(self))
        } else {
            Err(Error::Validation(errors))
        }
    }

    /// Same environment law with drift amplitudes (base and marks) scaled.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.base_drift = out.base_drift * factor;
        out.bump_amplitude_law = match &self.bump_amplitude_law {
            AmplitudeLaw::Constant { value } => AmplitudeLaw::Constant {
                value: *value * factor,
            },
            AmplitudeLaw::UniformBall { center, radius } => AmplitudeLaw::UniformBall {
                center: *center * factor,
                radius: radius * factor.abs(),
            },
            AmplitudeLaw::UniformSegment { from, to } => AmplitudeLaw::UniformSegment {
                from: *from * factor,
                to: *to * factor,
            },
        };
        out
    }
}

fn poisson_cap(mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let mut p = (-mean).exp();
    let mut cdf = p;
    let mut n = 0usize;
    while 1.0 - cdf > POISSON_TAIL_TOLERANCE && n < 10_000 {
        n += 1;
        p *= mean / n as f64;
        cdf += p;
    }
    n.max(1)
}

/// One Poisson point with its marks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub center: Vector,
    pub mark: Vector,
    /// Scalar mark in [-1, 1] for the diffusion coefficient field.
    pub sigma_mark: f64,
}

/// One sample ω of the environment law.
#[derive(Debug, Clone)]
pub struct Environment {
    spec: Arc<EnvironmentSpec>,
    env_index: u64,
    cap: usize,
    mean_count: f64,
}

impl Environment {
    pub fn new(spec: Arc<EnvironmentSpec>, env_index: u64) -> Self {
        let cap = spec.cell_count_cap();
        let mean_count = spec.mean_cell_count();
        Self {
            spec,
            env_index,
            cap,
            mean_count,
        }
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn shared_spec(&self) -> &Arc<EnvironmentSpec> {
        &self.spec
    }

    pub fn env_index(&self) -> u64 {
        self.env_index
    }

    pub fn dim(&self) -> usize {
        self.spec.dimension
    }

    /// Poisson points of the lattice cell with integer coordinates `cell`.
    pub fn cell_bumps(&self, cell: &[i64]) -> Vec<Bump> {
        let mut out = Vec::new();
        self.fill_cell(cell, &mut out);
        out
    }

    fn fill_cell(&self, cell: &[i64], out: &mut Vec<Bump>) {
        out.clear();
        if self.mean_count == 0.0 {
            return;
        }
        let spec = &*self.spec;
        let mut rng = cell_stream(spec.master_seed, StreamTag::DriftCell, self.env_index, cell);
        let u: f64 = rng.random();
        let mut k = 0usize;
        let mut p = (-self.mean_count).exp();
        let mut cdf = p;
        while u > cdf && k < self.cap {
            k += 1;
            p *= self.mean_count / k as f64;
            cdf += p;
        }
        let d = spec.dimension;
        for _ in 0..k {
            let mut center = Vector::zeros(d);
            for (i, &c) in cell.iter().enumerate() {
                center[i] = (c as f64 + rng.random::<f64>()) * spec.range;
            }
            let mark = spec.bump_amplitude_law.sample(&mut rng);
            out.push(Bump {
                center,
                mark,
                sigma_mark: 0.0,
            });
        }
        if spec.sigma_mode == SigmaMode::ScalarField {
            let mut srng =
                cell_stream(spec.master_seed, StreamTag::SigmaCell, self.env_index, cell);
            for b in out.iter_mut() {
                b.sigma_mark = srng.random::<f64>() * 2.0 - 1.0;
            }
        }
    }

    /// Cells whose points can influence the field at `x`.
    fn for_each_cell_near(&self, x: &Vector, mut f: impl FnMut(&[i64])) {
        let d = self.dim();
        let r = self.spec.range;
        let rho = self.spec.bump_radius();
        let mut lo = [0i64; MAX_DIM];
        let mut hi = [0i64; MAX_DIM];
        for i in 0..d {
            lo[i] = ((x[i] - rho) / r).floor() as i64;
            hi[i] = ((x[i] + rho) / r).floor() as i64;
        }
        let mut cur = lo;
        loop {
            f(&cur[..d]);
            let mut axis = 0;
            loop {
                if axis == d {
                    return;
                }
                if cur[axis] < hi[axis] {
                    cur[axis] += 1;
                    break;
                }
                cur[axis] = lo[axis];
                axis += 1;
            }
        }
    }

    /// All Poisson points within distance `R/2` of `x`.
    pub fn bumps_near(&self, x: &Vector) -> Vec<Bump> {
        let rho = self.spec.bump_radius();
        let mut out = Vec::new();
        let mut buf = Vec::new();
        self.for_each_cell_near(x, |cell| {
            self.fill_cell(cell, &mut buf);
            out.extend(buf.iter().filter(|b| b.center.distance(x) < rho).copied());
        });
        out
    }

    /// Drift computed from an explicit point set.
    pub fn drift_from_bumps<'b>(&self, x: &Vector, bumps: impl IntoIterator<Item = &'b Bump>) -> Vector {
        let rho = self.spec.bump_radius();
        let mut v = self.spec.base_drift;
        for b in bumps {
            let w = bump(b.center.distance(x) / rho);
            if w > 0.0 {
                v += b.mark * w;
            }
        }
        self.clip(v)
    }

    #[inline]
    fn clip(&self, v: Vector) -> Vector {
        let n = v.norm();
        if n > self.spec.drift_bound {
            v * (self.spec.drift_bound / n)
        } else {
            v
        }
    }

    /// `b(x, ω)`.
    pub fn drift(&self, x: &Vector) -> Vector {
        self.probe().drift(x)
    }

    /// Scalar `s(x, ω)` with `σ(x, ω) = s(x, ω) Id`.
    pub fn sigma_scale(&self, x: &Vector) -> f64 {
        self.probe().sigma_scale(x)
    }

    /// `σ(x, ω)` as a dense row-major matrix.
    pub fn sigma(&self, x: &Vector) -> Vec<Vec<f64>> {
        let s = self.sigma_scale(x);
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|j| if i == j { s } else { 0.0 }).collect())
            .collect()
    }

    /// Cached evaluator for repeated queries along a path.
    pub fn probe(&self) -> EnvProbe<'_> {
        EnvProbe::new(self)
    }
}

const CACHE_SLOTS: usize = 64;

struct CacheSlot {
    key: [i64; MAX_DIM],
    valid: bool,
    bumps: Vec<Bump>,
}

/// Evaluates one environment with a small direct-mapped cache of cells.
pub struct EnvProbe<'a> {
    env: &'a Environment,
    slots: Vec<CacheSlot>,
}

impl<'a> EnvProbe<'a> {
    fn new(env: &'a Environment) -> Self {
        let slots = if env.mean_count == 0.0 {
            Vec::new()
        } else {
            (0..CACHE_SLOTS)
                .map(|_| CacheSlot {
                    key: [0; MAX_DIM],
                    valid: false,
                    bumps: Vec::new(),
                })
                .collect()
        };
        Self { env, slots }
    }

    pub fn env(&self) -> &'a Environment {
        self.env
    }

    fn with_bumps_near(&mut self, x: &Vector, mut f: impl FnMut(&Bump)) {
        if self.slots.is_empty() {
            return;
        }
        let env = self.env;
        let slots = &mut self.slots;
        env.for_each_cell_near(x, |cell| {
            let mut key = [0i64; MAX_DIM];
            key[..cell.len()].copy_from_slice(cell);
            let h = crate::rng::mix(&[key[0] as u64, key[1] as u64, key[2] as u64]);
            let slot = &mut slots[(h as usize) & (CACHE_SLOTS - 1)];
            if !slot.valid || slot.key != key {
                env.fill_cell(cell, &mut slot.bumps);
                slot.key = key;
                slot.valid = true;
            }
            for b in &slot.bumps {
                f(b);
            }
        });
    }

    pub fn drift(&mut self, x: &Vector) -> Vector {
        let rho = self.env.spec.bump_radius();
        let mut v = self.env.spec.base_drift;
        self.with_bumps_near(x, |b| {
            let w = bump(b.center.distance(x) / rho);
            if w > 0.0 {
                v += b.mark * w;
            }
        });
        self.env.clip(v)
    }

    pub fn sigma_scale(&mut self, x: &Vector) -> f64 {
        let spec = &*self.env.spec;
        if spec.sigma_mode == SigmaMode::Identity {
            return 1.0;
        }
        let rho = spec.bump_radius();
        let root = spec.ellipticity_nu.sqrt();
        let mut s = 0.0;
        self.with_bumps_near(x, |b| {
            s += b.sigma_mark * bump(b.center.distance(x) / rho);
        });
        (1.0 + (root - 1.0) * s).clamp(1.0 / root, root)
    }

    /// Drift and diffusion scale at `x` in one pass.
    pub fn coefficients(&mut self, x: &Vector) -> (Vector, f64) {
        if self.env.spec.sigma_mode == SigmaMode::Identity {
            return (self.drift(x), 1.0);
        }
        let spec = &*self.env.spec;
        let rho = spec.bump_radius();
        let root = spec.ellipticity_nu.sqrt();
        let mut v = spec.base_drift;
        let mut s = 0.0;
        self.with_bumps_near(x, |b| {
            let w = bump(b.center.distance(x) / rho);
            if w > 0.0 {
                v += b.mark * w;
                s += b.sigma_mark * w;
            }
        });
        (
            self.env.clip(v),
            (1.0 + (root - 1.0) * s).clamp(1.0 / root, root),
        )
    }
}

/// Ensemble estimates of `E[(b(0,ω)·l)_+]` and `E[(b(0,ω)·l)_−]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignSplit {
    pub mean_plus: f64,
    pub se_plus: f64,
    pub mean_minus: f64,
    pub se_minus: f64,
    pub n_env: usize,
}

pub fn sign_split_moments(spec: &Arc<EnvironmentSpec>, l: &Vector, n_env: usize) -> Result<SignSplit> {
    require_unit("l", l)?;
    if n_env < 2 {
        return Err(Error::invalid("n_env", "need at least 2 environments"));
    }
    let origin = Vector::zeros(spec.dimension);
    let mut plus = MeanAccumulator::default();
    let mut minus = MeanAccumulator::default();
    for j in 0..n_env as u64 {
        let p = Environment::new(spec.clone(), j).drift(&origin).dot(l);
        plus.push(p.max(0.0));
        minus.push((-p).max(0.0));
    }
    Ok(SignSplit {
        mean_plus: plus.mean(),
        se_plus: plus.standard_error(),
        mean_minus: minus.mean(),
        se_minus: minus.standard_error(),
        n_env,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{ks_two_sample, MeanAccumulator};
    use rand::SeedableRng;

    pub(crate) fn bumpy_spec(d: usize) -> EnvironmentSpec {
        EnvironmentSpec {
            dimension: d,
            range: 1.0,
            drift_bound: 2.0,
            lipschitz_K: 200.0,
            ellipticity_nu: 2.0,
            base_drift: Vector::basis(d, 0) * 0.3,
            bump_intensity: 0.8,
            bump_amplitude_law: AmplitudeLaw::UniformBall {
                center: Vector::zeros(d),
                radius: 0.6,
            },
            sigma_mode: SigmaMode::ScalarField,
            master_seed: 99,
        }
    }

    fn sample_points(n: usize, d: usize, scale: f64, seed: u64) -> Vec<Vector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut v = Vector::zeros(d);
                for i in 0..d {
                    v[i] = (rng.random::<f64>() - 0.5) * scale;
                }
                v
            })
            .collect()
    }

    #[test]
    fn bump_gradient_constant_is_an_upper_bound() {
        let mut best: f64 = 0.0;
        let n = 2_000_000;
        for i in 1..n {
            let r = i as f64 / n as f64;
            let g = bump(r) * 2.0 * r / (1.0 - r * r).powi(2);
            best = best.max(g);
        }
        assert!(best <= BUMP_GRADIENT_BOUND);
        assert!(BUMP_GRADIENT_BOUND - best < 1e-3);
    }

    #[test]
    fn bump_integrals_match_quadrature() {
        let n = 200_000;
        let dr = 1.0 / n as f64;
        let mut i1 = 0.0;
        let mut i2 = 0.0;
        let mut i3 = 0.0;
        for k in 0..n {
            let r = (k as f64 + 0.5) * dr;
            let w = bump(r) * dr;
            i1 += 2.0 * w;
            i2 += 2.0 * std::f64::consts::PI * r * w;
            i3 += 4.0 * std::f64::consts::PI * r * r * w;
        }
        for (got, want) in [i1, i2, i3].iter().zip(BUMP_INTEGRAL) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_intensity_gives_constant_drift() {
        let v0 = Vector::from_slice(&[0.4, -0.1]);
        let spec = Arc::new(EnvironmentSpec::constant(v0, 1.0, 3));
        let env = Environment::new(spec, 17);
        for x in sample_points(100, 2, 50.0, 1) {
            assert_eq!(env.drift(&x), v0);
            assert_eq!(env.sigma_scale(&x), 1.0);
        }
    }

    #[test]
    fn queries_are_bit_identical() {
        let spec = Arc::new(bumpy_spec(2));
        let env = Environment::new(spec.clone(), 5);
        let mut probe = env.probe();
        let pts = sample_points(1000, 2, 20.0, 2);
        let first: Vec<_> = pts.iter().map(|x| probe.coefficients(x)).collect();
        let again = Environment::new(spec, 5);
        for (x, (b, s)) in pts.iter().zip(&first) {
            assert_eq!(again.drift(x).to_vec(), b.to_vec());
            assert_eq!(again.sigma_scale(x).to_bits(), s.to_bits());
        }
    }

    #[test]
    fn drift_is_bounded_and_lipschitz() {
        let spec = Arc::new(bumpy_spec(2));
        assert!(spec.validate().is_empty(), "{:?}", spec.validate());
        let env = Environment::new(spec.clone(), 1);
        let pts = sample_points(10_000, 2, 30.0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut max_ratio: f64 = 0.0;
        for x in &pts {
            let b = env.drift(x);
            assert!(b.norm() <= spec.drift_bound);
            let mut dx = Vector::zeros(2);
            for i in 0..2 {
                dx[i] = (rng.random::<f64>() - 0.5) * spec.range;
            }
            let y = *x + dx;
            let ratio = (env.drift(&y) - b).norm() / dx.norm();
            max_ratio = max_ratio.max(ratio);
        }
        assert!(max_ratio <= spec.lipschitz_K);
        assert!(max_ratio <= spec.lipschitz_bound());
    }

    #[test]
    fn sigma_eigenvalues_respect_ellipticity() {
        let spec = Arc::new(bumpy_spec(2));
        let env = Environment::new(spec.clone(), 8);
        let nu = spec.ellipticity_nu;
        let mut varied = false;
        for x in sample_points(1000, 2, 20.0, 5) {
            let m = env.sigma(&x);
            let s2 = m[0][0] * m[0][0];
            assert_eq!(m[0][1], 0.0);
            assert!(s2 >= 1.0 / nu - 1e-12 && s2 <= nu + 1e-12);
            varied |= (m[0][0] - 1.0).abs() > 1e-6;
        }
        assert!(varied);
    }

    #[test]
    fn identity_sigma_mode() {
        let mut s = bumpy_spec(3);
        s.sigma_mode = SigmaMode::Identity;
        let env = Environment::new(Arc::new(s), 0);
        let m = env.sigma(&Vector::from_slice(&[0.3, 1.0, -2.0]));
        assert_eq!(m, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    }

    #[test]
    fn field_depends_only_on_nearby_points() {
        let spec = Arc::new(bumpy_spec(2));
        for j in 0..50 {
            let env = Environment::new(spec.clone(), j);
            let x = Vector::from_slice(&[0.2, 0.1]);
            let xp = Vector::from_slice(&[1.5, 0.3]);
            let rho = spec.bump_radius();
            let near_x = env.bumps_near(&x);
            let kept: Vec<Bump> = near_x
                .iter()
                .filter(|b| b.center.distance(&xp) >= rho)
                .copied()
                .collect();
            assert_eq!(kept.len(), near_x.len());
            assert_eq!(env.drift_from_bumps(&x, &kept), env.drift(&x));
        }
    }

    #[test]
    fn stationary_under_shifts() {
        let spec = Arc::new(bumpy_spec(2));
        let l = Vector::basis(2, 0);
        let z = Vector::from_slice(&[13.37, -4.2]);
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut ma = MeanAccumulator::default();
        let mut mb = MeanAccumulator::default();
        for j in 0..10_000u64 {
            let env = Environment::new(spec.clone(), j);
            let u = env.drift(&Vector::zeros(2)).dot(&l);
            let v = env.drift(&z).dot(&l);
            a.push(u);
            b.push(v);
            ma.push(u);
            mb.push(v);
        }
        let se = (ma.standard_error().powi(2) + mb.standard_error().powi(2)).sqrt();
        assert!((ma.mean() - mb.mean()).abs() < 3.0 * se);
        let ks = ks_two_sample(&a, &b);
        assert!(ks.p_value > 0.01, "KS p = {}", ks.p_value);
    }

    #[test]
    fn separated_points_are_uncorrelated() {
        let spec = Arc::new(bumpy_spec(2));
        let l = Vector::basis(2, 0);
        let z = Vector::from_slice(&[1.3, 0.4]);
        let n = 10_000;
        let (mut xs, mut ys) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for j in 0..n as u64 {
            let env = Environment::new(spec.clone(), j);
            xs.push(env.drift(&Vector::zeros(2)).dot(&l));
            ys.push(env.drift(&z).dot(&l));
        }
        let r = crate::stats::pearson(&xs, &ys);
        // Under independence, r has standard error ≈ 1/√n.
        assert!(r.abs() < 4.0 / (n as f64).sqrt(), "r = {r}");
    }

    #[test]
    fn sign_split_constant_fields() {
        let l = Vector::basis(2, 0);
        let up = Arc::new(EnvironmentSpec::constant(l * 0.7, 1.0, 0));
        let s = sign_split_moments(&up, &l, 10).unwrap();
        assert_eq!((s.mean_plus, s.mean_minus), (0.7, 0.0));
        let down = Arc::new(EnvironmentSpec::constant(l * -0.7, 1.0, 0));
        let s = sign_split_moments(&down, &l, 10).unwrap();
        assert_eq!((s.mean_plus, s.mean_minus), (0.0, 0.7));
    }

    #[test]
    fn sign_split_symmetric_law() {
        let mut spec = bumpy_spec(2);
        spec.base_drift = Vector::zeros(2);
        let spec = Arc::new(spec);
        let l = Vector::basis(2, 0);
        let s = sign_split_moments(&spec, &l, 20_000).unwrap();
        let se = (s.se_plus.powi(2) + s.se_minus.powi(2)).sqrt();
        assert!((s.mean_plus - s.mean_minus).abs() < 3.0 * se);
        assert!(s.mean_plus > 0.0);
    }

    #[test]
    fn sign_split_rejects_non_unit_direction() {
        let spec = Arc::new(bumpy_spec(2));
        let l = Vector::from_slice(&[1.0, 1e-5]);
        assert!(sign_split_moments(&spec, &l, 10).is_err());
        assert!(sign_split_moments(&spec, &Vector::basis(2, 0), 1).is_err());
    }

    #[test]
    fn validation_rejects_steep_bumps() {
        let mut spec = bumpy_spec(2);
        spec.lipschitz_K = 1.0;
        let errors = spec.validate();
        assert!(errors.iter().any(|e| e.field == "environment.lipschitz_K"));
        assert!(errors[0].reason.contains("analytic Lipschitz bound"));
    }

    #[test]
    fn validation_rejects_oversized_base_drift() {
        let mut spec = bumpy_spec(2);
        spec.base_drift = Vector::from_slice(&[3.0, 0.0]);
        assert!(spec
            .validate()
            .iter()
            .any(|e| e.field == "environment.base_drift"));
    }
}

//! Estimators, confidence intervals and two-sample tests shared by the
//! experiment modules.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{Beta, ChiSquared, ContinuousCDF, Normal};

use crate::vector::Vector;

/// Welford running mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanAccumulator {
    n: u64,
    mean: f64,
    m2: f64,
}

impl MeanAccumulator {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.mean
        }
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn standard_error(&self) -> f64 {
        if self.n < 2 {
            f64::INFINITY
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for MeanAccumulator {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = MeanAccumulator::default();
        for x in iter {
            acc.push(x);
        }
        acc
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

pub fn normal_sf(z: f64) -> f64 {
    1.0 - Normal::new(0.0, 1.0).unwrap().cdf(z)
}

/// Two-sided confidence interval for a binomial proportion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.high - self.low)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }
}

/// Wilson score interval at confidence `1 − alpha`.
pub fn wilson(successes: u64, n: u64, alpha: f64) -> Interval {
    if n == 0 {
        return Interval { low: 0.0, high: 1.0 };
    }
    let z = normal_quantile(1.0 - alpha / 2.0);
    let nf = n as f64;
    let p = successes as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let center = (p + z * z / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    Interval {
        low: (center - half).max(0.0),
        high: (center + half).min(1.0),
    }
}

/// Exact one-sided upper confidence bound (Clopper–Pearson) at level `1 − alpha`.
pub fn clopper_pearson_upper(successes: u64, n: u64, alpha: f64) -> f64 {
    if successes >= n {
        return 1.0;
    }
    if successes == 0 {
        // Closed form of the Beta(1, n) quantile.
        return 1.0 - alpha.powf(1.0 / n as f64);
    }
    Beta::new(successes as f64 + 1.0, (n - successes) as f64)
        .unwrap()
        .inverse_cdf(1.0 - alpha)
}

/// Exact one-sided lower confidence bound (Clopper–Pearson) at level `1 − alpha`.
pub fn clopper_pearson_lower(successes: u64, n: u64, alpha: f64) -> f64 {
    if successes == 0 {
        return 0.0;
    }
    if successes >= n {
        return alpha.powf(1.0 / n as f64);
    }
    Beta::new(successes as f64, (n - successes + 1) as f64)
        .unwrap()
        .inverse_cdf(alpha)
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(statistic: f64, dof: f64) -> f64 {
    1.0 - ChiSquared::new(dof).unwrap().cdf(statistic)
}

/// Pearson chi-square goodness of fit against equal cell probabilities.
pub fn chi_square_uniform(counts: &[u64]) -> TestResult {
    let n: u64 = counts.iter().sum();
    let expected = n as f64 / counts.len() as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    TestResult {
        statistic: stat,
        p_value: chi_square_sf(stat, (counts.len() - 1) as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value
/// (Stephens' small-sample correction).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> TestResult {
    assert!(!a.is_empty() && !b.is_empty(), "empty sample");
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = xs[i].min(ys[j]);
        while i < n && xs[i] <= v {
            i += 1;
        }
        while j < m && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let sq = ne.sqrt();
    TestResult {
        statistic: d,
        p_value: kolmogorov_sf((sq + 0.12 + 0.11 / sq) * d),
    }
}

/// Lag-1 correlation of `pairs` with a permutation p-value (two-sided).
pub fn correlation_permutation_test(
    pairs: &[(f64, f64)],
    permutations: usize,
    rng: &mut ChaCha8Rng,
) -> TestResult {
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let observed = pearson(&xs, &ys);
    let mut exceed = 0usize;
    for _ in 0..permutations {
        ys.shuffle(rng);
        if pearson(&xs, &ys).abs() >= observed.abs() {
            exceed += 1;
        }
    }
    TestResult {
        statistic: observed,
        p_value: (exceed + 1) as f64 / (permutations + 1) as f64,
    }
}

/// Energy-distance two-sample permutation test on point clouds.
///
/// The statistic is `2 E|X−Y| − E|X−X'| − E|Y−Y'|` with V-statistic means.
/// Pairwise distances are computed once; each permutation then only
/// re-sums the within-group blocks.
pub fn energy_distance_test(
    a: &[Vector],
    b: &[Vector],
    permutations: usize,
    rng: &mut ChaCha8Rng,
) -> TestResult {
    let n = a.len();
    let m = b.len();
    assert!(n > 0 && m > 0, "empty sample");
    let points: Vec<Vector> = a.iter().chain(b.iter()).copied().collect();
    let total = n + m;
    // Row-major strict upper triangle.
    let mut dist = Vec::with_capacity(total * (total - 1) / 2);
    for i in 0..total {
        for j in (i + 1)..total {
            dist.push(points[i].distance(&points[j]) as f32);
        }
    }
    // Full row sums r_i = Σ_{j≠i} d_ij give Σ_{i<j} d_ij (a_i + a_j) = Σ_i a_i r_i,
    // so only the within-A block needs a pass per permutation.
    let mut row_sum = vec![0.0f64; total];
    let mut k = 0usize;
    for i in 0..total {
        for j in (i + 1)..total {
            let d = dist[k] as f64;
            row_sum[i] += d;
            row_sum[j] += d;
            k += 1;
        }
    }
    let grand: f64 = row_sum.iter().sum::<f64>() / 2.0;
    let (nf, mf) = (n as f64, m as f64);
    let statistic_for = |in_a: &[f32]| -> f64 {
        let mut s_aa = 0.0f64;
        let mut touch = 0.0f64;
        let mut k = 0usize;
        for i in 0..total {
            let len = total - i - 1;
            if in_a[i] != 0.0 {
                touch += row_sum[i];
                s_aa += masked_sum(&dist[k..k + len], &in_a[i + 1..]) as f64;
            }
            k += len;
        }
        let s_bb = grand - touch + s_aa;
        let s_ab = grand - s_aa - s_bb;
        2.0 * s_ab / (nf * mf) - 2.0 * s_aa / (nf * nf) - 2.0 * s_bb / (mf * mf)
    };
    let mut labels: Vec<f32> = (0..total).map(|i| if i < n { 1.0 } else { 0.0 }).collect();
    let observed = statistic_for(&labels);
    let mut exceed = 0usize;
    for _ in 0..permutations {
        labels.shuffle(rng);
        if statistic_for(&labels) >= observed {
            exceed += 1;
        }
    }
    TestResult {
        statistic: observed * (n * m) as f64 / total as f64,
        p_value: (exceed + 1) as f64 / (permutations + 1) as f64,
    }
}

/// `Σ d_j a_j` in eight independent lanes so the loop vectorizes.
fn masked_sum(d: &[f32], a: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let chunks = d.len() / 8;
    for c in 0..chunks {
        let dc = &d[c * 8..c * 8 + 8];
        let ac = &a[c * 8..c * 8 + 8];
        for j in 0..8 {
            lanes[j] += dc[j] * ac[j];
        }
    }
    let mut tail = 0.0f32;
    for j in chunks * 8..d.len() {
        tail += d[j] * a[j];
    }
    lanes.iter().sum::<f32>() + tail
}

/// Weighted least squares fit of `y = intercept + slope · x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Model-based standard error of the slope (weights are inverse variances).
    pub slope_se: f64,
}

pub fn weighted_linear_fit(x: &[f64], y: &[f64], w: &[f64]) -> Option<LinearFit> {
    if x.len() < 2 || x.len() != y.len() || x.len() != w.len() {
        return None;
    }
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..x.len() {
        sxx += w[i] * (x[i] - mx) * (x[i] - mx);
        sxy += w[i] * (x[i] - mx) * (y[i] - my);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some(LinearFit {
        slope,
        intercept: my - slope * mx,
        slope_se: (1.0 / sxx).sqrt(),
    })
}

/// Sample covariance matrix of row vectors (divisor n − 1).
pub fn covariance(rows: &[Vector]) -> Vec<Vec<f64>> {
    let d = rows[0].dim();
    let n = rows.len() as f64;
    let mut mean = Vector::zeros(d);
    for r in rows {
        mean += *r;
    }
    mean = mean * (1.0 / n);
    let mut c = vec![vec![0.0; d]; d];
    for r in rows {
        let z = *r - mean;
        for i in 0..d {
            for j in 0..d {
                c[i][j] += z[i] * z[j];
            }
        }
    }
    for row in c.iter_mut() {
        for v in row.iter_mut() {
            *v /= n - 1.0;
        }
    }
    c
}

/// Uniform draw in `[0, 1)` helper kept here so callers need not import `Rng`.
#[inline]
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.random()
}

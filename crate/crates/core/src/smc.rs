//! Particle-population primitives: weights, resampling, jittering kernels
//! and the inner particle-filter step.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::{repair_psd, PreparedObservation};

const MAX_REJECTIONS: usize = 100;

/// `theta[lower] <= theta[upper]`. When a draw violates it the two
/// coordinates are swapped, together with each `carry` pair, which removes
/// label switching between exchangeable factors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderConstraint {
    pub lower: usize,
    pub upper: usize,
    #[serde(default)]
    pub carry: Vec<(usize, usize)>,
}

impl OrderConstraint {
    pub fn new(lower: usize, upper: usize) -> Self {
        Self { lower, upper, carry: vec![] }
    }

    fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        std::iter::once((self.lower, self.upper)).chain(self.carry.iter().copied())
    }
}

/// Compact parameter domain: a box, optionally with ordering constraints.
/// Coordinates with `lo == hi` are fixed and never jittered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    #[serde(default)]
    pub ordered: Vec<OrderConstraint>,
}

impl ParamSpace {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        Self::with_ordering(lo, hi, vec![])
    }

    pub fn with_ordering(lo: Vec<f64>, hi: Vec<f64>, ordered: Vec<OrderConstraint>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::dim("bounds must be non-empty and of equal length"));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::arg("each bound must satisfy lo <= hi and be finite"));
        }
        for (i, j) in ordered.iter().flat_map(|o| o.pairs()) {
            if i >= lo.len() || j >= lo.len() || i == j {
                return Err(Error::arg(format!("bad ordering pair ({i}, {j})")));
            }
            if lo[i] != lo[j] || hi[i] != hi[j] {
                return Err(Error::arg("ordered or swapped coordinates must share bounds"));
            }
        }
        Ok(Self { lo, hi, ordered })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_fixed(&self, j: usize) -> bool {
        self.lo[j] == self.hi[j]
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *l <= *v && *v <= *h)
            && self.ordered.iter().all(|o| theta[o.lower] <= theta[o.upper])
    }

    /// Clamps into the box and swaps violated ordered pairs.
    pub fn project(&self, theta: &mut [f64]) {
        for (j, v) in theta.iter_mut().enumerate() {
            *v = v.clamp(self.lo[j], self.hi[j]);
        }
        self.fix_order(theta);
    }

    fn fix_order(&self, theta: &mut [f64]) {
        for o in &self.ordered {
            if theta[o.lower] > theta[o.upper] {
                for (i, j) in o.pairs() {
                    theta.swap(i, j);
                }
            }
        }
    }

    /// One draw from the uniform prior restricted to the ordering constraints.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut theta: Vec<f64> = (0..self.dim())
            .map(|j| if self.is_fixed(j) { self.lo[j] } else { rng.random_range(self.lo[j]..self.hi[j]) })
            .collect();
        self.fix_order(&mut theta);
        theta
    }

    /// Standard deviations of the uniform prior per coordinate.
    pub fn prior_std(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| (h - l) / 12f64.sqrt()).collect()
    }
}

/// Jittering configuration: discount factor `a`, switching level `V_N` and
/// variance floor `V_f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    pub a: f64,
    pub v_n: f64,
    pub v_f: f64,
}

impl JitterConfig {
    /// Defaults `V_N = N^{-3/2}`, `V_f = V_N / 100`.
    pub fn for_particles(a: f64, n: usize) -> Self {
        let v_n = (n as f64).powf(-1.5);
        Self { a, v_n, v_f: v_n / 100.0 }
    }

    /// `V_N = V_f = 0` switches off the recursive-phase jitter entirely.
    pub fn is_frozen(&self) -> bool {
        self.v_n == 0.0 && self.v_f == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a < 1.0) {
            return Err(Error::arg(format!("discount factor a = {} must lie in (0, 1)", self.a)));
        }
        if self.is_frozen() {
            return Ok(());
        }
        if !(self.v_f > 0.0 && self.v_f < self.v_n && self.v_n.is_finite()) {
            return Err(Error::arg(format!("need 0 < V_f < V_N, got V_f = {}, V_N = {}", self.v_f, self.v_n)));
        }
        Ok(())
    }

    /// `max_j (1 - a^2) cov_jj`, compared against `V_N` to leave the
    /// non-recursive phase.
    pub fn switch_statistic(&self, cov: &DMatrix<f64>) -> f64 {
        let s = 1.0 - self.a * self.a;
        cov.diagonal().iter().fold(0.0f64, |m, v| m.max(s * v))
    }

    /// Per-coordinate kernel-2 variance `clamp((1 - a^2) cov_jj, V_f, V_N)`.
    pub fn kernel2_variance(&self, cov: &DMatrix<f64>) -> Vec<f64> {
        let s = 1.0 - self.a * self.a;
        cov.diagonal().iter().map(|v| (s * v).max(self.v_f).min(self.v_n)).collect()
    }
}

/// Deterministic per-particle random streams keyed by `(seed, step, tag)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    pub step: u64,
    pub tag: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn new(seed: u64, step: u64, tag: u64) -> Self {
        Self { seed, step, tag }
    }

    /// Independent generator for particle `index`.
    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        let mixed = splitmix(self.seed ^ splitmix(self.step.wrapping_mul(0x1_0000).wrapping_add(self.tag)));
        let mut rng = ChaCha8Rng::seed_from_u64(mixed);
        rng.set_stream(index);
        rng
    }
}

/// Weighted mean and covariance `sum w (theta - m)(theta - m)'`.
pub fn cloud_moments(particles: &[Vec<f64>], weights: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = particles.len();
    if n == 0 || weights.len() != n {
        return Err(Error::dim("need one weight per particle and at least one particle"));
    }
    let d = particles[0].len();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::arg("weights must be non-negative with positive sum"));
    }
    let mut mean = DVector::zeros(d);
    for (p, w) in particles.iter().zip(weights) {
        if p.len() != d {
            return Err(Error::dim("particles differ in dimension"));
        }
        for j in 0..d {
            mean[j] += w * p[j];
        }
    }
    mean /= total;
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for (p, w) in particles.iter().zip(weights) {
            for r in 0..d {
                let dr = p[r] - mean[r];
                for c in 0..=r {
                    cov[(r, c)] += w * dr * (p[c] - mean[c]);
                }
            }
        }
        cov /= total;
        for r in 0..d {
            for c in 0..r {
                cov[(c, r)] = cov[(r, c)];
            }
        }
    }
    Ok((mean, cov))
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Symmetric square root of a PSD matrix, after repair.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let fixed = repair_psd(m)?;
    let eig = fixed.symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

fn standard_normals<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Shrinkage kernel with full covariance: each particle moves to
/// `N(a theta + (1 - a) mean, (1 - a^2) cov)` where `(mean, cov)` are the
/// weighted moments of the cloud. Draws outside `space` are rejected as a
/// whole vector up to 100 times, then projected.
pub fn jitter_kernel1(
    particles: &[Vec<f64>],
    weights: &[f64],
    a: f64,
    space: &ParamSpace,
    key: StreamKey,
) -> Result<Vec<Vec<f64>>> {
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::arg(format!("discount factor a = {a} must lie in (0, 1)")));
    }
    let (mean, cov) = cloud_moments(particles, weights)?;
    if mean.len() != space.dim() {
        return Err(Error::dim("particles and parameter space disagree"));
    }
    let root = psd_sqrt(&(cov * (1.0 - a * a)))?;
    let d = space.dim();
    Ok(particles
        .par_iter()
        .enumerate()
        .map(|(i, theta)| {
            let mut rng = key.rng(i as u64);
            let centre = DVector::from_fn(d, |j, _| a * theta[j] + (1.0 - a) * mean[j]);
            let mut draw = centre.as_slice().to_vec();
            for _ in 0..MAX_REJECTIONS {
                let x = &centre + &root * standard_normals(&mut rng, d);
                draw.copy_from_slice(x.as_slice());
                pin_fixed(space, &mut draw);
                if space.contains(&draw) {
                    return draw;
                }
            }
            space.project(&mut draw);
            draw
        })
        .collect())
}

fn pin_fixed(space: &ParamSpace, theta: &mut [f64]) {
    for (j, v) in theta.iter_mut().enumerate() {
        if space.is_fixed(j) {
            *v = space.lo[j];
        }
    }
}

/// Random-walk kernel with per-coordinate variances `variance` (already
/// clamped into `[V_f, V_N]`). Each coordinate is redrawn up to 100 times
/// until it lands inside its bounds, then clamped.
pub fn jitter_kernel2(
    particles: &[Vec<f64>],
    variance: &[f64],
    space: &ParamSpace,
    key: StreamKey,
) -> Result<Vec<Vec<f64>>> {
    if variance.len() != space.dim() {
        return Err(Error::dim("one variance per parameter coordinate is required"));
    }
    if variance.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::arg("jitter variances must be non-negative"));
    }
    let sd: Vec<f64> = variance.iter().map(|v| v.sqrt()).collect();
    Ok(particles
        .par_iter()
        .enumerate()
        .map(|(i, theta)| {
            let mut rng = key.rng(i as u64);
            let mut out = theta.clone();
            for (j, v) in out.iter_mut().enumerate() {
                if space.is_fixed(j) {
                    *v = space.lo[j];
                    continue;
                }
                if sd[j] == 0.0 {
                    continue;
                }
                let (lo, hi) = (space.lo[j], space.hi[j]);
                let mut accepted = None;
                let mut last = theta[j];
                for _ in 0..MAX_REJECTIONS {
                    last = theta[j] + sd[j] * rng.sample::<f64, _>(StandardNormal);
                    if lo <= last && last <= hi {
                        accepted = Some(last);
                        break;
                    }
                }
                *v = accepted.unwrap_or_else(|| last.clamp(lo, hi));
            }
            space.fix_order(&mut out);
            out
        })
        .collect())
}

/// `log sum exp`, with `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().filter(|v| !v.is_nan()).map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalized weights from log-likelihoods. `NaN` counts as `-inf`. When
/// every entry is `-inf` the population is degenerate; the returned error
/// carries step 0 and callers substitute their own step index.
pub fn normalize_log_weights(loglikes: &[f64]) -> Result<Vec<f64>> {
    let max = loglikes.iter().cloned().filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        if max == f64::INFINITY {
            return Err(Error::arg("log-likelihood of +inf"));
        }
        return Err(Error::Degeneracy { step: 0 });
    }
    let mut w: Vec<f64> = loglikes.iter().map(|v| if v.is_nan() { 0.0 } else { (v - max).exp() }).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    Ok(w)
}

fn check_weights(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::arg("empty weight vector"));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::arg("weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::arg("weights sum to zero"));
    }
    Ok(total)
}

/// `n_out` independent categorical draws.
pub fn resample_multinomial<R: Rng + ?Sized>(weights: &[f64], n_out: usize, rng: &mut R) -> Result<Vec<usize>> {
    check_weights(weights)?;
    let dist = WeightedIndex::new(weights).map_err(|e| Error::arg(e.to_string()))?;
    Ok((0..n_out).map(|_| dist.sample(rng)).collect())
}

/// Systematic resampling: one uniform offset, `n_out` evenly spaced points.
pub fn resample_systematic<R: Rng + ?Sized>(weights: &[f64], n_out: usize, rng: &mut R) -> Result<Vec<usize>> {
    let total = check_weights(weights)?;
    let mut out = Vec::with_capacity(n_out);
    if n_out == 0 {
        return Ok(out);
    }
    let step = total / n_out as f64;
    let mut point = rng.random::<f64>() * step;
    let mut cum = weights[0];
    let mut i = 0;
    for _ in 0..n_out {
        while point > cum && i + 1 < weights.len() {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
        point += step;
    }
    Ok(out)
}

/// Resampling scheme used by the estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    #[default]
    Multinomial,
    Systematic,
}

impl Resampling {
    pub fn draw<R: Rng + ?Sized>(&self, weights: &[f64], n_out: usize, rng: &mut R) -> Result<Vec<usize>> {
        match self {
            Resampling::Multinomial => resample_multinomial(weights, n_out, rng),
            Resampling::Systematic => resample_systematic(weights, n_out, rng),
        }
    }
}

/// Sampler for the latent transition `x_k | x_{k-1}`.
pub trait TransitionSampler: Sync {
    fn dim(&self) -> usize;
    fn sample_into<R: Rng + ?Sized>(&self, x_prev: &[f64], rng: &mut R, out: &mut [f64]);
}

impl TransitionSampler for crate::affine::TransitionKernel {
    fn dim(&self) -> usize {
        crate::affine::TransitionKernel::dim(self)
    }

    /// Gaussian draw from the frozen-diffusion moments.
    fn sample_into<R: Rng + ?Sized>(&self, x_prev: &[f64], rng: &mut R, out: &mut [f64]) {
        let d = self.f_diag.len();
        let q = self.covariance(x_prev[0]);
        let root = match q.clone().cholesky() {
            Some(c) => c.l(),
            None => psd_sqrt(&q).unwrap_or_else(|_| DMatrix::zeros(d, d)),
        };
        let z = standard_normals(rng, d);
        let noise = root * z;
        for i in 0..d {
            out[i] = self.f_diag[i] * x_prev[i] + self.offset[i] + noise[i];
        }
    }
}

/// One bootstrap particle-filter step on equally weighted particles stored
/// row-major in `xs` (`M x d`). Propagates through `sampler`, weights by the
/// observation density, resamples back to equal weights and returns the log
/// of `(1/M) sum_j l(x_j)`.
pub fn pf_inner_step<S: TransitionSampler, R: Rng + ?Sized>(
    xs: &mut [f64],
    sampler: &S,
    obs: &PreparedObservation,
    y: &[f64],
    rng: &mut R,
) -> Result<f64> {
    let d = sampler.dim();
    if d == 0 || xs.is_empty() || !xs.len().is_multiple_of(d) || obs.dim() != d || y.len() != obs.n_obs() {
        return Err(Error::dim("particle store, sampler and observation disagree"));
    }
    let m = xs.len() / d;
    let form = obs.residual_form(y);
    let mut moved = vec![0.0; xs.len()];
    let mut logl = Vec::with_capacity(m);
    for j in 0..m {
        let (src, dst) = (&xs[j * d..(j + 1) * d], &mut moved[j * d..(j + 1) * d]);
        sampler.sample_into(src, rng, dst);
        logl.push(form.loglik(dst));
    }
    let lse = log_sum_exp(&logl);
    if !lse.is_finite() {
        return Err(Error::Degeneracy { step: 0 });
    }
    let weights = normalize_log_weights(&logl)?;
    let idx = resample_multinomial(&weights, m, rng)?;
    for (j, src) in idx.iter().enumerate() {
        xs[j * d..(j + 1) * d].copy_from_slice(&moved[src * d..(src + 1) * d]);
    }
    Ok(lse - (m as f64).ln())
}

/// Equal weights of length `n`.
pub fn uniform_weights(n: usize) -> Vec<f64> {
    uniform(n)
}

//! Synthetic data: exact CIR and Gaussian transitions, sub-stepped
//! stochastic-volatility paths, and noisy yield observations.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::affine::{AffineModelSpec, ObservationMap, Regime, TransitionKernel};
use crate::error::{Error, Result};
use crate::kalman::repair_psd;
use crate::model::ModelFamily;
use crate::riccati::SolverSettings;
use crate::smc::TransitionSampler;

/// Business days per year.
pub const DAYS_PER_YEAR: f64 = 252.0;

/// `t_k = k / 252` for `k = 1..=k_steps`.
pub fn daily_times(k_steps: usize) -> Vec<f64> {
    (1..=k_steps).map(|k| k as f64 / DAYS_PER_YEAR).collect()
}

/// Parameters in force from `start_step` (1-based) on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSegment {
    pub start_step: usize,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub family: ModelFamily,
    pub segments: Vec<TruthSegment>,
    /// Latent state at each observation time.
    pub latent: Vec<Vec<f64>>,
}

impl Truth {
    /// Parameters in force at 1-based step `k`.
    pub fn theta_at(&self, k: usize) -> Option<&[f64]> {
        self.segments.iter().rev().find(|s| s.start_step <= k).map(|s| s.theta.as_slice())
    }
}

/// Noisy yields `y_k(tau_l)` at times `t_1 < ... < t_K`; the process starts
/// at `t_0 = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSeries {
    pub times: Vec<f64>,
    pub maturities: Vec<f64>,
    pub y: Vec<DVector<f64>>,
    pub noise_var: f64,
    #[serde(default)]
    pub truth: Option<Truth>,
}

impl ObservationSeries {
    pub fn new(times: Vec<f64>, maturities: Vec<f64>, y: Vec<DVector<f64>>, noise_var: f64) -> Result<Self> {
        let s = Self { times, maturities, y, noise_var, truth: None };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.maturities.is_empty() {
            return Err(Error::arg("at least one maturity is required"));
        }
        if self.maturities.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::arg("maturities must be positive"));
        }
        if self.times.len() != self.y.len() {
            return Err(Error::dim("one observation row per time is required"));
        }
        if self.y.iter().any(|r| r.len() != self.maturities.len()) {
            return Err(Error::dim("observation rows must have one entry per maturity"));
        }
        let mut prev = 0.0;
        for t in &self.times {
            if !(*t > prev) {
                return Err(Error::arg("times must be positive and strictly increasing"));
            }
            prev = *t;
        }
        if !(self.noise_var >= 0.0) {
            return Err(Error::arg("noise variance must be non-negative"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `t_k - t_{k-1}` with `t_0 = 0`.
    pub fn deltas(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.times
            .iter()
            .map(|t| {
                let d = t - prev;
                prev = *t;
                d
            })
            .collect()
    }

    /// Largest step.
    pub fn max_step(&self) -> f64 {
        self.deltas().into_iter().fold(0.0, f64::max)
    }

    /// Distinct step sizes (equal up to 1e-9 relative) and the index of each
    /// step's size, so transition kernels can be built once per distinct step.
    pub fn step_schedule(&self) -> (Vec<f64>, Vec<usize>) {
        let mut distinct: Vec<f64> = vec![];
        let idx = self
            .deltas()
            .into_iter()
            .map(|d| match distinct.iter().position(|v| (v - d).abs() <= 1e-9 * v.abs()) {
                Some(i) => i,
                None => {
                    distinct.push(d);
                    distinct.len() - 1
                }
            })
            .collect();
        (distinct, idx)
    }
}

/// `c * chi2_p(lambda)` via a Poisson mixture of central chi-squares.
pub fn sample_noncentral_chi2<R: Rng + ?Sized>(p: f64, lambda: f64, rng: &mut R) -> f64 {
    let k = if lambda > 0.0 { Poisson::new(lambda / 2.0).map(|d| d.sample(rng)).unwrap_or(lambda / 2.0) } else { 0.0 };
    let shape = p / 2.0 + k;
    Gamma::new(shape, 2.0).map(|d| d.sample(rng)).unwrap_or(0.0)
}

/// Exact CIR transition over a fixed step `delta`. `sigma = 0` degenerates to
/// the deterministic drift, `alpha = 0` to a driftless square-root process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CirTransition {
    /// Degrees of freedom `4 alpha beta / sigma^2`.
    pub dof: f64,
    /// Scale `sigma^2 (1 - e^{-alpha delta}) / (4 alpha)`.
    pub scale: f64,
    /// Non-centrality per unit of state: `lambda = x * ncp_per_x`.
    pub ncp_per_x: f64,
    decay: f64,
    level: f64,
}

impl CirTransition {
    pub fn new(alpha: f64, beta: f64, sigma: f64, delta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && sigma >= 0.0 && beta >= 0.0 && delta > 0.0) || !(alpha * delta).is_finite() {
            return Err(Error::arg(format!(
                "CIR needs alpha, beta, sigma >= 0 and delta > 0 (got {alpha}, {beta}, {sigma}, {delta})"
            )));
        }
        let decay = (-alpha * delta).exp();
        let integral = crate::affine::decay_integral(alpha, delta);
        if sigma == 0.0 {
            return Ok(Self { dof: 0.0, scale: 0.0, ncp_per_x: 0.0, decay, level: beta });
        }
        // beta = 0 gives dof = 0: the chi-square keeps an atom at zero.
        let dof = 4.0 * alpha * beta / (sigma * sigma);
        let scale = sigma * sigma * integral / 4.0;
        let ncp_per_x = 4.0 * decay / (sigma * sigma * integral);
        Ok(Self { dof, scale, ncp_per_x, decay, level: beta })
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> f64 {
        if self.scale == 0.0 {
            return self.mean(x.max(0.0));
        }
        self.scale * sample_noncentral_chi2(self.dof, x.max(0.0) * self.ncp_per_x, rng)
    }

    pub fn mean(&self, x: f64) -> f64 {
        if self.scale == 0.0 {
            return x * self.decay + self.level * (1.0 - self.decay);
        }
        self.scale * (self.dof + x * self.ncp_per_x)
    }

    pub fn variance(&self, x: f64) -> f64 {
        self.scale * self.scale * (2.0 * self.dof + 4.0 * x * self.ncp_per_x)
    }
}

impl TransitionSampler for CirTransition {
    fn dim(&self) -> usize {
        1
    }

    fn sample_into<R: Rng + ?Sized>(&self, x_prev: &[f64], rng: &mut R, out: &mut [f64]) {
        out[0] = self.sample(x_prev[0], rng);
    }
}

/// CIR path at `times` (with `t_0 = 0`, `x(t_0) = x0`), exact transitions.
pub fn simulate_cir<R: Rng + ?Sized>(
    alpha: f64,
    beta: f64,
    sigma: f64,
    x0: f64,
    times: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(x0 >= 0.0) {
        return Err(Error::arg("x0 must be non-negative"));
    }
    let mut x = x0;
    let mut prev = 0.0;
    let mut cache: Option<(f64, CirTransition)> = None;
    let mut out = Vec::with_capacity(times.len());
    for t in times {
        let delta = t - prev;
        let tr = match cache {
            Some((d, tr)) if d == delta => tr,
            _ => {
                let tr = CirTransition::new(alpha, beta, sigma, delta)?;
                cache = Some((delta, tr));
                tr
            }
        };
        x = tr.sample(x, rng);
        out.push(x);
        prev = *t;
    }
    Ok(out)
}

fn lower_root(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = q.clone().cholesky() {
        return Ok(c.l());
    }
    let fixed = repair_psd(q)?;
    let eig = fixed.symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

fn gaussian_draw<R: Rng + ?Sized>(root: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(root.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    root * z
}

/// Exact Gaussian (Hull-White regime) path.
pub fn simulate_ou<R: Rng + ?Sized>(
    spec: &AffineModelSpec,
    x0: &DVector<f64>,
    times: &[f64],
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    spec.check_dimensions()?;
    if spec.regime() != Some(Regime::Gaussian) {
        return Err(Error::UnsupportedRegime("exact Gaussian simulation needs sigma_tilde = 0".into()));
    }
    if x0.len() != spec.dim() {
        return Err(Error::dim("x0 length"));
    }
    let mut x = x0.clone();
    let mut prev = 0.0;
    let mut cache: Option<(f64, TransitionKernel, DMatrix<f64>)> = None;
    let mut out = Vec::with_capacity(times.len());
    for t in times {
        let delta = t - prev;
        if !matches!(&cache, Some((d, _, _)) if *d == delta) {
            let k = TransitionKernel::new(spec, delta)?;
            let root = lower_root(&k.q_const)?;
            cache = Some((delta, k, root));
        }
        let (_, k, root) = cache.as_ref().expect("kernel cached above");
        let noise = gaussian_draw(root, rng);
        x = DVector::from_fn(x.len(), |i, _| k.f_diag[i] * x[i] + k.offset[i] + noise[i]);
        out.push(x.clone());
        prev = *t;
    }
    Ok(out)
}

/// Square-root-regime path: each interval is split into `substeps` frozen-
/// diffusion Gaussian draws; the first coordinate is floored at 0 after
/// each substep.
pub fn simulate_sv<R: Rng + ?Sized>(
    spec: &AffineModelSpec,
    x0: &DVector<f64>,
    times: &[f64],
    substeps: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    spec.check_dimensions()?;
    if substeps == 0 {
        return Err(Error::arg("substeps must be at least 1"));
    }
    if x0.len() != spec.dim() {
        return Err(Error::dim("x0 length"));
    }
    let mut x = x0.clone();
    let mut prev = 0.0;
    let mut cache: Option<(f64, TransitionKernel)> = None;
    let mut out = Vec::with_capacity(times.len());
    for t in times {
        let delta = t - prev;
        if !matches!(&cache, Some((d, _)) if *d == delta) {
            cache = Some((delta, TransitionKernel::new(spec, delta / substeps as f64)?));
        }
        let (_, k) = cache.as_ref().expect("kernel cached above");
        for _ in 0..substeps {
            let root = lower_root(&k.covariance(x[0]))?;
            let noise = gaussian_draw(&root, rng);
            x = DVector::from_fn(x.len(), |i, _| k.f_diag[i] * x[i] + k.offset[i] + noise[i]);
            x[0] = x[0].max(0.0);
        }
        out.push(x.clone());
        prev = *t;
    }
    Ok(out)
}

/// `y_k = H x_k + H0 + v_k`, `v_k ~ N(0, h I)`.
pub fn make_observations<R: Rng + ?Sized>(
    latent: &[DVector<f64>],
    times: &[f64],
    map: &ObservationMap,
    noise_var: f64,
    rng: &mut R,
) -> Result<ObservationSeries> {
    if latent.len() != times.len() {
        return Err(Error::dim("one latent state per time is required"));
    }
    if !(noise_var >= 0.0) {
        return Err(Error::arg("noise variance must be non-negative"));
    }
    let sd = noise_var.sqrt();
    let noise = Normal::new(0.0, sd).map_err(|e| Error::arg(e.to_string()))?;
    let y = latent
        .iter()
        .map(|x| {
            let mut row = map.yields(x);
            if sd > 0.0 {
                row.iter_mut().for_each(|v| *v += noise.sample(rng));
            }
            row
        })
        .collect();
    let s = ObservationSeries { times: times.to_vec(), maturities: map.maturities.clone(), y, noise_var, truth: None };
    s.validate()?;
    Ok(s)
}

/// Simulation settings for a dataset with piecewise-constant parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub family: ModelFamily,
    /// `(number of steps, theta)` per segment, in order.
    pub segments: Vec<(usize, Vec<f64>)>,
    pub maturities: Vec<f64>,
    pub noise_var: f64,
    pub x0: Vec<f64>,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_substeps() -> usize {
    16
}

impl Scenario {
    /// Daily-sampled dataset; the latent path continues across segments and
    /// each segment's yields use that segment's parameters.
    pub fn simulate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ObservationSeries> {
        let total: usize = self.segments.iter().map(|s| s.0).sum();
        let times = daily_times(total);
        let mut x = DVector::from_column_slice(&self.x0);
        if x.len() != self.family.state_dim() {
            return Err(Error::dim("x0 does not match the model's state dimension"));
        }
        let settings = SolverSettings::default();
        let mut series = ObservationSeries {
            times: times.clone(),
            maturities: self.maturities.clone(),
            y: Vec::with_capacity(total),
            noise_var: self.noise_var,
            truth: None,
        };
        let mut truth = Truth { family: self.family, segments: vec![], latent: Vec::with_capacity(total) };
        let mut start = 0usize;
        for (n, theta) in &self.segments {
            let spec = self.family.spec(theta)?;
            spec.ensure_admissible()?;
            // Segment-local clock: transitions only depend on step sizes.
            let local: Vec<f64> =
                times[start..start + n].iter().map(|t| t - if start == 0 { 0.0 } else { times[start - 1] }).collect();
            let path = match self.family {
                ModelFamily::Cir => simulate_cir(theta[0], theta[1], theta[2], x[0], &local, rng)?
                    .into_iter()
                    .map(|v| DVector::from_element(1, v))
                    .collect(),
                ModelFamily::Hw2 => simulate_ou(&spec, &x, &local, rng)?,
                ModelFamily::Hwsv => simulate_sv(&spec, &x, &local, self.substeps, rng)?,
            };
            let map =
                ObservationMap::for_spec(&spec, &self.maturities, self.noise_var.max(f64::MIN_POSITIVE), &settings)?;
            let obs = make_observations(&path, &times[start..start + n], &map, self.noise_var, rng)?;
            series.y.extend(obs.y);
            if let Some(last) = path.last() {
                x = last.clone();
            }
            truth.latent.extend(path.iter().map(|v| v.as_slice().to_vec()));
            truth.segments.push(TruthSegment { start_step: start + 1, theta: theta.clone() });
            start += n;
        }
        series.truth = Some(truth);
        series.validate()?;
        Ok(series)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::{models, TransitionMoments};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ContinuousCDF, Normal as SNormal};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn cir_one_step_moments() {
        let tr = CirTransition::new(0.45, 0.001, 0.017, 1.0 / 252.0).unwrap();
        let x = 0.005;
        let mut r = rng(1);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| tr.sample(x, &mut r)).collect();
        let (m, v) = mean_var(&draws);
        let (tm, tv) = (tr.mean(x), tr.variance(x));
        assert!((m - tm).abs() < 4.0 * (tv / n as f64).sqrt(), "mean {m} vs {tm}");
        // Standard error of the sample variance from the fourth central moment.
        let m4 = draws.iter().map(|d| (d - m).powi(4)).sum::<f64>() / n as f64;
        let se_v = ((m4 - v * v) / n as f64).sqrt();
        assert!((v - tv).abs() < 4.0 * se_v, "var {v} vs {tv}");
        assert!(draws.iter().all(|d| *d >= 0.0));
    }

    #[test]
    fn cir_mean_matches_mean_reversion_formula() {
        let (a, b, s, d) = (0.45, 0.001, 0.017, 1.0 / 252.0);
        let tr = CirTransition::new(a, b, s, d).unwrap();
        let x = 0.005;
        let expected = x * (-a * d).exp() + b * (1.0 - (-a * d).exp());
        assert!((tr.mean(x) - expected).abs() < 1e-15);
    }

    #[test]
    fn cir_vanishing_noise_is_deterministic() {
        let (a, b) = (0.45, 0.001);
        let times = daily_times(50);
        let path = simulate_cir(a, b, 1e-8, 0.005, &times, &mut rng(2)).unwrap();
        for (t, x) in times.iter().zip(&path) {
            let det = 0.005 * (-a * t).exp() + b * (1.0 - (-a * t).exp());
            assert!((x - det).abs() < 1e-4);
        }
    }

    #[test]
    fn cir_invalid_parameters() {
        assert!(CirTransition::new(-0.1, 0.001, 0.017, 0.01).is_err());
        let frozen = CirTransition::new(0.5, 0.02, 0.0, 0.1).unwrap();
        let x1 = frozen.sample(0.01, &mut rng(1));
        assert!((x1 - (0.01 * (-0.05f64).exp() + 0.02 * (1.0 - (-0.05f64).exp()))).abs() < 1e-15);
        let driftless = CirTransition::new(0.0, 0.02, 0.1, 0.1).unwrap();
        assert!((driftless.mean(0.03) - 0.03).abs() < 1e-15);
        assert!((driftless.variance(0.03) - 0.01 * 0.03 * 0.1).abs() < 1e-15);
        let absorbed = CirTransition::new(0.1, 0.0, 0.017, 0.01).unwrap();
        assert_eq!(absorbed.sample(0.0, &mut rng(1)), 0.0);
        assert!(simulate_cir(0.1, 0.01, 0.01, -1.0, &[0.1], &mut rng(0)).is_err());
    }

    #[test]
    fn paths_are_seed_deterministic_and_nonnegative() {
        let times = daily_times(500);
        let a = simulate_cir(0.45, 0.001, 0.017, 0.005, &times, &mut rng(3)).unwrap();
        let b = simulate_cir(0.45, 0.001, 0.017, 0.005, &times, &mut rng(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn ou_without_noise_is_deterministic() {
        let spec = models::hull_white2(0.1, 0.5, 0.0, 0.0, 0.0);
        let x0 = DVector::from_vec(vec![0.02, -0.01]);
        let times = daily_times(10);
        let path = simulate_ou(&spec, &x0, &times, &mut rng(4)).unwrap();
        let k = TransitionKernel::new(&spec, 1.0 / 252.0).unwrap();
        let mut x = x0;
        for p in &path {
            x = DVector::from_fn(2, |i, _| k.f_diag[i] * x[i] + k.offset[i]);
            assert!((p - &x).norm() < 1e-15);
        }
    }

    #[test]
    fn ou_stationary_covariance() {
        let (a1, a2, s1, s2, rho) = (2.0, 5.0, 0.3, 0.4, -0.5);
        let spec = models::hull_white2(a1, a2, s1, s2, rho);
        let times: Vec<f64> = (1..=100_000).map(|k| k as f64 * 0.05).collect();
        let path = simulate_ou(&spec, &DVector::zeros(2), &times, &mut rng(5)).unwrap();
        let gamma = &spec.sigma * spec.sigma.transpose();
        let alphas = [a1, a2];
        let n = path.len() as f64;
        for i in 0..2 {
            for j in 0..2 {
                let emp = path.iter().map(|x| x[i] * x[j]).sum::<f64>() / n;
                let target = gamma[(i, j)] / (alphas[i] + alphas[j]);
                assert!((emp - target).abs() < 0.05 * target.abs(), "({i},{j}) {emp} vs {target}");
            }
        }
    }

    #[test]
    fn ou_one_step_passes_ks() {
        let spec = models::hull_white2(0.03, 0.23, 0.02, 0.02, -0.5);
        let x0 = DVector::from_vec(vec![0.01, 0.02]);
        let delta = 1.0 / 252.0;
        let TransitionMoments { f, offset, q } = crate::affine::transition_moments(&spec, &x0, delta).unwrap();
        let mean = &f * &x0 + offset;
        let mut r = rng(6);
        let n = 100_000;
        let draws: Vec<DVector<f64>> =
            (0..n).map(|_| simulate_ou(&spec, &x0, &[delta], &mut r).unwrap().remove(0)).collect();
        for i in 0..2 {
            let dist = SNormal::new(mean[i], q[(i, i)].sqrt()).unwrap();
            let mut v: Vec<f64> = draws.iter().map(|x| x[i]).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let d = v
                .iter()
                .enumerate()
                .map(|(k, x)| {
                    let c = dist.cdf(*x);
                    (c - k as f64 / n as f64).abs().max(((k + 1) as f64 / n as f64 - c).abs())
                })
                .fold(0.0, f64::max);
            // 1% critical value of the one-sample KS statistic.
            assert!(d < 1.628 / (n as f64).sqrt(), "coordinate {i}: D = {d}");
        }
    }

    #[test]
    fn sv_single_substep_is_one_gaussian_draw() {
        let spec = models::stochastic_vol(0.1, 0.3, 0.1, 0.03, 0.3, 0.07, -0.5);
        let x0 = DVector::from_vec(vec![0.1, 0.03]);
        let times = [1.0 / 252.0];
        let a = simulate_sv(&spec, &x0, &times, 1, &mut rng(7)).unwrap();
        let k = TransitionKernel::new(&spec, times[0]).unwrap();
        let root = lower_root(&k.covariance(0.1)).unwrap();
        let mut r = rng(7);
        let noise = gaussian_draw(&root, &mut r);
        let expected = DVector::from_fn(2, |i, _| k.f_diag[i] * x0[i] + k.offset[i] + noise[i]);
        assert!((&a[0] - expected).norm() < 1e-15);
    }

    #[test]
    fn sv_without_noise_mean_reverts() {
        let spec = models::stochastic_vol(0.1, 0.3, 0.1, 0.03, 0.0, 0.0, 0.0);
        let x0 = DVector::from_vec(vec![0.2, 0.05]);
        let times = daily_times(20);
        let path = simulate_sv(&spec, &x0, &times, 4, &mut rng(8)).unwrap();
        for (t, x) in times.iter().zip(&path) {
            let v = 0.1 + (0.2 - 0.1) * (-0.1 * t).exp();
            let r = 0.03 + (0.05 - 0.03) * (-0.3 * t).exp();
            assert!((x[0] - v).abs() < 1e-12 && (x[1] - r).abs() < 1e-12);
        }
    }

    #[test]
    fn sv_volatility_factor_matches_cir_moments() {
        let (a1, s1) = (0.1, 0.3);
        let spec = models::stochastic_vol(a1, 0.3, 0.1, 0.03, s1, 0.07, 0.0);
        let delta = 1.0 / 252.0;
        let x0 = DVector::from_vec(vec![0.1, 0.03]);
        let mut r = rng(9);
        let n = 50_000;
        let v: Vec<f64> = (0..n).map(|_| simulate_sv(&spec, &x0, &[delta], 64, &mut r).unwrap()[0][0]).collect();
        let (m, var) = mean_var(&v);
        let tr = CirTransition::new(a1, 0.1, s1, delta).unwrap();
        assert!((m - tr.mean(0.1)).abs() < 3.0 * (var / n as f64).sqrt());
        let se_var = var * (2.0 / n as f64).sqrt();
        assert!((var - tr.variance(0.1)).abs() < 3.0 * se_var, "{var} vs {}", tr.variance(0.1));
    }

    #[test]
    fn observations_noiseless_and_noisy() {
        let spec = models::cir(0.45, 0.001, 0.017);
        let taus: Vec<f64> = (1..=30).map(|t| t as f64).collect();
        let map = ObservationMap::for_spec(&spec, &taus, 1e-8, &SolverSettings::default()).unwrap();
        let times = daily_times(2000);
        let path: Vec<DVector<f64>> = simulate_cir(0.45, 0.001, 0.017, 0.005, &times, &mut rng(10))
            .unwrap()
            .into_iter()
            .map(|v| DVector::from_element(1, v))
            .collect();
        let clean = make_observations(&path, &times, &map, 0.0, &mut rng(11)).unwrap();
        for (x, y) in path.iter().zip(&clean.y) {
            assert_eq!(y, &map.yields(x));
        }
        let noisy = make_observations(&path, &times, &map, 1e-8, &mut rng(11)).unwrap();
        assert_eq!(noisy.y.len(), 2000);
        assert_eq!(noisy.y[0].len(), 30);
        assert_eq!(noisy.times, times);
        let resid: Vec<f64> =
            noisy.y.iter().zip(&clean.y).flat_map(|(a, b)| (a - b).iter().copied().collect::<Vec<_>>()).collect();
        let s2 = resid.iter().map(|e| e * e).sum::<f64>() / resid.len() as f64;
        assert!((s2 - 1e-8).abs() < 4.0 * 1e-8 * (2.0 / resid.len() as f64).sqrt());
    }

    #[test]
    fn scenario_segments_and_schedule() {
        let sc = Scenario {
            family: ModelFamily::Cir,
            segments: vec![(30, vec![0.45, 0.001, 0.017]), (20, vec![0.55, 0.0015, 0.023])],
            maturities: vec![1.0, 5.0, 10.0],
            noise_var: 1e-8,
            x0: vec![0.005],
            substeps: 16,
        };
        let s = sc.simulate(&mut rng(12)).unwrap();
        assert_eq!(s.len(), 50);
        let truth = s.truth.as_ref().unwrap();
        assert_eq!(truth.theta_at(30).unwrap()[0], 0.45);
        assert_eq!(truth.theta_at(31).unwrap()[0], 0.55);
        let (distinct, idx) = s.step_schedule();
        assert_eq!(distinct.len(), 1);
        assert!(idx.iter().all(|i| *i < distinct.len()));
        assert_eq!(s, sc.simulate(&mut rng(12)).unwrap());
    }

    #[test]
    fn series_validation() {
        let y = vec![DVector::zeros(2); 2];
        assert!(ObservationSeries::new(vec![0.1, 0.1], vec![1.0, 2.0], y.clone(), 1e-8).is_err());
        assert!(ObservationSeries::new(vec![0.1, 0.2], vec![], vec![], 1e-8).is_err());
        assert!(ObservationSeries::new(vec![0.1, 0.2], vec![1.0, 2.0], y, 1e-8).is_ok());
    }
}

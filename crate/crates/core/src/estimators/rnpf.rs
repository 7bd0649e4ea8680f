use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{summarize, tags, Phase, PosteriorTrace, Schedule, TraceRow};
use crate::affine::{ObservationMap, Regime, TransitionKernel};
use crate::error::{Error, Result};
use crate::kalman::{GaussianState, PreparedObservation};
use crate::model::ModelFamily;
use crate::riccati::SolverSettings;
use crate::simkit::{CirTransition, ObservationSeries};
use crate::smc::{jitter_kernel2, normalize_log_weights, pf_inner_step, Resampling, StreamKey, TransitionSampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnpfConfig {
    pub family: ModelFamily,
    pub n_particles: usize,
    /// Latent particles per parameter particle.
    pub n_inner: usize,
    /// Fixed jitter variance per coordinate; defaults to `N^{-3/2}`.
    pub jitter_var: f64,
    pub prior_lo: Vec<f64>,
    pub prior_hi: Vec<f64>,
    pub x0_prior: GaussianState,
    #[serde(default)]
    pub resampling: Resampling,
    #[serde(default)]
    pub record_state: bool,
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverSettings,
}

impl RnpfConfig {
    pub fn new(
        family: ModelFamily,
        n_particles: usize,
        n_inner: usize,
        prior_lo: Vec<f64>,
        prior_hi: Vec<f64>,
        x0_prior: GaussianState,
        seed: u64,
    ) -> Self {
        Self {
            family,
            n_particles,
            n_inner,
            jitter_var: (n_particles as f64).powf(-1.5),
            prior_lo,
            prior_hi,
            x0_prior,
            resampling: Resampling::default(),
            record_state: false,
            seed,
            solver: SolverSettings::default(),
        }
    }
}

/// Exact transition for CIR, frozen-diffusion Gaussian otherwise.
#[derive(Debug, Clone)]
enum InnerSampler {
    Cir(CirTransition),
    Gauss(TransitionKernel),
}

impl TransitionSampler for InnerSampler {
    fn dim(&self) -> usize {
        match self {
            InnerSampler::Cir(_) => 1,
            InnerSampler::Gauss(k) => k.dim(),
        }
    }

    fn sample_into<R: Rng + ?Sized>(&self, x_prev: &[f64], rng: &mut R, out: &mut [f64]) {
        match self {
            InnerSampler::Cir(c) => c.sample_into(x_prev, rng, out),
            InnerSampler::Gauss(k) => k.sample_into(x_prev, rng, out),
        }
    }
}

struct InnerModel {
    obs: PreparedObservation,
    samplers: Vec<InnerSampler>,
}

fn inner_model(
    family: ModelFamily,
    theta: &[f64],
    series: &ObservationSeries,
    deltas: &[f64],
    solver: &SolverSettings,
) -> Result<InnerModel> {
    let spec = family.spec(theta)?;
    spec.ensure_admissible()?;
    let map = ObservationMap::for_spec(&spec, &series.maturities, series.noise_var, solver)?;
    let samplers = deltas
        .iter()
        .map(|d| match family {
            ModelFamily::Cir => CirTransition::new(theta[0], theta[1], theta[2], *d).map(InnerSampler::Cir),
            _ => TransitionKernel::new(&spec, *d).map(InnerSampler::Gauss),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InnerModel { obs: PreparedObservation::new(&map), samplers })
}

/// Nested particle filter: a random-walk jitter on the parameters and a
/// bootstrap filter of `M` latent particles inside each parameter particle.
pub fn rnpf_run(series: &ObservationSeries, cfg: &RnpfConfig) -> Result<PosteriorTrace> {
    if cfg.n_particles == 0 || cfg.n_inner == 0 {
        return Err(Error::arg("need at least one outer and one inner particle"));
    }
    if !(cfg.jitter_var >= 0.0 && cfg.jitter_var.is_finite()) {
        return Err(Error::arg("jitter variance must be finite and non-negative"));
    }
    let d = cfg.family.state_dim();
    if cfg.x0_prior.dim() != d {
        return Err(Error::dim("x0 prior does not match the model's state dimension"));
    }
    series.validate()?;
    let space = cfg.family.param_space(cfg.prior_lo.clone(), cfg.prior_hi.clone())?;
    let schedule = Schedule::of(series);
    let (n, m) = (cfg.n_particles, cfg.n_inner);
    let square_root = cfg.family.spec(&space.lo)?.regime() == Some(Regime::SquareRoot);

    let root = cfg.x0_prior.cov.clone().cholesky().map(|c| c.l()).ok_or(Error::NotPsd(0.0))?;
    let init_key = StreamKey::new(cfg.seed, 0, tags::INIT);
    let mut thetas: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut xsets: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = init_key.rng(i as u64);
        let mut theta = space.sample_uniform(&mut rng);
        space.project(&mut theta);
        thetas.push(theta);
        let mut xs = Vec::with_capacity(m * d);
        for _ in 0..m {
            let z = nalgebra::DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &cfg.x0_prior.mean + &root * z;
            for (j, v) in x.iter().enumerate() {
                xs.push(if square_root && j == 0 { v.max(0.0) } else { *v });
            }
        }
        xsets.push(xs);
    }

    let mut trace = PosteriorTrace::new(cfg.family);
    trace.switch_steps.push(1);
    let var = vec![cfg.jitter_var; space.dim()];
    let jitter_std: Vec<f64> =
        (0..space.dim()).map(|j| if space.is_fixed(j) { 0.0 } else { cfg.jitter_var.sqrt() }).collect();
    for i in 0..series.len() {
        let k = i + 1;
        thetas = jitter_kernel2(&thetas, &var, &space, StreamKey::new(cfg.seed, k as u64, tags::JITTER))?;
        let y = series.y[i].as_slice();
        let kidx = schedule.kernel_of_step[i];
        let inner_key = StreamKey::new(cfg.seed, k as u64, tags::INNER);
        let logw: Vec<f64> = thetas
            .par_iter()
            .zip(xsets.par_iter_mut())
            .enumerate()
            .map(|(p, (theta, xs))| {
                let Ok(model) = inner_model(cfg.family, theta, series, &schedule.deltas, &cfg.solver) else {
                    return f64::NEG_INFINITY;
                };
                let mut rng = inner_key.rng(p as u64);
                pf_inner_step(xs, &model.samplers[kidx], &model.obs, y, &mut rng).unwrap_or(f64::NEG_INFINITY)
            })
            .collect();
        let weights = normalize_log_weights(&logw).map_err(|_| Error::Degeneracy { step: k })?;
        let (mean, std) = summarize(&thetas, &weights)?;
        let (state_mean, state_cov) = if cfg.record_state { latent_moments(&xsets, &weights, d) } else { (None, None) };
        trace.rows.push(TraceRow {
            step: k,
            time: series.times[i],
            mean,
            std,
            max_loglik: logw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            jitter_std: jitter_std.clone(),
            phase: Phase::Recursive,
            reset: false,
            state_mean,
            state_cov,
        });
        let mut rng = StreamKey::new(cfg.seed, k as u64, tags::RESAMPLE).rng(0);
        let idx = cfg.resampling.draw(&weights, n, &mut rng)?;
        thetas = idx.iter().map(|j| thetas[*j].clone()).collect();
        xsets = idx.iter().map(|j| xsets[*j].clone()).collect();
    }
    Ok(trace)
}

fn latent_moments(xsets: &[Vec<f64>], weights: &[f64], d: usize) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut mean = vec![0.0; d];
    let mut second = vec![0.0; d * d];
    for (xs, w) in xsets.iter().zip(weights) {
        let m = (xs.len() / d) as f64;
        for x in xs.chunks(d) {
            for r in 0..d {
                mean[r] += w * x[r] / m;
                for c in 0..d {
                    second[c * d + r] += w * x[r] * x[c] / m;
                }
            }
        }
    }
    let cov = (0..d * d).map(|idx| second[idx] - mean[idx % d] * mean[idx / d]).collect();
    (Some(mean), Some(cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::testutil::*;

    fn cfg(n: usize, m: usize, seed: u64) -> RnpfConfig {
        let (lo, hi) = cir_bounds();
        RnpfConfig::new(ModelFamily::Cir, n, m, lo, hi, cir_x0(), seed)
    }

    #[test]
    fn single_outer_and_inner_particle_runs() {
        let series = cir_series(20, 1);
        let trace = rnpf_run(&series, &cfg(1, 1, 3)).unwrap();
        assert_eq!(trace.rows.len(), 20);
        let (lo, hi) = cir_bounds();
        for row in &trace.rows {
            assert!(row.std.iter().all(|s| *s == 0.0));
            assert!(row.mean.iter().zip(lo.iter().zip(&hi)).all(|(v, (l, h))| l <= v && v <= h));
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let series = cir_series(10, 2);
        let mut c = cfg(20, 10, 4);
        c.record_state = true;
        let a = serde_json::to_string(&rnpf_run(&series, &c).unwrap()).unwrap();
        let b = serde_json::to_string(&rnpf_run(&series, &c).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jitter_std_is_fixed() {
        let series = cir_series(5, 3);
        let c = cfg(10, 5, 1);
        let trace = rnpf_run(&series, &c).unwrap();
        let sd = c.jitter_var.sqrt();
        for row in &trace.rows {
            assert_eq!(row.jitter_std, vec![sd; 3]);
            assert_eq!(row.phase, Phase::Recursive);
        }
    }

    #[test]
    fn pinned_coordinates_stay_put() {
        let series = cir_series(8, 4);
        let mut c = cfg(15, 5, 2);
        c.prior_lo[1] = 0.001;
        c.prior_hi[1] = 0.001;
        let trace = rnpf_run(&series, &c).unwrap();
        for r in &trace.rows {
            assert!((r.mean[1] - 0.001).abs() < 1e-15 && r.std[1] < 1e-12 && r.jitter_std[1] == 0.0);
        }
    }

    #[test]
    fn latent_summary_tracks_the_short_rate() {
        let series = cir_series(30, 5);
        let mut c = cfg(30, 200, 6);
        c.prior_lo = CIR_TRUE.to_vec();
        c.prior_hi = CIR_TRUE.to_vec();
        c.record_state = true;
        let trace = rnpf_run(&series, &c).unwrap();
        let truth = &series.truth.as_ref().unwrap().latent;
        let row = trace.last().unwrap();
        let (m, v) = (row.state_mean.as_ref().unwrap()[0], row.state_cov.as_ref().unwrap()[0]);
        assert!((m - truth[29][0]).abs() < 5.0 * v.sqrt() + 1e-4, "{m} vs {}", truth[29][0]);
    }

    #[test]
    fn gaussian_family_uses_the_gaussian_sampler() {
        let series = hw_series(10, 6);
        let c = RnpfConfig::new(
            ModelFamily::Hw2,
            10,
            20,
            vec![0.0, 0.0, 0.0, 0.0, -0.8],
            vec![0.4, 0.4, 0.1, 0.1, -0.3],
            hw_x0(),
            1,
        );
        let trace = rnpf_run(&series, &c).unwrap();
        assert_eq!(trace.rows.len(), 10);
        assert!(trace.rows.iter().all(|r| r.mean[0] <= r.mean[1] + 1e-12 || r.std[0] > 0.0));
    }

    #[test]
    fn large_inner_filter_matches_the_kalman_marginal() {
        use crate::kalman::kf_filter_pass;
        use crate::simkit::Scenario;
        use nalgebra::{DMatrix, DVector};
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        let series = Scenario {
            family: ModelFamily::Hw2,
            segments: vec![(6, HW_TRUE.to_vec())],
            maturities: vec![1.0, 5.0],
            noise_var: 1e-4,
            x0: vec![0.0, 0.0],
            substeps: 16,
        }
        .simulate(&mut ChaCha8Rng::seed_from_u64(9))
        .unwrap();
        let x0 = GaussianState::new(DVector::zeros(2), DMatrix::from_diagonal_element(2, 2, 1e-4)).unwrap();

        let spec = ModelFamily::Hw2.spec(&HW_TRUE).unwrap();
        let schedule = Schedule::of(&series);
        let map =
            ObservationMap::for_spec(&spec, &series.maturities, series.noise_var, &SolverSettings::default()).unwrap();
        let tms: Vec<_> = schedule
            .kernel_of_step
            .iter()
            .map(|k| TransitionKernel::new(&spec, schedule.deltas[*k]).unwrap().moments(&x0.mean))
            .collect();
        let kf = kf_filter_pass(&x0, &tms, &vec![map; series.len()], &series.y).unwrap().total_loglik;

        // One pinned parameter particle: its weight product estimates the
        // marginal likelihood without bias.
        let ratios: Vec<f64> = (0..16)
            .map(|seed| {
                let c =
                    RnpfConfig::new(ModelFamily::Hw2, 1, 10_000, HW_TRUE.to_vec(), HW_TRUE.to_vec(), x0.clone(), seed);
                let ll: f64 = rnpf_run(&series, &c).unwrap().rows.iter().map(|r| r.max_loglik).sum();
                (ll - kf).exp()
            })
            .collect();
        let n = ratios.len() as f64;
        let mean = ratios.iter().sum::<f64>() / n;
        let se = (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert!((mean - 1.0).abs() <= 3.0 * se.max(1e-3), "mean ratio {mean}, se {se}");
    }

    #[test]
    fn rejects_empty_layers() {
        let series = cir_series(3, 1);
        assert!(rnpf_run(&series, &cfg(0, 5, 1)).is_err());
        assert!(rnpf_run(&series, &cfg(5, 0, 1)).is_err());
    }
}

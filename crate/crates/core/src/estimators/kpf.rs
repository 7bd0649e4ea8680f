use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mixture_moments, summarize, tags, Phase, PosteriorTrace, Schedule, ThetaModel, TraceRow};
use crate::error::{Error, Result};
use crate::kalman::{filter_steps, GaussianState};
use crate::model::ModelFamily;
use crate::riccati::SolverSettings;
use crate::simkit::ObservationSeries;
use crate::smc::{
    cloud_moments, jitter_kernel1, jitter_kernel2, normalize_log_weights, uniform_weights, JitterConfig, ParamSpace,
    Resampling, StreamKey,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpfConfig {
    pub family: ModelFamily,
    pub n_particles: usize,
    pub jitter: JitterConfig,
    /// Uniform prior bounds; `lo == hi` pins a coordinate.
    pub prior_lo: Vec<f64>,
    pub prior_hi: Vec<f64>,
    pub x0_prior: GaussianState,
    /// Change-point threshold `b`, used by [`kpf_tv_run`].
    #[serde(default)]
    pub jump_threshold: Option<f64>,
    #[serde(default)]
    pub resampling: Resampling,
    /// Caps the non-recursive Kalman replay to the last `w` observations.
    /// Exploratory runs only; `None` replays the whole segment.
    #[serde(default)]
    pub replay_window: Option<usize>,
    /// Record the particle-averaged state posterior in the trace.
    #[serde(default)]
    pub record_state: bool,
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverSettings,
}

impl KpfConfig {
    /// Defaults for `a`, `V_N = N^{-3/2}` and `V_f = V_N / 100`.
    pub fn new(
        family: ModelFamily,
        n_particles: usize,
        a: f64,
        prior_lo: Vec<f64>,
        prior_hi: Vec<f64>,
        x0_prior: GaussianState,
        seed: u64,
    ) -> Self {
        Self {
            family,
            n_particles,
            jitter: JitterConfig::for_particles(a, n_particles),
            prior_lo,
            prior_hi,
            x0_prior,
            jump_threshold: None,
            resampling: Resampling::default(),
            replay_window: None,
            record_state: false,
            seed,
            solver: SolverSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::arg("at least one particle is required"));
        }
        self.jitter.validate()?;
        if self.x0_prior.dim() != self.family.state_dim() {
            return Err(Error::dim("x0 prior does not match the model's state dimension"));
        }
        if let Some(b) = self.jump_threshold {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::arg(format!("jump threshold b = {b} must lie in [0, 1)")));
            }
        }
        if self.replay_window == Some(0) {
            return Err(Error::arg("replay window must be positive"));
        }
        self.family.param_space(self.prior_lo.clone(), self.prior_hi.clone()).map(|_| ())
    }
}

#[derive(Debug, Clone)]
struct Particle {
    theta: Vec<f64>,
    /// `None` when theta is inadmissible or its Riccati solve failed.
    model: Option<Arc<ThetaModel>>,
    state: GaussianState,
}

/// Kalman particle filter over a fixed observation series. Each call to
/// [`Kpf::step`] consumes one observation.
pub struct Kpf<'a> {
    cfg: KpfConfig,
    space: ParamSpace,
    series: &'a ObservationSeries,
    schedule: Schedule,
    particles: Vec<Particle>,
    phase: Phase,
    /// Index of the first observation of the current segment.
    segment_start: usize,
    /// Log of the largest per-particle likelihood at the previous recursive step.
    prev_max: Option<f64>,
    detect_jumps: bool,
    next: usize,
    trace: PosteriorTrace,
}

fn theta_key(theta: &[f64]) -> Vec<u64> {
    theta.iter().map(|v| v.to_bits()).collect()
}

impl<'a> Kpf<'a> {
    /// Particles drawn from the uniform prior, non-recursive phase.
    pub fn new(series: &'a ObservationSeries, cfg: KpfConfig) -> Result<Self> {
        cfg.validate()?;
        let space = cfg.family.param_space(cfg.prior_lo.clone(), cfg.prior_hi.clone())?;
        let thetas = prior_sample(&space, cfg.n_particles, StreamKey::new(cfg.seed, 0, tags::INIT));
        Self::build(series, cfg, space, thetas, Phase::NonRecursive)
    }

    /// Starts from the given particles in the given phase. With a frozen
    /// jitter configuration and `Phase::Recursive` the parameters never move.
    pub fn with_particles(
        series: &'a ObservationSeries,
        cfg: KpfConfig,
        thetas: Vec<Vec<f64>>,
        phase: Phase,
    ) -> Result<Self> {
        cfg.validate()?;
        let space = cfg.family.param_space(cfg.prior_lo.clone(), cfg.prior_hi.clone())?;
        if thetas.is_empty() || thetas.iter().any(|t| t.len() != space.dim()) {
            return Err(Error::dim("initial particles must be nonempty and match the parameter layout"));
        }
        if thetas.iter().any(|t| !space.contains(t)) {
            return Err(Error::arg("initial particles must lie inside the prior bounds"));
        }
        Self::build(series, cfg, space, thetas, phase)
    }

    fn build(
        series: &'a ObservationSeries,
        cfg: KpfConfig,
        space: ParamSpace,
        thetas: Vec<Vec<f64>>,
        phase: Phase,
    ) -> Result<Self> {
        series.validate()?;
        if series.maturities.is_empty() {
            return Err(Error::arg("series has no maturities"));
        }
        let trace = PosteriorTrace::new(cfg.family);
        let mut kpf = Self {
            schedule: Schedule::of(series),
            particles: vec![],
            space,
            series,
            phase,
            segment_start: 0,
            prev_max: None,
            detect_jumps: false,
            next: 0,
            trace,
            cfg,
        };
        kpf.particles = kpf.fresh_particles(thetas);
        if phase == Phase::Recursive {
            kpf.trace.switch_steps.push(1);
        }
        Ok(kpf)
    }

    fn fresh_particles(&self, thetas: Vec<Vec<f64>>) -> Vec<Particle> {
        let models = self.models_for(&thetas, &vec![None; thetas.len()]);
        thetas
            .into_iter()
            .zip(models)
            .map(|(theta, model)| Particle { theta, model, state: self.cfg.x0_prior.clone() })
            .collect()
    }

    /// Models for `thetas`, reusing `old[i]` when theta is unchanged and
    /// solving each distinct new theta once.
    fn models_for(&self, thetas: &[Vec<f64>], old: &[Option<Arc<ThetaModel>>]) -> Vec<Option<Arc<ThetaModel>>> {
        let mut distinct: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut todo: Vec<&[f64]> = vec![];
        let mut slot = vec![usize::MAX; thetas.len()];
        for (i, theta) in thetas.iter().enumerate() {
            if let Some(m) = &old[i] {
                if m.theta == *theta {
                    continue;
                }
            }
            let id = *distinct.entry(theta_key(theta)).or_insert_with(|| {
                todo.push(theta);
                todo.len() - 1
            });
            slot[i] = id;
        }
        let built: Vec<Option<Arc<ThetaModel>>> = todo
            .par_iter()
            .map(|theta| {
                ThetaModel::build(
                    self.cfg.family,
                    theta,
                    &self.series.maturities,
                    self.series.noise_var,
                    &self.schedule.deltas,
                    &self.cfg.solver,
                )
                .ok()
                .map(Arc::new)
            })
            .collect();
        slot.iter()
            .enumerate()
            .map(|(i, s)| if *s == usize::MAX { old[i].clone() } else { built[*s].clone() })
            .collect()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn trace(&self) -> &PosteriorTrace {
        &self.trace
    }

    pub fn into_trace(self) -> PosteriorTrace {
        self.trace
    }

    /// Current (equally weighted) parameter particles.
    pub fn thetas(&self) -> Vec<Vec<f64>> {
        self.particles.iter().map(|p| p.theta.clone()).collect()
    }

    /// Steps already consumed.
    pub fn steps_done(&self) -> usize {
        self.next
    }

    pub fn is_done(&self) -> bool {
        self.next >= self.series.len()
    }

    /// Enables the change-point test against threshold `b`.
    fn with_jump_detection(mut self) -> Result<Self> {
        match self.cfg.jump_threshold {
            Some(_) => {
                self.detect_jumps = true;
                Ok(self)
            }
            None => Err(Error::arg("change-point tracking requires a jump threshold b")),
        }
    }

    /// Consumes the next observation and returns the emitted trace row.
    pub fn step(&mut self) -> Result<&TraceRow> {
        if self.is_done() {
            return Err(Error::arg("no observations left"));
        }
        let i = self.next;
        let k = i + 1;
        let (row, logw) = match self.advance(i)? {
            Some(done) => done,
            None => {
                // Change point at k: restart from the prior with k as the
                // first observation of the new segment.
                self.trace.reset_steps.push(k);
                let thetas = prior_sample(
                    &self.space,
                    self.cfg.n_particles,
                    StreamKey::new(self.cfg.seed, k as u64, tags::INIT),
                );
                self.particles = self.fresh_particles(thetas);
                self.phase = Phase::NonRecursive;
                self.segment_start = i;
                self.prev_max = None;
                let (mut row, logw) =
                    self.advance(i)?.ok_or_else(|| Error::arg("reset inside the non-recursive phase"))?;
                row.reset = true;
                (row, logw)
            }
        };
        let weights = normalize_log_weights(&logw).map_err(|_| Error::Degeneracy { step: k })?;
        let mut row = row;
        let thetas: Vec<Vec<f64>> = self.particles.iter().map(|p| p.theta.clone()).collect();
        let (mean, std) = summarize(&thetas, &weights)?;
        row.mean = mean;
        row.std = std;
        if self.cfg.record_state {
            let states: Vec<&GaussianState> = self.particles.iter().map(|p| &p.state).collect();
            let (m, c) = mixture_moments(&states, &weights);
            row.state_mean = Some(m);
            row.state_cov = Some(c);
        }
        let mut rng = StreamKey::new(self.cfg.seed, k as u64, tags::RESAMPLE).rng(0);
        let idx = self.cfg.resampling.draw(&weights, self.cfg.n_particles, &mut rng)?;
        self.particles = idx.iter().map(|j| self.particles[*j].clone()).collect();
        self.next += 1;
        self.trace.rows.push(row);
        Ok(self.trace.rows.last().expect("row just pushed"))
    }

    /// Jitter, per-particle Kalman pass and log-weights for observation `i`.
    /// `None` signals a detected change point (particles untouched).
    fn advance(&mut self, i: usize) -> Result<Option<(TraceRow, Vec<f64>)>> {
        let k = i + 1;
        let n = self.particles.len();
        let thetas: Vec<Vec<f64>> = self.particles.iter().map(|p| p.theta.clone()).collect();
        let (_, cov) = cloud_moments(&thetas, &uniform_weights(n))?;
        let jitter = &self.cfg.jitter;
        if self.phase == Phase::NonRecursive && i > self.segment_start && jitter.switch_statistic(&cov) <= jitter.v_n {
            self.phase = Phase::Recursive;
            self.trace.switch_steps.push(k);
        }
        let key = StreamKey::new(self.cfg.seed, k as u64, tags::JITTER);
        let (moved, jitter_var) = match self.phase {
            Phase::NonRecursive => {
                let s = 1.0 - jitter.a * jitter.a;
                let var: Vec<f64> = (0..self.space.dim())
                    .map(|j| if self.space.is_fixed(j) { 0.0 } else { s * cov[(j, j)].max(0.0) })
                    .collect();
                (jitter_kernel1(&thetas, &uniform_weights(n), jitter.a, &self.space, key)?, var)
            }
            Phase::Recursive => {
                let mut var = jitter.kernel2_variance(&cov);
                for (j, v) in var.iter_mut().enumerate() {
                    if self.space.is_fixed(j) {
                        *v = 0.0;
                    }
                }
                let moved = if var.iter().all(|v| *v == 0.0) {
                    thetas
                } else {
                    jitter_kernel2(&thetas, &var, &self.space, key)?
                };
                (moved, var)
            }
        };
        let old: Vec<Option<Arc<ThetaModel>>> = self.particles.iter().map(|p| p.model.clone()).collect();
        let models = self.models_for(&moved, &old);

        let (start, init_from_prior) = match self.phase {
            Phase::NonRecursive => {
                let from = match self.cfg.replay_window {
                    Some(w) => self.segment_start.max((i + 1).saturating_sub(w)),
                    None => self.segment_start,
                };
                (from, true)
            }
            Phase::Recursive => (i, false),
        };
        let ys = &self.series.y[start..=i];
        let kos = &self.schedule.kernel_of_step[start..=i];
        let x0 = &self.cfg.x0_prior;
        let results: Vec<(GaussianState, f64)> = self
            .particles
            .par_iter()
            .zip(models.par_iter())
            .map(|(p, model)| {
                let Some(model) = model else {
                    return (p.state.clone(), f64::NEG_INFINITY);
                };
                let init = if init_from_prior { x0 } else { &p.state };
                match filter_steps(init, &model.kernels, kos, &model.obs, ys) {
                    Ok(r) if r.last_loglik.is_finite() => (r.state, r.last_loglik),
                    _ => (p.state.clone(), f64::NEG_INFINITY),
                }
            })
            .collect();

        let max_loglik = results.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
        if self.detect_jumps && self.phase == Phase::Recursive {
            let b = self.cfg.jump_threshold.unwrap_or(0.0);
            if let Some(prev) = self.prev_max {
                if is_change_point(max_loglik, prev, b) {
                    return Ok(None);
                }
            }
            self.prev_max = Some(max_loglik);
        }

        let mut logw = Vec::with_capacity(n);
        for ((p, theta), (model, (state, ll))) in
            self.particles.iter_mut().zip(moved).zip(models.into_iter().zip(results))
        {
            p.theta = theta;
            p.model = model;
            p.state = state;
            logw.push(ll);
        }
        let row = TraceRow {
            step: k,
            time: self.series.times[i],
            mean: vec![],
            std: vec![],
            max_loglik,
            jitter_std: jitter_var.iter().map(|v| v.sqrt()).collect(),
            phase: self.phase,
            reset: false,
            state_mean: None,
            state_cov: None,
        };
        Ok(Some((row, logw)))
    }

    /// Runs all remaining steps.
    pub fn run(mut self) -> Result<PosteriorTrace> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(self.trace)
    }
}

/// `max_k < b * max_{k-1}`, compared in log space.
fn is_change_point(log_max: f64, prev_log_max: f64, b: f64) -> bool {
    log_max < b.ln() + prev_log_max
}

fn prior_sample(space: &ParamSpace, n: usize, key: StreamKey) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut theta = space.sample_uniform(&mut key.rng(i as u64));
            space.project(&mut theta);
            theta
        })
        .collect()
}

/// Static-parameter estimation over the whole series.
pub fn kpf_run(series: &ObservationSeries, cfg: &KpfConfig) -> Result<PosteriorTrace> {
    Kpf::new(series, cfg.clone())?.run()
}

/// Estimation with change-point tracking; `cfg.jump_threshold` must be set.
pub fn kpf_tv_run(series: &ObservationSeries, cfg: &KpfConfig) -> Result<PosteriorTrace> {
    Kpf::new(series, cfg.clone())?.with_jump_detection()?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::testutil::*;

    fn cir_cfg(n: usize, seed: u64) -> KpfConfig {
        let (lo, hi) = cir_bounds();
        KpfConfig::new(ModelFamily::Cir, n, 0.98, lo, hi, cir_x0(), seed)
    }

    #[test]
    fn empty_series_gives_empty_trace() {
        let series = ObservationSeries::new(vec![], vec![1.0, 2.0], vec![], 1e-8).unwrap();
        let trace = kpf_run(&series, &cir_cfg(20, 1)).unwrap();
        assert!(trace.rows.is_empty());
        assert!(trace.switch_steps.is_empty());
    }

    #[test]
    fn same_seed_gives_identical_trace() {
        let series = cir_series(15, 3);
        let mut cfg = cir_cfg(40, 9);
        cfg.record_state = true;
        let a = serde_json::to_string(&kpf_run(&series, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&kpf_run(&series, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        cfg.seed = 10;
        let c = serde_json::to_string(&kpf_run(&series, &cfg).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_particle_trace_follows_that_particle() {
        let series = cir_series(10, 4);
        let mut kpf = Kpf::new(&series, cir_cfg(1, 2)).unwrap();
        while !kpf.is_done() {
            let row = kpf.step().unwrap().clone();
            assert_eq!(row.mean, kpf.thetas()[0]);
            assert!(row.std.iter().all(|s| *s == 0.0));
        }
    }

    #[test]
    fn frozen_recursive_filter_keeps_its_particles() {
        let series = hw_series(20, 5);
        let grid: Vec<Vec<f64>> = [0.01, 0.03, 0.05].iter().map(|a| vec![*a, 0.23, 0.02, 0.02, -0.5]).collect();
        let mut cfg = KpfConfig::new(
            ModelFamily::Hw2,
            30,
            0.98,
            vec![0.0, 0.23, 0.02, 0.02, -0.5],
            vec![0.1, 0.23, 0.02, 0.02, -0.5],
            hw_x0(),
            1,
        );
        cfg.jitter = JitterConfig { a: 0.98, v_n: 0.0, v_f: 0.0 };
        let thetas: Vec<Vec<f64>> = (0..30).map(|i| grid[i % 3].clone()).collect();
        let mut kpf = Kpf::with_particles(&series, cfg, thetas, Phase::Recursive).unwrap();
        while !kpf.is_done() {
            let row = kpf.step().unwrap();
            assert_eq!(row.phase, Phase::Recursive);
            assert!(row.jitter_std.iter().all(|s| *s == 0.0));
            assert!(kpf.thetas().iter().all(|t| grid.contains(t)));
        }
    }

    #[test]
    fn uninformative_data_leave_the_prior_mean() {
        // A huge observation noise makes every theta equally likely; the cloud
        // only feels resampling drift, about sqrt(k / N) prior stds.
        let mut series = cir_series(40, 6);
        series.noise_var = 1e12;
        let trace = kpf_run(&series, &cir_cfg(400, 3)).unwrap();
        let (lo, hi) = cir_bounds();
        for row in &trace.rows {
            assert_eq!(row.phase, Phase::NonRecursive);
            for j in 0..3 {
                let prior_sd = (hi[j] - lo[j]) / 12f64.sqrt();
                let centre = 0.5 * (lo[j] + hi[j]);
                assert!((row.mean[j] - centre).abs() < 0.8 * prior_sd, "coordinate {j} drifted: {:?}", row.mean);
                assert!(row.std[j] > 0.5 * prior_sd);
            }
        }
    }

    #[test]
    fn phases_are_monotone_and_switch_is_recorded() {
        let series = cir_series(40, 7);
        let trace = kpf_run(&series, &cir_cfg(100, 4)).unwrap();
        let first_b = trace.rows.iter().position(|r| r.phase == Phase::Recursive);
        if let Some(pos) = first_b {
            assert!(trace.rows[pos..].iter().all(|r| r.phase == Phase::Recursive));
            assert_eq!(trace.first_switch(), Some(trace.rows[pos].step));
        } else {
            assert!(trace.switch_steps.is_empty());
        }
        assert_eq!(trace.rows.len(), 40);
        for (k, row) in trace.rows.iter().enumerate() {
            assert_eq!(row.step, k + 1);
            assert!(row.max_loglik.is_finite());
        }
    }

    #[test]
    fn change_point_comparison() {
        assert!(!is_change_point(-5.0, -5.0, 0.5));
        assert!(!is_change_point(10.0, 10.0, 0.999));
        assert!(is_change_point(10.0 + 0.1f64.ln() - 1e-9, 10.0, 0.1));
        assert!(!is_change_point(-1e300, 0.0, 0.0));
    }

    #[test]
    fn zero_threshold_never_resets() {
        let series = cir_series(30, 8);
        let mut cfg = cir_cfg(60, 5);
        cfg.jump_threshold = Some(0.0);
        let trace = kpf_tv_run(&series, &cfg).unwrap();
        assert!(trace.reset_steps.is_empty());
        assert!(trace.rows.iter().all(|r| !r.reset));
    }

    #[test]
    fn threshold_near_one_resets_and_restarts_the_segment() {
        let series = cir_series(40, 9);
        let mut cfg = cir_cfg(60, 6);
        cfg.jump_threshold = Some(1.0 - 1e-12);
        let trace = kpf_tv_run(&series, &cfg).unwrap();
        assert!(!trace.reset_steps.is_empty());
        for k in &trace.reset_steps {
            let row = &trace.rows[k - 1];
            assert!(row.reset);
            assert_eq!(row.phase, Phase::NonRecursive);
        }
        // Every reset is preceded by a switch into the recursive phase.
        let mut switches = trace.switch_steps.iter();
        for k in &trace.reset_steps {
            assert!(switches.next().is_some_and(|s| s < k));
        }
    }

    #[test]
    fn tracking_requires_a_threshold() {
        let series = cir_series(5, 1);
        assert!(kpf_tv_run(&series, &cir_cfg(10, 1)).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let series = cir_series(5, 1);
        let mut cfg = cir_cfg(10, 1);
        cfg.n_particles = 0;
        assert!(kpf_run(&series, &cfg).is_err());
        let mut cfg = cir_cfg(10, 1);
        cfg.jump_threshold = Some(1.0);
        assert!(kpf_run(&series, &cfg).is_err());
        let mut cfg = cir_cfg(10, 1);
        cfg.x0_prior = hw_x0();
        assert!(matches!(kpf_run(&series, &cfg), Err(Error::Dimension(_))));
        let cfg = cir_cfg(10, 1);
        let outside = vec![vec![2.0, 0.001, 0.01]];
        assert!(Kpf::with_particles(&series, cfg, outside, Phase::NonRecursive).is_err());
    }

    #[test]
    fn replay_window_changes_only_the_non_recursive_phase() {
        let series = cir_series(12, 2);
        let mut cfg = cir_cfg(50, 7);
        let full = kpf_run(&series, &cfg).unwrap();
        cfg.replay_window = Some(3);
        let capped = kpf_run(&series, &cfg).unwrap();
        assert_eq!(full.rows[..3], capped.rows[..3]);
    }

    #[test]
    fn state_summary_is_recorded_on_request() {
        let series = cir_series(5, 2);
        let mut cfg = cir_cfg(20, 7);
        cfg.record_state = true;
        let trace = kpf_run(&series, &cfg).unwrap();
        for row in &trace.rows {
            let m = row.state_mean.as_ref().unwrap();
            let c = row.state_cov.as_ref().unwrap();
            assert_eq!((m.len(), c.len()), (1, 1));
            assert!(c[0] >= 0.0);
        }
        let truth = series.truth.as_ref().unwrap();
        let last = trace.last().unwrap();
        let x = truth.latent[4][0];
        let (m, v) = (last.state_mean.as_ref().unwrap()[0], last.state_cov.as_ref().unwrap()[0]);
        assert!((m - x).abs() < 4.0 * v.sqrt() + 1e-3);
    }
}

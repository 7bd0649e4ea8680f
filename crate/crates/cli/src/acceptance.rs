//! Acceptance suite. Each criterion prints one PASS/FAIL line with its
//! runtime and budget; per-seed details follow, indented.

use std::collections::BTreeSet;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use kpf_core::affine::{AffineModelSpec, ObservationMap, TransitionKernel};
use kpf_core::estimators::{
    grid_posterior_oracle, kpf_run, kpf_tv_run, rnpf_run, Kpf, KpfConfig, Phase, PosteriorTrace, RnpfConfig, TraceRow,
};
use kpf_core::kalman::{kf_predict, kf_update, GaussianState};
use kpf_core::model::ModelFamily;
use kpf_core::riccati::{RiccatiParams, SolverSettings};
use kpf_core::simkit::{CirTransition, ObservationSeries, Scenario};
use kpf_core::smc::{jitter_kernel1, jitter_kernel2, JitterConfig, ParamSpace, Resampling, StreamKey};

pub const CIR_TRUE: [f64; 3] = [0.45, 0.001, 0.017];
pub const CIR_JUMP: [f64; 3] = [0.55, 0.0015, 0.023];
pub const CIR_LO: [f64; 3] = [0.0, 0.0, 0.0];
pub const CIR_HI: [f64; 3] = [1.0, 0.01, 0.1];
pub const HW_TRUE: [f64; 5] = [0.03, 0.23, 0.02, 0.02, -0.5];
pub const HW_LO: [f64; 5] = [0.0, 0.0, 0.0, 0.0, -0.8];
pub const HW_HI: [f64; 5] = [0.4, 0.4, 0.1, 0.1, -0.3];

const SEEDS: u64 = 10;
const MIN_PASSING_SEEDS: usize = 8;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub pass: bool,
    pub summary: String,
    pub details: Vec<String>,
    pub seconds: f64,
    pub budget: Option<f64>,
}

impl Outcome {
    pub fn line(&self) -> String {
        let budget = match self.budget {
            Some(b) if self.seconds > b => format!(", over the {b:.0} s budget"),
            Some(b) => format!(", budget {b:.0} s"),
            None => String::new(),
        };
        format!(
            "{} [{}] {}: {} ({:.1} s{})",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.summary,
            self.seconds,
            budget
        )
    }
}

pub const ALL: [u8; 9] = [1, 2, 3, 4, 5, 6, 7, 8, 9];

/// Runs the selected criteria in order, calling `report` as each finishes.
pub fn run(selected: &[u8], mut report: impl FnMut(&Outcome)) -> Vec<Outcome> {
    let selected: BTreeSet<u8> = selected.iter().copied().collect();
    let mut cir_runs: Option<(Vec<CirRun>, f64)> = None;
    let mut outcomes = vec![];
    let mut push = |o: Outcome, outcomes: &mut Vec<Outcome>| {
        report(&o);
        outcomes.push(o);
    };
    for id in selected {
        let o = match id {
            1 => riccati_golden(),
            2 => kalman_exactness(),
            3 => oracle_equivalence(),
            4 | 5 => {
                let (runs, secs) = cir_runs.get_or_insert_with(|| {
                    let t0 = Instant::now();
                    let runs = (1..=SEEDS).map(cir_run).collect();
                    (runs, t0.elapsed().as_secs_f64())
                });
                if id == 4 {
                    cir_recovery(runs, *secs)
                } else {
                    switch_order(runs)
                }
            }
            6 => hw_recovery(),
            8 => kpf_vs_rnpf(),
            7 => jump_tracking(),
            9 => property_suites(),
            _ => continue,
        };
        push(o, &mut outcomes);
    }
    outcomes
}

fn outcome(id: u8, name: &'static str, budget: Option<f64>, t0: Instant) -> Outcome {
    Outcome {
        id,
        name,
        pass: false,
        summary: String::new(),
        details: vec![],
        seconds: t0.elapsed().as_secs_f64(),
        budget,
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn maturities(n: usize) -> Vec<f64> {
    (1..=n).map(|m| m as f64).collect()
}

pub fn cir_scenario(segments: Vec<(usize, Vec<f64>)>) -> Scenario {
    Scenario {
        family: ModelFamily::Cir,
        segments,
        maturities: maturities(30),
        noise_var: 1e-8,
        x0: vec![0.005],
        substeps: 16,
    }
}

pub fn hw_scenario(steps: usize) -> Scenario {
    Scenario {
        family: ModelFamily::Hw2,
        segments: vec![(steps, HW_TRUE.to_vec())],
        maturities: maturities(30),
        noise_var: 6e-7,
        x0: vec![0.0, 0.0],
        substeps: 16,
    }
}

pub fn cir_x0() -> GaussianState {
    GaussianState::new(DVector::from_element(1, 0.005), DMatrix::from_element(1, 1, 0.01)).unwrap()
}

pub fn hw_x0() -> GaussianState {
    GaussianState::new(DVector::zeros(2), DMatrix::from_diagonal_element(2, 2, 0.1)).unwrap()
}

/// Data and estimator seeds are kept apart.
fn data_seed(criterion: u64, seed: u64) -> u64 {
    1000 * criterion + seed
}

/// Each final mean within 3 final stds of the truth and each final std at
/// most 20% of the prior std.
pub fn recovered(row: &TraceRow, truth: &[f64], lo: &[f64], hi: &[f64]) -> (bool, String) {
    let mut ok = true;
    let mut parts = vec![];
    for j in 0..truth.len() {
        let prior_sd = (hi[j] - lo[j]) / 12f64.sqrt();
        let (m, s) = (row.mean[j], row.std[j]);
        let z = (m - truth[j]).abs() / s;
        let close = (m - truth[j]).abs() <= 3.0 * s;
        let tight = s <= 0.2 * prior_sd;
        ok &= close && tight;
        parts.push(format!("{m:.4e}±{s:.1e} (z {z:.1}, {:.0}% prior sd)", 100.0 * s / prior_sd));
    }
    (ok, parts.join(", "))
}

/// Error of the final posterior means, each coordinate scaled by its prior range.
pub fn normalized_rmse(mean: &[f64], truth: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let sq: f64 = (0..truth.len()).map(|j| ((mean[j] - truth[j]) / (hi[j] - lo[j])).powi(2)).sum();
    (sq / truth.len() as f64).sqrt()
}

// ---------------------------------------------------------------- 1

/// `dpsi/dt = psi^2 - psi - 1`, `psi(0) = 0`, against its closed form.
fn riccati_golden() -> Outcome {
    let t0 = Instant::now();
    let params = RiccatiParams::new(
        DMatrix::zeros(1, 1),
        DVector::zeros(1),
        0.0,
        vec![DMatrix::from_element(1, 1, 2.0)],
        DMatrix::from_element(1, 1, -1.0),
        DVector::from_element(1, 1.0),
    )
    .unwrap();
    let closed = |t: f64| {
        let s5 = 5f64.sqrt();
        let e = (s5 * t).exp();
        -2.0 * (e - 1.0) / ((s5 + 1.0) * e + s5 - 1.0)
    };
    let mut worst = 0.0f64;
    let mut details = vec![];
    for t in [0.25, 0.5, 1.0, 2.0] {
        let sol = params.solve(&DVector::zeros(1), t, &SolverSettings::default()).unwrap();
        let err = (sol.psi[0] - closed(t)).abs();
        worst = worst.max(err);
        details.push(format!("t = {t}: psi = {:.15}, closed form {:.15}, error {err:.1e}", sol.psi[0], closed(t)));
    }
    let mut o = outcome(1, "Riccati golden example", Some(1.0), t0);
    o.pass = worst < 1e-10;
    o.summary = format!("max |error| = {worst:.1e} (< 1e-10)");
    o.details = details;
    o
}

// ---------------------------------------------------------------- 2

/// Scalar Vasicek model observed at two maturities every half year.
fn vasicek() -> (AffineModelSpec, f64, f64, f64) {
    let (alpha, beta, sigma) = (0.5, 0.03, 0.1);
    let spec = AffineModelSpec {
        p: 0,
        mean_reversion: DVector::from_element(1, alpha),
        long_run_mean: DVector::from_element(1, beta),
        sigma: DMatrix::from_element(1, 1, sigma),
        sigma_tilde: DMatrix::zeros(1, 1),
        rate_loading: DVector::from_element(1, 1.0),
        rate_shift: 0.0,
    };
    (spec, alpha, beta, sigma)
}

/// Log-likelihood of `ys` by trapezoidal quadrature of the filtering
/// recursion on a fixed grid, with closed-form Vasicek dynamics and yields.
pub fn quadrature_loglik(
    ys: &[Vec<f64>],
    (alpha, beta, sigma): (f64, f64, f64),
    delta: f64,
    taus: &[f64],
    h: f64,
    (m0, v0): (f64, f64),
    (lo, hi, points): (f64, f64, usize),
) -> f64 {
    let gauss = |x: f64, m: f64, v: f64| (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
    let dx = (hi - lo) / (points - 1) as f64;
    let xs: Vec<f64> = (0..points).map(|i| lo + i as f64 * dx).collect();
    let w: Vec<f64> = (0..points).map(|i| if i == 0 || i == points - 1 { 0.5 * dx } else { dx }).collect();
    let f = (-alpha * delta).exp();
    let c = beta * (1.0 - f);
    let q = sigma * sigma * (1.0 - (-2.0 * alpha * delta).exp()) / (2.0 * alpha);
    // R(tau) = a(tau) + b(tau) x
    let load: Vec<(f64, f64)> = taus
        .iter()
        .map(|tau| {
            let b = (1.0 - (-alpha * tau).exp()) / alpha;
            let ln_a =
                (beta - sigma * sigma / (2.0 * alpha * alpha)) * (b - tau) - sigma * sigma * b * b / (4.0 * alpha);
            (-ln_a / tau, b / tau)
        })
        .collect();
    let mut post: Vec<f64> = xs.iter().map(|x| gauss(*x, m0, v0)).collect();
    let mut ll = 0.0;
    for y in ys {
        let pred: Vec<f64> = xs
            .iter()
            .map(|xn| xs.iter().zip(&post).zip(&w).map(|((xp, p), wi)| wi * p * gauss(*xn, f * xp + c, q)).sum())
            .collect();
        let lik: Vec<f64> =
            xs.iter().map(|x| load.iter().zip(y).map(|((a, b), yl)| gauss(*yl, a + b * x, h)).product()).collect();
        let marg: f64 = (0..points).map(|j| w[j] * lik[j] * pred[j]).sum();
        ll += marg.ln();
        post = (0..points).map(|j| lik[j] * pred[j] / marg).collect();
    }
    ll
}

fn kalman_exactness() -> Outcome {
    let t0 = Instant::now();
    let (spec, alpha, beta, sigma) = vasicek();
    let (delta, taus, h) = (0.5, vec![1.0, 5.0], 1e-4);
    let kernel = TransitionKernel::new(&spec, delta).unwrap();
    let map = ObservationMap::for_spec(&spec, &taus, h, &SolverSettings::default()).unwrap();
    let mut r = rng(2);
    let mut x = DVector::from_element(1, 0.03);
    let ys: Vec<Vec<f64>> = (0..5)
        .map(|_| {
            let tm = kernel.moments(&x);
            x = &tm.f * &x
                + &tm.offset
                + DVector::from_element(1, tm.q[(0, 0)].sqrt() * r.sample::<f64, _>(StandardNormal));
            map.yields(&x).iter().map(|v| v + h.sqrt() * r.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect();
    let mut state = GaussianState::new(DVector::from_element(1, 0.03), DMatrix::from_element(1, 1, 0.01)).unwrap();
    let mut kf = 0.0;
    for y in &ys {
        let upd =
            kf_update(&kf_predict(&state, &kernel.moments(&state.mean)), &map, &DVector::from_column_slice(y)).unwrap();
        kf += upd.loglik;
        state = upd.posterior;
    }
    let quad = quadrature_loglik(&ys, (alpha, beta, sigma), delta, &taus, h, (0.03, 0.01), (-1.5, 1.5, 4001));
    let err = (kf - quad).abs();
    let mut o = outcome(2, "Kalman exactness", Some(5.0), t0);
    o.pass = err < 1e-6;
    o.summary = format!("loglik {kf:.9} vs quadrature {quad:.9}, |diff| = {err:.1e} (< 1e-6)");
    o
}

// ---------------------------------------------------------------- 3

/// Alpha1 grid: the step-300 posterior sd of alpha1 is about 6e-5, so a
/// 3e-5 spacing keeps the reference posterior spread over several points.
pub fn alpha_grid() -> Vec<Vec<f64>> {
    (-4..=4).map(|j| vec![HW_TRUE[0] + j as f64 * 3e-5, HW_TRUE[1], HW_TRUE[2], HW_TRUE[3], HW_TRUE[4]]).collect()
}

/// Final total variation between the particle histogram over the grid and
/// the exact grid posterior.
fn grid_tv(series: &ObservationSeries, grid: &[Vec<f64>], exact: &[f64], n: usize, seed: u64) -> f64 {
    let mut lo = HW_TRUE.to_vec();
    let mut hi = HW_TRUE.to_vec();
    lo[0] = grid[0][0];
    hi[0] = grid[grid.len() - 1][0];
    let mut cfg = KpfConfig::new(ModelFamily::Hw2, n, 0.98, lo, hi, hw_x0(), seed);
    cfg.jitter = JitterConfig { a: 0.98, v_n: 0.0, v_f: 0.0 };
    cfg.resampling = Resampling::Systematic;
    let thetas: Vec<Vec<f64>> = (0..n).map(|i| grid[i * grid.len() / n].clone()).collect();
    let mut kpf = Kpf::with_particles(series, cfg, thetas, Phase::Recursive).unwrap();
    while !kpf.is_done() {
        kpf.step().unwrap();
    }
    let thetas = kpf.thetas();
    0.5 * grid
        .iter()
        .zip(exact)
        .map(|(g, w)| (thetas.iter().filter(|t| *t == g).count() as f64 / n as f64 - w).abs())
        .sum::<f64>()
}

fn oracle_equivalence() -> Outcome {
    let t0 = Instant::now();
    let grid = alpha_grid();
    let n = 5000;
    let mut details = vec![];
    let (mut small, mut shrinking) = (0, 0);
    for seed in 1..=SEEDS {
        let series = hw_scenario(300).simulate(&mut rng(data_seed(3, seed))).unwrap();
        let exact = grid_posterior_oracle(&series, ModelFamily::Hw2, &grid, None, &hw_x0(), &SolverSettings::default())
            .unwrap();
        let exact = exact.weights.last().unwrap();
        let tv_n = grid_tv(&series, &grid, exact, n, seed);
        let tv_4n = grid_tv(&series, &grid, exact, 4 * n, seed);
        small += (tv_n < 0.10) as usize;
        shrinking += (tv_4n < tv_n) as usize;
        details.push(format!("seed {seed}: TV(N) = {tv_n:.4}, TV(4N) = {tv_4n:.4}"));
    }
    let mut o = outcome(3, "oracle equivalence on an alpha1 grid", Some(120.0), t0);
    o.pass = small == SEEDS as usize && shrinking >= MIN_PASSING_SEEDS;
    o.summary = format!("TV < 0.10 at N = {n} in {small}/10 seeds, TV(4N) < TV(N) in {shrinking}/10 seeds");
    o.details = details;
    o
}

// ---------------------------------------------------------------- 4, 5, 8

pub struct CirRun {
    pub seed: u64,
    pub series: ObservationSeries,
    pub trace: PosteriorTrace,
    pub seconds: f64,
}

pub fn cir_kpf_config(n: usize, seed: u64) -> KpfConfig {
    KpfConfig::new(ModelFamily::Cir, n, 0.98, CIR_LO.to_vec(), CIR_HI.to_vec(), cir_x0(), seed)
}

fn cir_series(seed: u64) -> ObservationSeries {
    cir_scenario(vec![(2000, CIR_TRUE.to_vec())]).simulate(&mut rng(data_seed(4, seed))).unwrap()
}

fn cir_run(seed: u64) -> CirRun {
    let series = cir_series(seed);
    let t0 = Instant::now();
    let trace = kpf_run(&series, &cir_kpf_config(1000, seed)).unwrap();
    CirRun { seed, series, trace, seconds: t0.elapsed().as_secs_f64() }
}

fn cir_recovery(runs: &[CirRun], seconds: f64) -> Outcome {
    let t0 = Instant::now();
    let mut ok = 0;
    let mut details = vec![];
    for run in runs {
        let (pass, text) = recovered(run.trace.last().unwrap(), &CIR_TRUE, &CIR_LO, &CIR_HI);
        ok += pass as usize;
        details.push(format!(
            "seed {}: {} {text} ({:.1} s)",
            run.seed,
            if pass { "ok  " } else { "miss" },
            run.seconds
        ));
    }
    let mut o = outcome(4, "CIR recovery, N = 1000", Some(300.0), t0);
    o.seconds += seconds;
    o.pass = ok >= MIN_PASSING_SEEDS;
    o.summary = format!("recovered in {ok}/10 seeds (need 8)");
    o.details = details;
    o
}

fn switch_order(runs: &[CirRun]) -> Outcome {
    let t0 = Instant::now();
    let steps: Vec<Option<usize>> = runs.iter().map(|r| r.trace.first_switch()).collect();
    let inside = steps.iter().filter(|s| matches!(s, Some(k) if (100..=1500).contains(k))).count();
    let mut o = outcome(5, "switch step order", None, t0);
    o.pass = inside == runs.len();
    o.summary = format!("switch steps {steps:?}; {inside}/{} within [100, 1500]", runs.len());
    o
}

/// KPF against RNPF (N = 500, M = 150) on the criterion-4 datasets. The KPF
/// runs at N = 500 as well, which fits the RNPF wall clock; the budget counts
/// as matched when the KPF runs take no longer than the RNPF runs in total.
fn kpf_vs_rnpf() -> Outcome {
    let t0 = Instant::now();
    let mut wins = 0;
    let (mut kpf_secs, mut rnpf_secs) = (0.0, 0.0);
    let mut details = vec![];
    for seed in 1..=SEEDS {
        let series = cir_series(seed);
        let t = Instant::now();
        let kpf = kpf_run(&series, &cir_kpf_config(500, seed)).unwrap();
        let k_secs = t.elapsed().as_secs_f64();
        let cfg = RnpfConfig::new(ModelFamily::Cir, 500, 150, CIR_LO.to_vec(), CIR_HI.to_vec(), cir_x0(), seed);
        let t = Instant::now();
        let rnpf = rnpf_run(&series, &cfg).unwrap();
        let r_secs = t.elapsed().as_secs_f64();
        let e_kpf = normalized_rmse(&kpf.last().unwrap().mean, &CIR_TRUE, &CIR_LO, &CIR_HI);
        let e_rnpf = normalized_rmse(&rnpf.last().unwrap().mean, &CIR_TRUE, &CIR_LO, &CIR_HI);
        wins += (e_kpf <= e_rnpf) as usize;
        kpf_secs += k_secs;
        rnpf_secs += r_secs;
        details.push(format!("seed {seed}: RMSE KPF {e_kpf:.2e} ({k_secs:.1} s), RNPF {e_rnpf:.2e} ({r_secs:.1} s)"));
    }
    let matched = kpf_secs <= rnpf_secs;
    let mut o = outcome(8, "KPF vs RNPF at a matched budget", Some(600.0), t0);
    o.pass = wins >= MIN_PASSING_SEEDS && matched;
    o.summary = format!(
        "KPF no worse in {wins}/10 seeds; wall clock KPF {kpf_secs:.0} s vs RNPF {rnpf_secs:.0} s{}",
        if matched { "" } else { " (budget not matched)" }
    );
    o.details = details;
    o
}

// ---------------------------------------------------------------- 6

fn hw_recovery() -> Outcome {
    let t0 = Instant::now();
    let mut ok = 0;
    let mut details = vec![];
    for seed in 1..=SEEDS {
        let series = hw_scenario(2000).simulate(&mut rng(data_seed(6, seed))).unwrap();
        let cfg = KpfConfig::new(ModelFamily::Hw2, 500, 0.98, HW_LO.to_vec(), HW_HI.to_vec(), hw_x0(), seed);
        let t = Instant::now();
        let trace = kpf_run(&series, &cfg).unwrap();
        let (pass, text) = recovered(trace.last().unwrap(), &HW_TRUE, &HW_LO, &HW_HI);
        ok += pass as usize;
        details.push(format!(
            "seed {seed}: {} {text} (switch {:?}, {:.1} s)",
            if pass { "ok  " } else { "miss" },
            trace.first_switch(),
            t.elapsed().as_secs_f64()
        ));
    }
    let mut o = outcome(6, "Hull-White recovery, N = 500", Some(300.0), t0);
    o.pass = ok >= MIN_PASSING_SEEDS;
    o.summary = format!("recovered in {ok}/10 seeds (need 8)");
    o.details = details;
    o
}

// ---------------------------------------------------------------- 7

fn jump_tracking() -> Outcome {
    let t0 = Instant::now();
    let mut ok = 0;
    let mut details = vec![];
    for seed in 1..=SEEDS {
        let series = cir_scenario(vec![(2000, CIR_TRUE.to_vec()), (2000, CIR_JUMP.to_vec())])
            .simulate(&mut rng(data_seed(7, seed)))
            .unwrap();
        let mut cfg = cir_kpf_config(1000, seed);
        cfg.jump_threshold = Some(0.1);
        let t = Instant::now();
        let trace = kpf_tv_run(&series, &cfg).unwrap();
        let in_window = trace.reset_steps.iter().filter(|k| (2001..=2051).contains(*k)).count();
        let (rec, text) = recovered(trace.last().unwrap(), &CIR_JUMP, &CIR_LO, &CIR_HI);
        let pass = in_window == 1 && rec;
        ok += pass as usize;
        details.push(format!(
            "seed {seed}: {} resets {:?}, final {text} ({:.1} s)",
            if pass { "ok  " } else { "miss" },
            trace.reset_steps,
            t.elapsed().as_secs_f64()
        ));
    }
    let mut o = outcome(7, "jump tracking, b = 0.1", Some(600.0), t0);
    o.pass = ok >= MIN_PASSING_SEEDS;
    o.summary = format!("one reset in [2001, 2051] and recovery in {ok}/10 seeds (need 8)");
    o.details = details;
    o
}

// ---------------------------------------------------------------- 9

struct Suite {
    name: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

fn suite(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Suite {
    let t0 = Instant::now();
    let (pass, detail) = f();
    Suite { name, pass, detail, seconds: t0.elapsed().as_secs_f64() }
}

fn property_suites() -> Outcome {
    let t0 = Instant::now();
    let suites = [
        suite("kernel-1 moment preservation", kernel1_moments),
        suite("kernel-2 moment bound", kernel2_moment_bound),
        suite("resampling unbiasedness", resampling_unbiased),
        suite("CIR sampler moments", cir_sampler_moments),
        suite("bounds containment", bounds_containment),
        suite("determinism", determinism),
    ];
    let mut o = outcome(9, "property suites", None, t0);
    let failed: Vec<&str> = suites.iter().filter(|s| !s.pass || s.seconds > 30.0).map(|s| s.name).collect();
    o.pass = failed.is_empty();
    o.summary = if failed.is_empty() {
        format!("{} suites, each under 30 s", suites.len())
    } else {
        format!("failed: {}", failed.join(", "))
    };
    o.details = suites
        .iter()
        .map(|s| format!("{} {}: {} ({:.2} s)", if s.pass { "ok  " } else { "FAIL" }, s.name, s.detail, s.seconds))
        .collect();
    o
}

fn sample_moments(cloud: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = cloud.len() as f64;
    let d = cloud[0].len();
    let mut m = DVector::zeros(d);
    for p in cloud {
        m += DVector::from_column_slice(p);
    }
    m /= n;
    let mut c = DMatrix::zeros(d, d);
    for p in cloud {
        let dv = DVector::from_column_slice(p) - &m;
        c += &dv * dv.transpose();
    }
    (m, c / n)
}

/// Shrinkage plus noise keeps the cloud's mean and covariance.
fn kernel1_moments() -> (bool, String) {
    let n = 20000;
    let a = 0.98;
    let space = ParamSpace::new(vec![-100.0; 3], vec![100.0; 3]).unwrap();
    let mut r = rng(91);
    let cloud: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..3).map(|_| r.sample(StandardNormal)).collect();
            vec![1.0 + z[0], -2.0 + 0.5 * z[0] + 0.3 * z[1], 0.2 * z[2] + 0.1 * z[1]]
        })
        .collect();
    let w = vec![1.0 / n as f64; n];
    let moved = jitter_kernel1(&cloud, &w, a, &space, StreamKey::new(91, 1, 2)).unwrap();
    let (m0, c0) = sample_moments(&cloud);
    let (m1, c1) = sample_moments(&moved);
    let mut worst_z = 0.0f64;
    for j in 0..3 {
        let se = ((1.0 - a * a) * c0[(j, j)] / n as f64).sqrt();
        worst_z = worst_z.max((m1[j] - m0[j]).abs() / se);
    }
    let rel = (&c1 - &c0).norm() / c0.norm();
    (worst_z < 4.0 && rel < 0.02, format!("mean shift {worst_z:.2} SE, relative covariance change {rel:.4}"))
}

/// `E |theta' - theta|^p <= e^p N^{-p/2}` for p = 2, 4 with the kernel-2
/// variance at its cap `V_N`, from the middle and from a corner of the box.
fn kernel2_moment_bound() -> (bool, String) {
    let d = 3;
    let space = ParamSpace::new(CIR_LO.to_vec(), CIR_HI.to_vec()).unwrap();
    let mut ok = true;
    let mut scaled = vec![];
    for n in [100usize, 1000, 10000] {
        let v_n = (n as f64).powf(-1.5);
        for start in [vec![0.5, 0.005, 0.05], vec![0.0, 0.0, 0.1]] {
            let reps = 20000;
            let cloud = vec![start.clone(); reps];
            let moved = jitter_kernel2(&cloud, &vec![v_n; d], &space, StreamKey::new(n as u64, 1, 2)).unwrap();
            let (mut m2, mut m4) = (0.0, 0.0);
            for p in &moved {
                let s: f64 = p.iter().zip(&start).map(|(a, b)| (a - b).powi(2)).sum();
                m2 += s / reps as f64;
                m4 += s * s / reps as f64;
            }
            // Unclamped Gaussian moments: d V_N and (d^2 + 2d) V_N^2.
            ok &= m2 <= 1.05 * d as f64 * v_n && m4 <= 1.1 * (d * d + 2 * d) as f64 * v_n * v_n;
            ok &= m2 * n as f64 <= d as f64 && m4 * (n * n) as f64 <= (d * d + 2 * d) as f64;
            scaled.push(m2 * n as f64);
        }
    }
    (ok, format!("N E|dtheta|^2 = {:?}", scaled.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>()))
}

fn resampling_unbiased() -> (bool, String) {
    let w = [0.05, 0.3, 0.01, 0.14, 0.2, 0.1, 0.04, 0.06, 0.07, 0.03];
    let (n, reps) = (50usize, 4000usize);
    let mut ok = true;
    let mut worst = 0.0f64;
    for scheme in [Resampling::Multinomial, Resampling::Systematic] {
        let mut r = rng(93);
        let mut counts = vec![0.0; w.len()];
        for _ in 0..reps {
            for i in scheme.draw(&w, n, &mut r).unwrap() {
                counts[i] += 1.0;
            }
        }
        for (c, wi) in counts.iter().zip(&w) {
            let freq = c / (n * reps) as f64;
            // The multinomial bound also covers the lower-variance systematic scheme.
            let se = (wi * (1.0 - wi) / (n * reps) as f64).sqrt();
            let z = (freq - wi).abs() / se;
            worst = worst.max(z);
            ok &= z < 4.0;
        }
    }
    (ok, format!("largest deviation {worst:.2} SE over both schemes"))
}

/// One-step draws against `c (p + lambda)` and `c^2 (2p + 4 lambda)`.
fn cir_sampler_moments() -> (bool, String) {
    let [alpha, beta, sigma] = CIR_TRUE;
    let delta = 1.0 / 252.0;
    let x0 = 0.005;
    let tr = CirTransition::new(alpha, beta, sigma, delta).unwrap();
    let e = (-alpha * delta).exp();
    let c = sigma * sigma * (1.0 - e) / (4.0 * alpha);
    let p = 4.0 * alpha * beta / (sigma * sigma);
    let lambda = x0 * 4.0 * alpha * e / (sigma * sigma * (1.0 - e));
    let (mean, var) = (c * (p + lambda), c * c * (2.0 * p + 4.0 * lambda));
    let n = 1_000_000;
    let mut r = rng(94);
    let draws: Vec<f64> = (0..n).map(|_| tr.sample(x0, &mut r)).collect();
    let m = draws.iter().sum::<f64>() / n as f64;
    let v = draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let m4 = draws.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n as f64;
    let z_mean = (m - mean).abs() / (v / n as f64).sqrt();
    let z_var = (v - var).abs() / ((m4 - v * v) / n as f64).sqrt();
    let nonneg = draws.iter().all(|x| *x >= 0.0);
    (z_mean < 4.0 && z_var < 4.0 && nonneg, format!("mean {z_mean:.2} SE, variance {z_var:.2} SE off"))
}

fn bounds_containment() -> (bool, String) {
    let space = ModelFamily::Cir.param_space(CIR_LO.to_vec(), CIR_HI.to_vec()).unwrap();
    let mut r = rng(95);
    let cloud: Vec<Vec<f64>> = (0..5000)
        .map(|i| match i % 3 {
            0 => CIR_LO.to_vec(),
            1 => CIR_HI.to_vec(),
            _ => space.sample_uniform(&mut r),
        })
        .collect();
    let w = vec![1.0 / cloud.len() as f64; cloud.len()];
    let mut outside = 0;
    for step in 0..5 {
        let k1 = jitter_kernel1(&cloud, &w, 0.5, &space, StreamKey::new(95, step, 2)).unwrap();
        let k2 = jitter_kernel2(&cloud, &[0.1, 1e-4, 1e-3], &space, StreamKey::new(95, step, 3)).unwrap();
        outside += k1.iter().chain(&k2).filter(|t| !space.contains(t)).count();
    }
    (outside == 0, format!("{outside} of 50000 jittered particles outside the prior box"))
}

fn determinism() -> (bool, String) {
    let series = cir_scenario(vec![(60, CIR_TRUE.to_vec())]).simulate(&mut rng(96)).unwrap();
    let kpf = || serde_json::to_string(&kpf_run(&series, &cir_kpf_config(200, 7)).unwrap()).unwrap();
    let rnpf_cfg = RnpfConfig::new(ModelFamily::Cir, 50, 20, CIR_LO.to_vec(), CIR_HI.to_vec(), cir_x0(), 7);
    let rnpf = || serde_json::to_string(&rnpf_run(&series, &rnpf_cfg).unwrap()).unwrap();
    let resim =
        || serde_json::to_string(&cir_scenario(vec![(60, CIR_TRUE.to_vec())]).simulate(&mut rng(96)).unwrap()).unwrap();
    let same = [kpf() == kpf(), rnpf() == rnpf(), resim() == resim()];
    (same.iter().all(|s| *s), format!("byte-identical reruns (KPF, RNPF, simulator): {same:?}"))
}

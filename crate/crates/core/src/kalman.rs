//! Kalman prediction, update and marginal likelihood for the inner layer.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::affine::{ObservationMap, TransitionKernel, TransitionMoments};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MAX_CONDITION: f64 = 1e14;
const PSD_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::dim("covariance must be d x d"));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateResult {
    pub posterior: GaussianState,
    /// `log p(y_k | y_{1:k-1}, theta)`.
    pub loglik: f64,
    pub innovation: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetrizes `m` and clips eigenvalues in `(-1e-10, 0)` to zero. Larger
/// negative eigenvalues are an error.
pub fn repair_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = symmetrize(m);
    if sym.nrows() == 1 {
        let v = sym[(0, 0)];
        return match v {
            v if v >= 0.0 => Ok(sym),
            v if v > -PSD_SLACK => Ok(DMatrix::zeros(1, 1)),
            v => Err(Error::NotPsd(v)),
        };
    }
    // Cheap exit: a Cholesky factorization exists for positive definite input.
    if sym.clone().cholesky().is_some() {
        return Ok(sym);
    }
    let eig = sym.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return Ok(sym);
    }
    if min <= -PSD_SLACK {
        return Err(Error::NotPsd(min));
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    Ok(symmetrize(&rebuilt))
}

/// Prior moments `F B + offset`, `F P F' + Q`.
pub fn kf_predict(state: &GaussianState, tm: &TransitionMoments) -> GaussianState {
    let mean = &tm.f * &state.mean + &tm.offset;
    let cov = symmetrize(&(&tm.f * &state.cov * tm.f.transpose() + &tm.q));
    GaussianState { mean, cov }
}

/// Measurement update with `R = h I`, returning the posterior and the
/// conditional log-likelihood of `y`.
pub fn kf_update(prior: &GaussianState, obs: &ObservationMap, y: &DVector<f64>) -> Result<UpdateResult> {
    let d = prior.dim();
    let l = obs.n_obs();
    if obs.dim() != d || y.len() != l || obs.h0.len() != l {
        return Err(Error::dim("observation map, state and y disagree"));
    }
    if !(obs.noise_var > 0.0) {
        return Err(Error::arg("observation noise variance must be positive"));
    }
    let h = &obs.h;
    let ph_t = &prior.cov * h.transpose();
    let s = symmetrize(&(h * &ph_t + DMatrix::identity(l, l) * obs.noise_var));
    let chol = s.clone().cholesky().ok_or(Error::DegenerateObservation(f64::INFINITY))?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let cond = (hi / lo).powi(2);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::DegenerateObservation(cond));
    }

    let innovation = y - (h * &prior.mean + &obs.h0);
    // K = P H' S^{-1}, computed as (S^{-1} H P)'.
    let gain = chol.solve(&ph_t.transpose()).transpose();
    let mean = &prior.mean + &gain * &innovation;

    let ikh = DMatrix::identity(d, d) - &gain * h;
    let joseph = &ikh * &prior.cov * ikh.transpose() + &gain * gain.transpose() * obs.noise_var;
    let cov = repair_psd(&joseph)?;

    let log_det: f64 = 2.0 * diag.iter().map(|v| v.ln()).sum::<f64>();
    let white = chol.l_dirty().solve_lower_triangular(&innovation).ok_or(Error::DegenerateObservation(cond))?;
    let quad = white.norm_squared();
    let loglik = -0.5 * (l as f64 * LN_2PI + log_det + quad);

    Ok(UpdateResult { posterior: GaussianState { mean, cov }, loglik, innovation, innovation_cov: s })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterPass {
    pub state: GaussianState,
    pub total_loglik: f64,
    pub logliks: Vec<f64>,
}

/// Folds predict/update over aligned sequences of transitions, maps and data.
pub fn kf_filter_pass(
    initial: &GaussianState,
    tms: &[TransitionMoments],
    obs_maps: &[ObservationMap],
    ys: &[DVector<f64>],
) -> Result<FilterPass> {
    if tms.len() != obs_maps.len() || tms.len() != ys.len() {
        return Err(Error::dim("transition, observation and data sequences must have equal length"));
    }
    let mut state = initial.clone();
    let mut logliks = Vec::with_capacity(ys.len());
    for ((tm, obs), y) in tms.iter().zip(obs_maps).zip(ys) {
        let prior = kf_predict(&state, tm);
        let upd = kf_update(&prior, obs, y)?;
        logliks.push(upd.loglik);
        state = upd.posterior;
    }
    Ok(FilterPass { state, total_loglik: logliks.iter().sum(), logliks })
}

/// An observation map with the pieces needed for repeated low-rank updates
/// cached: with `R = h I` and `d << L`, the update only ever factors the
/// `d x d` matrix `h I + P H'H`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedObservation {
    d: usize,
    n_obs: usize,
    noise_var: f64,
    h_rows: Vec<f64>,
    h0: Vec<f64>,
    gram: Vec<f64>,
}

impl PreparedObservation {
    pub fn new(obs: &ObservationMap) -> Self {
        let (l, d) = (obs.n_obs(), obs.dim());
        let mut h_rows = Vec::with_capacity(l * d);
        for r in 0..l {
            for c in 0..d {
                h_rows.push(obs.h[(r, c)]);
            }
        }
        let g = obs.h.transpose() * &obs.h;
        let gram = (0..d * d).map(|i| g[(i / d, i % d)]).collect();
        Self { d, n_obs: l, noise_var: obs.noise_var, h_rows, h0: obs.h0.as_slice().to_vec(), gram }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    /// Noiseless yields for state `x`.
    pub fn yields_into(&self, x: &[f64], out: &mut [f64]) {
        for (l, o) in out.iter_mut().enumerate() {
            let row = &self.h_rows[l * self.d..(l + 1) * self.d];
            *o = self.h0[l] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Pre-reduces `y` so that [`ResidualForm::loglik`] costs `O(d^2)` per
    /// state instead of `O(L d)`.
    pub fn residual_form(&self, y: &[f64]) -> ResidualForm {
        let d = self.d;
        let mut ee = 0.0;
        let mut v = vec![0.0; d];
        for l in 0..self.n_obs {
            let e = y[l] - self.h0[l];
            ee += e * e;
            let row = &self.h_rows[l * d..(l + 1) * d];
            for j in 0..d {
                v[j] += row[j] * e;
            }
        }
        ResidualForm {
            ee,
            v,
            gram: self.gram.clone(),
            noise_var: self.noise_var,
            norm: -0.5 * self.n_obs as f64 * (LN_2PI + self.noise_var.ln()),
        }
    }

    /// `log N(y; H x + H0, h I)`.
    pub fn point_loglik(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut ss = 0.0;
        for l in 0..self.n_obs {
            let row = &self.h_rows[l * self.d..(l + 1) * self.d];
            let fit = self.h0[l] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            let e = y[l] - fit;
            ss += e * e;
        }
        -0.5 * (self.n_obs as f64 * (LN_2PI + self.noise_var.ln()) + ss / self.noise_var)
    }
}

/// `log N(y; H x + H0, h I)` expanded as a quadratic in `x`:
/// `|y - H0|^2 - 2 x' H'(y - H0) + x' H'H x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualForm {
    ee: f64,
    v: Vec<f64>,
    gram: Vec<f64>,
    noise_var: f64,
    norm: f64,
}

impl ResidualForm {
    pub fn loglik(&self, x: &[f64]) -> f64 {
        let d = self.v.len();
        let mut ss = self.ee;
        for i in 0..d {
            ss -= 2.0 * x[i] * self.v[i];
            let row = &self.gram[i * d..(i + 1) * d];
            ss += x[i] * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        self.norm - 0.5 * ss.max(0.0) / self.noise_var
    }
}

/// Result of [`filter_steps`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepsResult {
    pub state: GaussianState,
    pub last_loglik: f64,
    pub total_loglik: f64,
}

/// Runs predict/update over `ys` with a fixed observation map. Step `k` uses
/// `kernels[kernel_of_step[k]]`, with the state-dependent part of `Q` frozen
/// at the previous posterior mean. Agrees with [`kf_predict`]/[`kf_update`] to
/// rounding; small state dimensions run allocation-free.
pub fn filter_steps(
    init: &GaussianState,
    kernels: &[TransitionKernel],
    kernel_of_step: &[usize],
    obs: &PreparedObservation,
    ys: &[DVector<f64>],
) -> Result<StepsResult> {
    let d = init.dim();
    if obs.d != d || kernels.iter().any(|k| k.dim() != d) {
        return Err(Error::dim("state, kernels and observation map disagree"));
    }
    if kernel_of_step.len() != ys.len() || kernel_of_step.iter().any(|i| *i >= kernels.len()) {
        return Err(Error::dim("one valid kernel index per observation is required"));
    }
    if ys.iter().any(|y| y.len() != obs.n_obs) {
        return Err(Error::dim("observation length mismatch"));
    }
    match d {
        1 => fixed::<1>(init, kernels, kernel_of_step, obs, ys),
        2 => fixed::<2>(init, kernels, kernel_of_step, obs, ys),
        3 => fixed::<3>(init, kernels, kernel_of_step, obs, ys),
        4 => fixed::<4>(init, kernels, kernel_of_step, obs, ys),
        _ => dynamic(init, kernels, kernel_of_step, obs, ys),
    }
}

fn dynamic(
    init: &GaussianState,
    kernels: &[TransitionKernel],
    kernel_of_step: &[usize],
    obs: &PreparedObservation,
    ys: &[DVector<f64>],
) -> Result<StepsResult> {
    let map = ObservationMap {
        h: DMatrix::from_row_slice(obs.n_obs, obs.d, &obs.h_rows),
        h0: DVector::from_column_slice(&obs.h0),
        noise_var: obs.noise_var,
        maturities: vec![],
    };
    let mut state = init.clone();
    let (mut last, mut total) = (0.0, 0.0);
    for (k, y) in kernel_of_step.iter().zip(ys) {
        let prior = kf_predict(&state, &kernels[*k].moments(&state.mean));
        let upd = kf_update(&prior, &map, y)?;
        last = upd.loglik;
        total += last;
        state = upd.posterior;
    }
    Ok(StepsResult { state, last_loglik: last, total_loglik: total })
}

struct FixedKernel<const D: usize> {
    f: SVector<f64, D>,
    offset: SVector<f64, D>,
    q_const: SMatrix<f64, D, D>,
    q_cross: SMatrix<f64, D, D>,
    q_lin: SMatrix<f64, D, D>,
    state_dependent: bool,
}

fn to_fixed<const D: usize>(m: &DMatrix<f64>) -> SMatrix<f64, D, D> {
    SMatrix::<f64, D, D>::from_fn(|r, c| m[(r, c)])
}

fn fixed<const D: usize>(
    init: &GaussianState,
    kernels: &[TransitionKernel],
    kernel_of_step: &[usize],
    obs: &PreparedObservation,
    ys: &[DVector<f64>],
) -> Result<StepsResult>
where
    nalgebra::Const<D>: nalgebra::DimMin<nalgebra::Const<D>, Output = nalgebra::Const<D>>,
{
    let ks: Vec<FixedKernel<D>> = kernels
        .iter()
        .map(|k| FixedKernel {
            f: SVector::<f64, D>::from_fn(|i, _| k.f_diag[i]),
            offset: SVector::<f64, D>::from_fn(|i, _| k.offset[i]),
            q_const: to_fixed(&k.q_const),
            q_cross: to_fixed(&k.q_cross),
            q_lin: to_fixed(&k.q_lin),
            state_dependent: k.is_state_dependent(),
        })
        .collect();
    let gram = SMatrix::<f64, D, D>::from_fn(|r, c| obs.gram[r * D + c]);
    let h = obs.noise_var;
    let l = obs.n_obs;
    let const_part = l as f64 * LN_2PI + (l as f64 - D as f64) * h.ln();

    let mut m = SVector::<f64, D>::from_fn(|i, _| init.mean[i]);
    let mut p = to_fixed::<D>(&init.cov);
    let (mut last, mut total) = (0.0, 0.0);

    for (ki, y) in kernel_of_step.iter().zip(ys) {
        let k = &ks[*ki];
        let mut q = k.q_const;
        if k.state_dependent {
            let x = m[0].max(0.0);
            if x > 0.0 {
                q += k.q_cross * x.sqrt() + k.q_lin * x;
            }
        }
        let m_pr = k.f.component_mul(&m) + k.offset;
        let fp = SMatrix::<f64, D, D>::from_fn(|r, c| k.f[r] * p[(r, c)] * k.f[c]);
        let p_pr = fp + q;
        let p_pr = (p_pr + p_pr.transpose()) * 0.5;

        // Innovation e = y - H m - H0, v = H'e.
        let mut v = SVector::<f64, D>::zeros();
        let mut ee = 0.0;
        for (row_i, yl) in y.iter().enumerate() {
            let row = &obs.h_rows[row_i * D..(row_i + 1) * D];
            let mut fit = obs.h0[row_i];
            for j in 0..D {
                fit += row[j] * m_pr[j];
            }
            let e = yl - fit;
            ee += e * e;
            for j in 0..D {
                v[j] += row[j] * e;
            }
        }

        let big_m = SMatrix::<f64, D, D>::identity() * h + p_pr * gram;
        let lu = big_m.lu();
        let det = lu.determinant();
        if !(det > 0.0) || !det.is_finite() {
            return Err(Error::DegenerateObservation(f64::INFINITY));
        }
        let minv_p = lu.solve(&p_pr).ok_or(Error::DegenerateObservation(f64::INFINITY))?;
        let gain_v = minv_p * v;
        let quad = (ee - v.dot(&gain_v)) / h;
        let ll = -0.5 * (const_part + det.ln() + quad);

        m = m_pr + gain_v;
        let c = minv_p * h;
        p = (c + c.transpose()) * 0.5;
        if (0..D).any(|i| p[(i, i)] < 0.0) {
            let repaired = repair_psd(&DMatrix::from_fn(D, D, |r, c| p[(r, c)]))?;
            p = to_fixed(&repaired);
        }
        last = ll;
        total += ll;
    }
    Ok(StepsResult {
        state: GaussianState { mean: DVector::from_fn(D, |i, _| m[i]), cov: DMatrix::from_fn(D, D, |r, c| p[(r, c)]) },
        last_loglik: last,
        total_loglik: total,
    })
}

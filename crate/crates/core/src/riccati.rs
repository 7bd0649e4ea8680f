//! Taylor-series solver for the generalized Riccati system
//!
//! ```text
//! d/dt phi   = 1/2 psi' a psi + b' psi - c,          phi(0) = 0
//! d/dt psi_i = 1/2 psi' alpha_i psi + beta_i' psi - gamma_i,   psi(0) = u
//! ```
//!
//! The series is truncated at order `N` and the horizon is covered by
//! substeps chained through `phi(s + t, u) = phi(s, u) + phi(t, psi(s, u))`,
//! `psi(s + t, u) = psi(t, psi(s, u))`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::affine::{AffineModelSpec, Regime};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Truncation order `N`.
    pub order: usize,
    /// Target size `eps` of the last retained Taylor term on each substep.
    pub tolerance: f64,
    pub min_step: f64,
    pub max_step: f64,
    /// Coefficient magnitude treated as a blow-up of the solution.
    pub blowup: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { order: 10, tolerance: 1e-12, min_step: 1e-6, max_step: 0.5, blowup: 1e12 }
    }
}

impl SolverSettings {
    fn validate(&self) -> Result<()> {
        if self.order < 1 {
            return Err(Error::arg("Taylor order must be at least 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::arg("tolerance must be positive"));
        }
        if !(self.min_step > 0.0 && self.min_step <= self.max_step) {
            return Err(Error::arg("substep clamp must satisfy 0 < min <= max"));
        }
        Ok(())
    }
}

/// Data of the Riccati system; `psi_lin` holds `beta_i` in column `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiParams {
    pub phi_quad: DMatrix<f64>,
    pub phi_lin: DVector<f64>,
    pub phi_const: f64,
    pub psi_quad: Vec<DMatrix<f64>>,
    pub psi_lin: DMatrix<f64>,
    pub psi_const: DVector<f64>,
    flat: Flat,
}

/// Row-major copies of the coefficient data for the inner loops.
#[derive(Debug, Clone, PartialEq)]
struct Flat {
    d: usize,
    phi_quad: Option<Vec<f64>>,
    psi_quad: Vec<Option<Vec<f64>>>,
    /// `psi_lin` transposed: row `i` is `beta_i`.
    lin_rows: Vec<f64>,
}

fn flatten(m: &DMatrix<f64>) -> Option<Vec<f64>> {
    if m.iter().all(|v| *v == 0.0) {
        return None;
    }
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    Some(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub phi: f64,
    pub psi: DVector<f64>,
    pub horizon: f64,
    /// Accumulated size of the last retained Taylor terms over all substeps.
    pub tol: f64,
    /// Substeps taken from `t = 0`.
    #[serde(default)]
    pub substeps: usize,
}

impl RiccatiSolution {
    pub fn initial(horizon: f64, u: DVector<f64>) -> Self {
        Self { phi: 0.0, psi: u, horizon, tol: 0.0, substeps: 0 }
    }
}

/// Taylor coefficients `C_k`, `D_k` of `phi` and `psi` around `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorCoefficients {
    pub phi: Vec<f64>,
    pub psi: Vec<DVector<f64>>,
}

impl RiccatiParams {
    pub fn new(
        phi_quad: DMatrix<f64>,
        phi_lin: DVector<f64>,
        phi_const: f64,
        psi_quad: Vec<DMatrix<f64>>,
        psi_lin: DMatrix<f64>,
        psi_const: DVector<f64>,
    ) -> Result<Self> {
        let d = phi_lin.len();
        if d == 0 {
            return Err(Error::dim("Riccati dimension must be at least 1"));
        }
        let square = |m: &DMatrix<f64>| m.nrows() == d && m.ncols() == d;
        if !square(&phi_quad) || !square(&psi_lin) || psi_const.len() != d || psi_quad.len() != d {
            return Err(Error::dim(format!("Riccati data must be consistent with d = {d}")));
        }
        if psi_quad.iter().any(|m| !square(m)) {
            return Err(Error::dim("each alpha_i must be d x d"));
        }
        let flat = Flat {
            d,
            phi_quad: flatten(&phi_quad),
            psi_quad: psi_quad.iter().map(flatten).collect(),
            lin_rows: flatten(&psi_lin.transpose()).unwrap_or_else(|| vec![0.0; d * d]),
        };
        Ok(Self { phi_quad, phi_lin, phi_const, psi_quad, psi_lin, psi_const, flat })
    }

    /// Riccati data of the bond-price system for an affine model. In the
    /// Gaussian regime the quadratic term `Sigma Sigma'` sits in the `phi`
    /// equation only; in the square-root regime `SigmaTilde SigmaTilde'`
    /// enters the equation for `psi_1` only.
    pub fn from_spec(spec: &AffineModelSpec) -> Result<Self> {
        spec.check_dimensions()?;
        let d = spec.dim();
        let regime =
            spec.regime().ok_or_else(|| Error::UnsupportedRegime("both diffusion blocks are nonzero".into()))?;
        let drift = spec.mean_reversion.component_mul(&spec.long_run_mean);
        let mut psi_quad = vec![DMatrix::zeros(d, d); d];
        let phi_quad = match regime {
            Regime::Gaussian => spec.gamma(),
            Regime::SquareRoot => {
                psi_quad[0] = spec.gamma_tilde();
                DMatrix::zeros(d, d)
            }
        };
        let psi_lin = DMatrix::from_diagonal(&(-&spec.mean_reversion));
        Self::new(phi_quad, drift, spec.rate_shift, psi_quad, psi_lin, spec.rate_loading.clone())
    }

    pub fn dim(&self) -> usize {
        self.flat.d
    }

    /// Taylor coefficients up to `order` for initial value `u`.
    pub fn taylor_coeffs(&self, u: &DVector<f64>, order: usize) -> Result<TaylorCoefficients> {
        if order < 1 {
            return Err(Error::arg("Taylor order must be at least 1"));
        }
        self.check_u(u)?;
        let mut ws = Workspace::new(self.dim(), order);
        ws.fill(self, u.as_slice());
        let d = self.dim();
        Ok(TaylorCoefficients {
            phi: ws.c.clone(),
            psi: (0..=order).map(|k| DVector::from_column_slice(&ws.dcoef[k * d..(k + 1) * d])).collect(),
        })
    }

    fn check_u(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.dim() {
            return Err(Error::dim("u must have length d"));
        }
        Ok(())
    }

    /// `(phi(tau, u), psi(tau, u))`.
    pub fn solve(&self, u: &DVector<f64>, horizon: f64, settings: &SolverSettings) -> Result<RiccatiSolution> {
        Ok(self.solve_horizons(u, &[horizon], settings)?.remove(0))
    }

    /// Solutions at several horizons from one sweep to the largest; every
    /// horizon becomes a substep boundary.
    pub fn solve_horizons(
        &self,
        u: &DVector<f64>,
        horizons: &[f64],
        settings: &SolverSettings,
    ) -> Result<Vec<RiccatiSolution>> {
        settings.validate()?;
        self.check_u(u)?;
        if let Some(t) = horizons.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
            return Err(Error::arg(format!("horizon must be nonnegative, got {t}")));
        }
        let mut order: Vec<usize> = (0..horizons.len()).collect();
        if horizons.windows(2).any(|w| w[0] > w[1]) {
            order.sort_by(|a, b| horizons[*a].total_cmp(&horizons[*b]));
        }

        let d = self.dim();
        let mut ws = Workspace::new(d, settings.order);
        let mut state = u.as_slice().to_vec();
        let mut next = vec![0.0; d];
        let mut phi = 0.0;
        let mut t = 0.0;
        let mut err = 0.0;
        let mut substeps = 0;
        let max_pow = settings.max_step.powi(settings.order as i32);
        let mut out: Vec<Option<RiccatiSolution>> = vec![None; horizons.len()];

        for idx in order {
            let target = horizons[idx];
            while target - t > 0.0 {
                ws.fill(self, &state);
                let worst = ws.max_abs();
                if !worst.is_finite() || worst > settings.blowup {
                    return Err(Error::RiccatiExplosion { at: t, magnitude: worst });
                }
                let last = ws.last_magnitude();
                // The largest step already meets the tolerance most of the time.
                let rule = if last * max_pow <= settings.tolerance {
                    settings.max_step
                } else if last > 0.0 {
                    (settings.tolerance / last).powf(1.0 / settings.order as f64)
                } else {
                    settings.max_step
                };
                let mut step = rule.clamp(settings.min_step, settings.max_step);
                // Land exactly on the target; avoid a sliver step right after.
                if t + step >= target || target - (t + step) < 1e-12 * target.max(1.0) {
                    step = target - t;
                }
                phi += ws.eval(self, step, &mut next);
                std::mem::swap(&mut state, &mut next);
                err += last * step.powi(settings.order as i32);
                substeps += 1;
                t = if step == target - t { target } else { t + step };
                if !phi.is_finite() || state.iter().any(|v| !v.is_finite()) {
                    return Err(Error::RiccatiExplosion { at: t, magnitude: f64::INFINITY });
                }
            }
            out[idx] = Some(RiccatiSolution {
                phi,
                psi: DVector::from_column_slice(&state),
                horizon: target,
                tol: err,
                substeps,
            });
        }
        Ok(out.into_iter().map(|s| s.expect("every horizon is visited")).collect())
    }
}

/// Free-function form of [`RiccatiParams::taylor_coeffs`].
pub fn taylor_coeffs(params: &RiccatiParams, u: &DVector<f64>, order: usize) -> Result<TaylorCoefficients> {
    params.taylor_coeffs(u, order)
}

/// Free-function form of [`RiccatiParams::solve`].
pub fn riccati_solve(
    params: &RiccatiParams,
    u: &DVector<f64>,
    horizon: f64,
    settings: &SolverSettings,
) -> Result<RiccatiSolution> {
    params.solve(u, horizon, settings)
}

struct Workspace {
    d: usize,
    order: usize,
    c: Vec<f64>,
    /// `D_k` stored contiguously: entries `k*d .. (k+1)*d`.
    dcoef: Vec<f64>,
    /// `a D_k` for the phi equation.
    a_d: Vec<f64>,
    /// `alpha_i D_k` for each i with nonzero alpha_i, layout `[i][k][j]`.
    alpha_d: Vec<f64>,
}

fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m[r * d..(r + 1) * d];
        *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sum_m <a_m, b_{k-m}>` over blocks of length `d`, `k + 1 = a.len() / d`.
fn convolve(a: &[f64], b: &[f64], d: usize) -> f64 {
    if d == 1 {
        return a.iter().zip(b.iter().rev()).map(|(x, y)| x * y).sum();
    }
    a.chunks_exact(d).zip(b.chunks_exact(d).rev()).map(|(x, y)| dot(x, y)).sum()
}

impl Workspace {
    fn new(d: usize, order: usize) -> Self {
        let n = order + 1;
        Self {
            d,
            order,
            c: vec![0.0; n],
            dcoef: vec![0.0; n * d],
            a_d: vec![0.0; n * d],
            alpha_d: vec![0.0; d * n * d],
        }
    }

    /// Runs the coefficient recursion for initial value `u`.
    fn fill(&mut self, p: &RiccatiParams, u: &[f64]) {
        let d = self.d;
        let n = self.order + 1;
        let f = &p.flat;
        self.c[0] = 0.0;
        self.dcoef[..d].copy_from_slice(u);
        if d == 1 {
            self.fill_scalar(p, u[0]);
            return;
        }
        for k in 0..self.order {
            let (known, rest) = self.dcoef.split_at_mut((k + 1) * d);
            let dk = &known[k * d..];
            // Cache the matrix-vector products with the newest coefficient D_k.
            if let Some(a) = &f.phi_quad {
                mat_vec(a, dk, &mut self.a_d[k * d..(k + 1) * d]);
            }
            for (i, q) in f.psi_quad.iter().enumerate() {
                if let Some(q) = q {
                    let base = (i * n + k) * d;
                    mat_vec(q, dk, &mut self.alpha_d[base..base + d]);
                }
            }

            let scale = 1.0 / (k as f64 + 1.0);
            let mut c_next = dot(p.phi_lin.as_slice(), dk);
            if f.phi_quad.is_some() {
                c_next += 0.5 * convolve(known, &self.a_d[..(k + 1) * d], d);
            }
            if k == 0 {
                c_next -= p.phi_const;
            }
            self.c[k + 1] = c_next * scale;

            for i in 0..d {
                let mut v = dot(&f.lin_rows[i * d..(i + 1) * d], dk);
                if f.psi_quad[i].is_some() {
                    let base = i * n * d;
                    v += 0.5 * convolve(known, &self.alpha_d[base..base + (k + 1) * d], d);
                }
                if k == 0 {
                    v -= p.psi_const[i];
                }
                rest[i] = v * scale;
            }
        }
    }

    /// One-factor case: `D_m D_{k-m}` is shared by both quadratic terms.
    fn fill_scalar(&mut self, p: &RiccatiParams, u: f64) {
        let f = &p.flat;
        let a = f.phi_quad.as_ref().map_or(0.0, |m| m[0]);
        let q = f.psi_quad[0].as_ref().map_or(0.0, |m| m[0]);
        let (b, lin) = (p.phi_lin[0], f.lin_rows[0]);
        let c = &mut self.c;
        let dc = &mut self.dcoef;
        dc[0] = u;
        for k in 0..self.order {
            let conv: f64 = dc[..=k].iter().zip(dc[..=k].iter().rev()).map(|(x, y)| x * y).sum();
            let scale = 1.0 / (k as f64 + 1.0);
            let (c0, d0) = if k == 0 { (p.phi_const, p.psi_const[0]) } else { (0.0, 0.0) };
            c[k + 1] = (b * dc[k] + 0.5 * a * conv - c0) * scale;
            dc[k + 1] = (lin * dc[k] + 0.5 * q * conv - d0) * scale;
        }
    }

    fn max_abs(&self) -> f64 {
        let (mut m, mut nan) = (0.0f64, false);
        for v in self.c.iter().chain(&self.dcoef) {
            m = m.max(v.abs());
            nan |= v.is_nan();
        }
        if nan {
            f64::NAN
        } else {
            m
        }
    }

    /// `max(|C_N|, max_i |D_N^i|)`.
    fn last_magnitude(&self) -> f64 {
        let n = self.order;
        let tail = &self.dcoef[n * self.d..];
        tail.iter().fold(self.c[n].abs(), |m, v| m.max(v.abs()))
    }

    /// Evaluates the truncated series at `t`, writing `psi` and returning `phi`.
    fn eval(&self, _p: &RiccatiParams, t: f64, psi: &mut [f64]) -> f64 {
        let d = self.d;
        let mut phi = 0.0;
        psi.iter_mut().for_each(|v| *v = 0.0);
        for k in (0..=self.order).rev() {
            phi = phi * t + self.c[k];
            for (i, v) in psi.iter_mut().enumerate() {
                *v = *v * t + self.dcoef[k * d + i];
            }
        }
        phi
    }
}

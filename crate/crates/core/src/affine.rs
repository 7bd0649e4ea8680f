//! Affine state dynamics `dx = A(beta - x)dt + (Sigma + SigmaTilde * sqrt(x_1)) dW`
//! with diagonal `A`, their discrete-time Gaussian transition moments and the
//! zero-rate observation map.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::riccati::{RiccatiParams, RiccatiSolution, SolverSettings};

/// Below this value of `(alpha_i + alpha_j) * delta` the covariance integral is
/// evaluated by its series expansion.
const SERIES_SWITCH: f64 = 1e-8;

const ZERO_TOL: f64 = 1e-14;

/// Which diffusion block is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// `SigmaTilde = 0`: constant diffusion, exact Gaussian transitions.
    Gaussian,
    /// `Sigma = 0`: diffusion scaled by `sqrt(x_1)`.
    SquareRoot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineModelSpec {
    /// Number of nonnegative factors; the remaining `d - p` are real-valued.
    pub p: usize,
    /// Diagonal of `A` (1/year).
    pub mean_reversion: DVector<f64>,
    /// `beta`.
    pub long_run_mean: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub sigma_tilde: DMatrix<f64>,
    /// `gamma` in `r = c + gamma' x`.
    pub rate_loading: DVector<f64>,
    /// `c` in `r = c + gamma' x`.
    pub rate_shift: f64,
}

/// One failed admissibility condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    /// Both diffusion blocks are nonzero.
    NeitherRegime,
    /// `beta[0] < 0`.
    NegativeLongRunMean,
    /// `(A beta)_i < 0` for a nonnegative factor `i`.
    NegativeDrift { factor: usize },
    /// `(Sigma Sigma')_{II}` has a nonzero entry.
    DiffusionOnPositiveFactors { row: usize, col: usize },
    /// Square-root regime with `p = 0`.
    SquareRootWithoutPositiveFactor,
    /// Square-root diffusion loads on a nonnegative factor other than the first.
    ForeignSquareRootLoading { row: usize, col: usize },
}

fn is_zero(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| *v == 0.0)
}

impl AffineModelSpec {
    pub fn dim(&self) -> usize {
        self.mean_reversion.len()
    }

    pub fn check_dimensions(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::dim("state dimension must be at least 1"));
        }
        if self.p > d {
            return Err(Error::dim(format!("p = {} exceeds d = {d}", self.p)));
        }
        if self.long_run_mean.len() != d || self.rate_loading.len() != d {
            return Err(Error::dim("beta and gamma must have length d"));
        }
        for (name, m) in [("Sigma", &self.sigma), ("SigmaTilde", &self.sigma_tilde)] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::dim(format!("{name} must be {d}x{d}")));
            }
        }
        let finite = self
            .mean_reversion
            .iter()
            .chain(self.long_run_mean.iter())
            .chain(self.sigma.iter())
            .chain(self.sigma_tilde.iter())
            .chain(self.rate_loading.iter())
            .all(|v| v.is_finite())
            && self.rate_shift.is_finite();
        if !finite {
            return Err(Error::arg("model parameters must be finite"));
        }
        Ok(())
    }

    /// Active regime, or `None` when both diffusion blocks are nonzero.
    /// A model with no diffusion at all counts as Gaussian.
    pub fn regime(&self) -> Option<Regime> {
        match (is_zero(&self.sigma), is_zero(&self.sigma_tilde)) {
            (_, true) => Some(Regime::Gaussian),
            (true, false) => Some(Regime::SquareRoot),
            (false, false) => None,
        }
    }

    /// `Sigma Sigma'`.
    pub fn gamma(&self) -> DMatrix<f64> {
        &self.sigma * self.sigma.transpose()
    }

    /// `SigmaTilde SigmaTilde'`.
    pub fn gamma_tilde(&self) -> DMatrix<f64> {
        &self.sigma_tilde * self.sigma_tilde.transpose()
    }

    pub fn ensure_admissible(&self) -> Result<()> {
        let violations = validate_admissibility(self)?;
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Inadmissible(violations))
        }
    }
}

/// Checks the admissibility conditions for the active regime. Returns the
/// (possibly empty) list of violated conditions; malformed inputs are an
/// error instead.
pub fn validate_admissibility(spec: &AffineModelSpec) -> Result<Vec<Violation>> {
    spec.check_dimensions()?;
    let mut out = Vec::new();
    let d = spec.dim();
    let p = spec.p;

    if spec.long_run_mean[0] < 0.0 {
        out.push(Violation::NegativeLongRunMean);
    }
    // A is diagonal, so A_IJ = 0 and the off-diagonal sign condition on A_II
    // hold by construction; only A beta remains.
    for i in 0..p {
        if spec.mean_reversion[i] * spec.long_run_mean[i] < 0.0 {
            out.push(Violation::NegativeDrift { factor: i });
        }
    }

    match spec.regime() {
        None => out.push(Violation::NeitherRegime),
        Some(Regime::Gaussian) => {
            let g = spec.gamma();
            for r in 0..p {
                for c in 0..p {
                    if g[(r, c)].abs() > ZERO_TOL {
                        out.push(Violation::DiffusionOnPositiveFactors { row: r, col: c });
                    }
                }
            }
        }
        Some(Regime::SquareRoot) => {
            if p == 0 {
                out.push(Violation::SquareRootWithoutPositiveFactor);
            }
            let g = spec.gamma_tilde();
            for k in 1..p {
                for l in 0..d {
                    if g[(k, l)].abs() > ZERO_TOL || g[(l, k)].abs() > ZERO_TOL {
                        out.push(Violation::ForeignSquareRootLoading { row: k, col: l });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Conditional moments of the (frozen-diffusion) transition over one step:
/// `x_k ~ N(F x_{k-1} + offset, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMoments {
    pub f: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub q: DMatrix<f64>,
}

/// `(1 - exp(-s * delta)) / s`, with the `s -> 0` limit handled by series.
pub(crate) fn decay_integral(s: f64, delta: f64) -> f64 {
    let z = s * delta;
    if z.abs() < SERIES_SWITCH {
        delta * (1.0 - 0.5 * z + z * z / 6.0)
    } else {
        -(-z).exp_m1() / s
    }
}

/// Transition moments for a fixed step size, with the state dependence of
/// `Q` factored out: `Q(x) = q_const + sqrt(x1+) q_cross + x1+ q_lin` where
/// `x1+ = max(x_1, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    pub delta: f64,
    pub f_diag: DVector<f64>,
    pub offset: DVector<f64>,
    pub q_const: DMatrix<f64>,
    pub q_cross: DMatrix<f64>,
    pub q_lin: DMatrix<f64>,
}

impl TransitionKernel {
    pub fn new(spec: &AffineModelSpec, delta: f64) -> Result<Self> {
        spec.check_dimensions()?;
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::arg(format!("time step must be nonnegative, got {delta}")));
        }
        let d = spec.dim();
        let alpha = &spec.mean_reversion;
        let f_diag = alpha.map(|a| (-a * delta).exp());
        let offset = DVector::from_fn(d, |i, _| (1.0 - f_diag[i]) * spec.long_run_mean[i]);

        let weights = DMatrix::from_fn(d, d, |i, j| decay_integral(alpha[i] + alpha[j], delta));
        let st = &spec.sigma * spec.sigma_tilde.transpose();
        let cross = &st + st.transpose();
        Ok(Self {
            delta,
            f_diag,
            offset,
            q_const: spec.gamma().component_mul(&weights),
            q_cross: cross.component_mul(&weights),
            q_lin: spec.gamma_tilde().component_mul(&weights),
        })
    }

    pub fn dim(&self) -> usize {
        self.f_diag.len()
    }

    /// Whether `Q` depends on the previous state.
    pub fn is_state_dependent(&self) -> bool {
        !(is_zero(&self.q_cross) && is_zero(&self.q_lin))
    }

    /// Covariance `Q` with the diffusion frozen at `x_prev_first`, floored at 0.
    pub fn covariance(&self, x_prev_first: f64) -> DMatrix<f64> {
        let x = x_prev_first.max(0.0);
        let mut q = self.q_const.clone();
        if x > 0.0 {
            q += &self.q_cross * x.sqrt() + &self.q_lin * x;
        }
        q
    }

    pub fn moments(&self, x_prev: &DVector<f64>) -> TransitionMoments {
        TransitionMoments {
            f: DMatrix::from_diagonal(&self.f_diag),
            offset: self.offset.clone(),
            q: self.covariance(x_prev[0]),
        }
    }
}

/// Moments of the Gaussian transition obtained by freezing `sqrt(x_1)` at its
/// value at the start of the step. Exact when `SigmaTilde = 0`.
pub fn transition_moments(spec: &AffineModelSpec, x_prev: &DVector<f64>, delta: f64) -> Result<TransitionMoments> {
    if x_prev.len() != spec.dim() {
        return Err(Error::dim("x_prev must have length d"));
    }
    Ok(TransitionKernel::new(spec, delta)?.moments(x_prev))
}

/// Linear map from the latent state to observed zero rates plus the noise
/// variance: `y = H x + H0 + v`, `v ~ N(0, h I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationMap {
    pub h: DMatrix<f64>,
    pub h0: DVector<f64>,
    pub noise_var: f64,
    pub maturities: Vec<f64>,
}

impl ObservationMap {
    pub fn n_obs(&self) -> usize {
        self.h.nrows()
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    /// Noiseless zero rates for state `x`.
    pub fn yields(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x + &self.h0
    }

    /// Solves the Riccati system for `spec` at every maturity and builds the map.
    pub fn for_spec(
        spec: &AffineModelSpec,
        maturities: &[f64],
        noise_var: f64,
        settings: &SolverSettings,
    ) -> Result<Self> {
        check_maturities(maturities)?;
        let params = RiccatiParams::from_spec(spec)?;
        let u = DVector::zeros(spec.dim());
        let sols = params.solve_horizons(&u, maturities, settings)?;
        build_observation_map(spec, maturities, &sols, noise_var)
    }
}

fn check_maturities(maturities: &[f64]) -> Result<()> {
    if maturities.is_empty() {
        return Err(Error::arg("at least one maturity is required"));
    }
    if let Some(t) = maturities.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
        return Err(Error::arg(format!("maturities must be positive, got {t}")));
    }
    Ok(())
}

/// Row `l` of `H` is `-psi(tau_l, 0)' / tau_l`, entry `l` of `H0` is
/// `-phi(tau_l, 0) / tau_l`.
pub fn build_observation_map(
    spec: &AffineModelSpec,
    maturities: &[f64],
    solutions: &[RiccatiSolution],
    noise_var: f64,
) -> Result<ObservationMap> {
    check_maturities(maturities)?;
    let d = spec.dim();
    if solutions.len() != maturities.len() {
        return Err(Error::dim("one Riccati solution per maturity is required"));
    }
    if !(noise_var > 0.0) || !noise_var.is_finite() {
        return Err(Error::arg(format!("noise variance must be positive, got {noise_var}")));
    }
    let l = maturities.len();
    let mut h = DMatrix::zeros(l, d);
    let mut h0 = DVector::zeros(l);
    for (row, (tau, sol)) in maturities.iter().zip(solutions).enumerate() {
        if sol.psi.len() != d {
            return Err(Error::dim("psi must have length d"));
        }
        for j in 0..d {
            h[(row, j)] = -sol.psi[j] / tau;
        }
        h0[row] = -sol.phi / tau;
    }
    Ok(ObservationMap { h, h0, noise_var, maturities: maturities.to_vec() })
}

/// Zero-coupon bond price `exp(phi + psi' x)`; with this sign convention
/// `bond_price = exp(-tau * yield)` for the zero rates of [`ObservationMap`].
pub fn bond_price(phi: f64, psi: &DVector<f64>, x: &DVector<f64>) -> f64 {
    (phi + psi.dot(x)).exp()
}

/// Common model shapes used by the experiments.
pub mod models {
    use super::*;

    /// One-factor CIR short rate `r = x`.
    pub fn cir(alpha: f64, beta: f64, sigma: f64) -> AffineModelSpec {
        AffineModelSpec {
            p: 1,
            mean_reversion: DVector::from_element(1, alpha),
            long_run_mean: DVector::from_element(1, beta),
            sigma: DMatrix::zeros(1, 1),
            sigma_tilde: DMatrix::from_element(1, 1, sigma),
            rate_loading: DVector::from_element(1, 1.0),
            rate_shift: 0.0,
        }
    }

    /// Two-factor Hull-White with zero mean-reversion level, `r = x1 + x2`,
    /// correlated Brownian drivers with correlation `rho`.
    pub fn hull_white2(alpha1: f64, alpha2: f64, sigma1: f64, sigma2: f64, rho: f64) -> AffineModelSpec {
        let sigma =
            DMatrix::from_row_slice(2, 2, &[sigma1, 0.0, sigma2 * rho, sigma2 * (1.0 - rho * rho).max(0.0).sqrt()]);
        AffineModelSpec {
            p: 0,
            mean_reversion: DVector::from_vec(vec![alpha1, alpha2]),
            long_run_mean: DVector::zeros(2),
            sigma,
            sigma_tilde: DMatrix::zeros(2, 2),
            rate_loading: DVector::from_element(2, 1.0),
            rate_shift: 0.0,
        }
    }

    /// Short rate `X` with square-root stochastic volatility `V`; state `(V, X)`,
    /// `r = X`.
    pub fn stochastic_vol(
        alpha1: f64,
        alpha2: f64,
        vol_level: f64,
        beta: f64,
        sigma1: f64,
        sigma2: f64,
        rho: f64,
    ) -> AffineModelSpec {
        let sigma_tilde =
            DMatrix::from_row_slice(2, 2, &[sigma1, 0.0, sigma2 * rho, sigma2 * (1.0 - rho * rho).max(0.0).sqrt()]);
        AffineModelSpec {
            p: 1,
            mean_reversion: DVector::from_vec(vec![alpha1, alpha2]),
            long_run_mean: DVector::from_vec(vec![vol_level, beta]),
            sigma: DMatrix::zeros(2, 2),
            sigma_tilde,
            rate_loading: DVector::from_vec(vec![0.0, 1.0]),
            rate_shift: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::models::*;
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cir_and_hull_white_are_admissible() {
        assert!(validate_admissibility(&cir(0.45, 0.001, 0.017)).unwrap().is_empty());
        assert!(validate_admissibility(&hull_white2(0.03, 0.23, 0.02, 0.02, -0.5)).unwrap().is_empty());
        assert!(validate_admissibility(&stochastic_vol(0.1, 0.3, 0.1, 0.03, 0.3, 0.07, -0.5)).unwrap().is_empty());
    }

    #[test]
    fn both_diffusions_nonzero_is_a_violation() {
        let mut spec = cir(0.45, 0.001, 0.017);
        spec.sigma[(0, 0)] = 0.01;
        let v = validate_admissibility(&spec).unwrap();
        assert!(v.contains(&Violation::NeitherRegime));
        assert!(matches!(spec.ensure_admissible(), Err(Error::Inadmissible(_))));
    }

    #[test]
    fn square_root_regime_needs_a_positive_factor() {
        let mut spec = cir(0.45, 0.001, 0.017);
        spec.p = 0;
        assert!(validate_admissibility(&spec).unwrap().contains(&Violation::SquareRootWithoutPositiveFactor));
    }

    #[test]
    fn gaussian_diffusion_on_positive_factor_is_rejected() {
        let mut spec = hull_white2(0.03, 0.23, 0.02, 0.02, -0.5);
        spec.p = 1;
        let v = validate_admissibility(&spec).unwrap();
        assert!(v.contains(&Violation::DiffusionOnPositiveFactors { row: 0, col: 0 }));
    }

    #[test]
    fn negative_long_run_mean_is_rejected() {
        let spec = cir(0.45, -0.001, 0.017);
        let v = validate_admissibility(&spec).unwrap();
        assert!(v.contains(&Violation::NegativeLongRunMean));
        assert!(v.contains(&Violation::NegativeDrift { factor: 0 }));
    }

    #[test]
    fn dimension_mismatch_is_structural() {
        let mut spec = cir(0.45, 0.001, 0.017);
        spec.long_run_mean = DVector::zeros(2);
        assert!(matches!(validate_admissibility(&spec), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_step_is_identity() {
        let spec = hull_white2(0.03, 0.23, 0.02, 0.02, -0.5);
        let tm = transition_moments(&spec, &DVector::from_vec(vec![0.01, -0.02]), 0.0).unwrap();
        assert_eq!(tm.f, DMatrix::identity(2, 2));
        assert_eq!(tm.offset, DVector::zeros(2));
        assert_eq!(tm.q, DMatrix::zeros(2, 2));
    }

    #[test]
    fn no_mean_reversion_gives_brownian_covariance() {
        let spec = hull_white2(0.0, 0.0, 0.02, 0.03, 0.4);
        let delta = 0.7;
        let tm = transition_moments(&spec, &DVector::zeros(2), delta).unwrap();
        let expected = spec.gamma() * delta;
        assert_relative_eq!(tm.q, expected, epsilon = 1e-15);
    }

    #[test]
    fn negative_step_is_an_error() {
        let spec = cir(0.45, 0.001, 0.017);
        assert!(transition_moments(&spec, &DVector::from_element(1, 0.001), -1.0).is_err());
    }

    #[test]
    fn negative_state_is_floored_inside_the_square_root() {
        let spec = cir(0.45, 0.001, 0.017);
        let tm = transition_moments(&spec, &DVector::from_element(1, -0.3), 0.01).unwrap();
        assert_eq!(tm.q[(0, 0)], 0.0);
    }

    #[test]
    fn cir_transition_moments_match_closed_form() {
        let (a, b, s, x, dt) = (0.45, 0.001, 0.017, 0.005, 1.0 / 252.0);
        let tm = transition_moments(&cir(a, b, s), &DVector::from_element(1, x), dt).unwrap();
        let f = (-a * dt).exp();
        assert_relative_eq!(tm.f[(0, 0)], f, epsilon = 1e-15);
        assert_relative_eq!(tm.offset[0], (1.0 - f) * b, epsilon = 1e-18);
        let q = s * s * x * (1.0 - (-2.0 * a * dt).exp()) / (2.0 * a);
        assert_relative_eq!(tm.q[(0, 0)], q, max_relative = 1e-13);
    }

    #[test]
    fn decay_integral_series_branch_is_continuous() {
        let delta: f64 = 0.3;
        for s in [1e-9, 5e-9, 2e-8, 1e-7] {
            let direct = -(-s * delta).exp_m1() / s;
            assert_relative_eq!(decay_integral(s, delta), direct, max_relative = 1e-14);
        }
        assert_eq!(decay_integral(0.0, delta), delta);
    }

    #[test]
    fn zero_riccati_solution_gives_zero_map() {
        let spec = cir(0.45, 0.001, 0.017);
        let sols = vec![RiccatiSolution::initial(0.0, DVector::zeros(1)); 2];
        let map = build_observation_map(&spec, &[1.0, 2.0], &sols, 1e-8).unwrap();
        assert_eq!(map.h, DMatrix::zeros(2, 1));
        assert_eq!(map.h0, DVector::zeros(2));
    }

    #[test]
    fn nonpositive_maturity_is_rejected() {
        let spec = cir(0.45, 0.001, 0.017);
        let sols = vec![RiccatiSolution::initial(0.0, DVector::zeros(1)); 2];
        assert!(build_observation_map(&spec, &[1.0, 0.0], &sols, 1e-8).is_err());
        assert!(build_observation_map(&spec, &[1.0, -2.0], &sols, 1e-8).is_err());
    }

    #[test]
    fn bond_price_values() {
        let z = DVector::zeros(2);
        assert_eq!(bond_price(0.0, &z, &z), 1.0);
        assert_relative_eq!(bond_price(-1.0, &z, &z), (-1.0f64).exp());
    }

    #[test]
    fn hull_white_rows_match_closed_form() {
        let (a1, a2) = (0.03, 0.23);
        let spec = hull_white2(a1, a2, 0.02, 0.02, -0.5);
        let taus: Vec<f64> = (1..=30).map(f64::from).collect();
        let map = ObservationMap::for_spec(&spec, &taus, 6e-7, &SolverSettings::default()).unwrap();
        for (l, tau) in taus.iter().enumerate() {
            for (j, a) in [a1, a2].iter().enumerate() {
                let b = (1.0 - (-a * tau).exp()) / a;
                assert_relative_eq!(map.h[(l, j)], b / tau, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn bond_price_is_exp_of_minus_tau_yield() {
        let spec = cir(0.45, 0.001, 0.017);
        let taus = [0.5, 1.0, 7.0, 30.0];
        let params = RiccatiParams::from_spec(&spec).unwrap();
        let sols = params.solve_horizons(&DVector::zeros(1), &taus, &SolverSettings::default()).unwrap();
        let map = build_observation_map(&spec, &taus, &sols, 1e-8).unwrap();
        let x = DVector::from_element(1, 0.005);
        let y = map.yields(&x);
        for (l, tau) in taus.iter().enumerate() {
            let p = bond_price(sols[l].phi, &sols[l].psi, &x);
            assert_relative_eq!(p, (-tau * y[l]).exp(), max_relative = 1e-13);
            assert!(p > 0.0 && p < 1.0);
        }
    }
}

//! Parameter layouts: how a flat parameter vector populates a model spec.

use serde::{Deserialize, Serialize};

use crate::affine::{models, AffineModelSpec};
use crate::error::{Error, Result};
use crate::smc::{OrderConstraint, ParamSpace};

/// Long-run level of the volatility factor in the stochastic-volatility
/// model. Fixed, otherwise the model is over-parametrized.
pub const SV_VOL_LEVEL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    /// `theta = (alpha, beta, sigma)`.
    Cir,
    /// `theta = (alpha1, alpha2, sigma1, sigma2, rho)`.
    Hw2,
    /// `theta = (alpha1, alpha2, beta, sigma1, sigma2, rho)`.
    Hwsv,
}

impl ModelFamily {
    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            ModelFamily::Cir => &["alpha", "beta", "sigma"],
            ModelFamily::Hw2 => &["alpha1", "alpha2", "sigma1", "sigma2", "rho"],
            ModelFamily::Hwsv => &["alpha1", "alpha2", "beta", "sigma1", "sigma2", "rho"],
        }
    }

    pub fn n_params(&self) -> usize {
        self.param_names().len()
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ModelFamily::Cir => 1,
            _ => 2,
        }
    }

    /// True when the transition is exactly linear-Gaussian for every theta.
    pub fn is_gaussian(&self) -> bool {
        matches!(self, ModelFamily::Hw2)
    }

    pub fn spec(&self, theta: &[f64]) -> Result<AffineModelSpec> {
        if theta.len() != self.n_params() {
            return Err(Error::dim(format!("{:?} expects {} parameters, got {}", self, self.n_params(), theta.len())));
        }
        Ok(match self {
            ModelFamily::Cir => models::cir(theta[0], theta[1], theta[2]),
            ModelFamily::Hw2 => models::hull_white2(theta[0], theta[1], theta[2], theta[3], theta[4]),
            ModelFamily::Hwsv => {
                models::stochastic_vol(theta[0], theta[1], SV_VOL_LEVEL, theta[2], theta[3], theta[4], theta[5])
            }
        })
    }

    /// Box from prior bounds, plus the factor ordering for the exchangeable
    /// two-factor Hull-White model when both mean-reversion speeds are free
    /// and share a prior.
    pub fn param_space(&self, lo: Vec<f64>, hi: Vec<f64>) -> Result<ParamSpace> {
        if lo.len() != self.n_params() || hi.len() != self.n_params() {
            return Err(Error::dim(format!("{:?} expects {} prior bounds", self, self.n_params())));
        }
        let mut ordered = vec![];
        if *self == ModelFamily::Hw2 {
            let free = |j: usize| lo[j] < hi[j];
            let same = |i: usize, j: usize| lo[i] == lo[j] && hi[i] == hi[j];
            if free(0) && free(1) && same(0, 1) && same(2, 3) {
                ordered.push(OrderConstraint { lower: 0, upper: 1, carry: vec![(2, 3)] });
            }
        }
        ParamSpace::with_ordering(lo, hi, ordered)
    }
}

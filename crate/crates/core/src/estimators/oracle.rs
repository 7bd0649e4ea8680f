use serde::{Deserialize, Serialize};

use crate::affine::{ObservationMap, Regime, TransitionKernel};
use crate::error::{Error, Result};
use crate::kalman::{kf_predict, kf_update, GaussianState};
use crate::model::ModelFamily;
use crate::riccati::SolverSettings;
use crate::simkit::ObservationSeries;
use crate::smc::normalize_log_weights;

/// Exact posterior over a finite parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPosterior {
    pub grid: Vec<Vec<f64>>,
    /// `weights[k][g]`: posterior mass of grid point `g` after `k + 1` steps.
    pub weights: Vec<Vec<f64>>,
    /// Cumulative log-likelihood of each grid point after the last step.
    pub total_loglik: Vec<f64>,
}

/// Posterior over `grid` under the prior `prior` (uniform when `None`),
/// with each point's likelihood evaluated by an exact Kalman filter.
/// Only linear-Gaussian models are supported.
pub fn grid_posterior_oracle(
    series: &ObservationSeries,
    family: ModelFamily,
    grid: &[Vec<f64>],
    prior: Option<&[f64]>,
    x0_prior: &GaussianState,
    solver: &SolverSettings,
) -> Result<GridPosterior> {
    if grid.is_empty() {
        return Err(Error::arg("grid must contain at least one point"));
    }
    if !family.is_gaussian() {
        return Err(Error::UnsupportedRegime(format!("{family:?} has state-dependent volatility")));
    }
    let log_prior: Vec<f64> = match prior {
        Some(p) if p.len() != grid.len() => return Err(Error::dim("one prior weight per grid point is required")),
        Some(p) if p.iter().any(|w| !(*w >= 0.0)) => return Err(Error::arg("prior weights must be non-negative")),
        Some(p) => p.iter().map(|w| w.ln()).collect(),
        None => vec![0.0; grid.len()],
    };
    series.validate()?;
    let deltas = series.deltas();

    let mut per_point: Vec<Vec<f64>> = Vec::with_capacity(grid.len());
    for theta in grid {
        let spec = family.spec(theta)?;
        spec.ensure_admissible()?;
        if spec.regime() != Some(Regime::Gaussian) {
            return Err(Error::UnsupportedRegime("grid point with state-dependent volatility".into()));
        }
        let map = ObservationMap::for_spec(&spec, &series.maturities, series.noise_var, solver)?;
        let mut state = x0_prior.clone();
        let mut lls = Vec::with_capacity(series.len());
        for (y, dt) in series.y.iter().zip(&deltas) {
            let tm = TransitionKernel::new(&spec, *dt)?.moments(&state.mean);
            let upd = kf_update(&kf_predict(&state, &tm), &map, y)?;
            lls.push(upd.loglik);
            state = upd.posterior;
        }
        per_point.push(lls);
    }

    let mut cum = log_prior;
    let mut weights = Vec::with_capacity(series.len());
    for k in 0..series.len() {
        for (c, lls) in cum.iter_mut().zip(&per_point) {
            *c += lls[k];
        }
        weights.push(normalize_log_weights(&cum).map_err(|_| Error::Degeneracy { step: k + 1 })?);
    }
    let total_loglik = per_point.iter().map(|l| l.iter().sum()).collect();
    Ok(GridPosterior { grid: grid.to_vec(), weights, total_loglik })
}

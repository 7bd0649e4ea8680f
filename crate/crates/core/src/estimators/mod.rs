//! Online estimators: the Kalman particle filter (static and piecewise-
//! constant parameters), the nested particle-filter baseline, and the exact
//! grid posterior used as a reference.

mod kpf;
mod oracle;
mod rnpf;

pub use kpf::{kpf_run, kpf_tv_run, Kpf, KpfConfig};
pub use oracle::{grid_posterior_oracle, GridPosterior};
pub use rnpf::{rnpf_run, RnpfConfig};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::affine::{ObservationMap, TransitionKernel};
use crate::error::Result;
use crate::kalman::{GaussianState, PreparedObservation};
use crate::model::ModelFamily;
use crate::riccati::SolverSettings;
use crate::simkit::ObservationSeries;
use crate::smc::cloud_moments;

/// Stream tags separating the random draws of one step.
pub(crate) mod tags {
    pub const INIT: u64 = 1;
    pub const JITTER: u64 = 2;
    pub const RESAMPLE: u64 = 3;
    pub const INNER: u64 = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Shrinkage kernel, full Kalman replay per particle.
    NonRecursive,
    /// Random-walk kernel, one Kalman step from the carried state.
    Recursive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// 1-based observation index.
    pub step: usize,
    pub time: f64,
    /// Weighted parameter mean and standard deviation before resampling.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Largest per-particle `log p(y_k | y_{1:k-1}, theta)`.
    pub max_loglik: f64,
    /// Standard deviation of the jitter applied at this step.
    pub jitter_std: Vec<f64>,
    pub phase: Phase,
    pub reset: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_cov: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTrace {
    pub param_names: Vec<String>,
    pub rows: Vec<TraceRow>,
    /// Step at which each segment entered the recursive phase.
    pub switch_steps: Vec<usize>,
    /// Steps at which a change point was declared.
    pub reset_steps: Vec<usize>,
}

impl PosteriorTrace {
    pub fn new(family: ModelFamily) -> Self {
        Self {
            param_names: family.param_names().iter().map(|s| s.to_string()).collect(),
            rows: vec![],
            switch_steps: vec![],
            reset_steps: vec![],
        }
    }

    pub fn first_switch(&self) -> Option<usize> {
        self.switch_steps.first().copied()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

/// Everything that depends on one parameter value: the observation map
/// (one Riccati sweep) and the transition kernels for each step size.
#[derive(Debug, Clone)]
pub struct ThetaModel {
    pub theta: Vec<f64>,
    pub obs: PreparedObservation,
    pub kernels: Vec<TransitionKernel>,
}

impl ThetaModel {
    pub fn build(
        family: ModelFamily,
        theta: &[f64],
        maturities: &[f64],
        noise_var: f64,
        deltas: &[f64],
        solver: &SolverSettings,
    ) -> Result<Self> {
        let spec = family.spec(theta)?;
        spec.ensure_admissible()?;
        let map = ObservationMap::for_spec(&spec, maturities, noise_var, solver)?;
        let kernels = deltas.iter().map(|d| TransitionKernel::new(&spec, *d)).collect::<Result<Vec<_>>>()?;
        Ok(Self { theta: theta.to_vec(), obs: PreparedObservation::new(&map), kernels })
    }
}

/// Step sizes of a series, de-duplicated.
#[derive(Debug, Clone)]
pub(crate) struct Schedule {
    pub deltas: Vec<f64>,
    pub kernel_of_step: Vec<usize>,
}

impl Schedule {
    pub fn of(series: &ObservationSeries) -> Self {
        let (deltas, kernel_of_step) = series.step_schedule();
        Self { deltas, kernel_of_step }
    }
}

/// Weighted mean/std of the particles and the jitter-independent parts of a
/// trace row.
pub(crate) fn summarize(particles: &[Vec<f64>], weights: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, c) = cloud_moments(particles, weights)?;
    Ok((m.as_slice().to_vec(), c.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()))
}

/// Weighted average of per-particle Kalman posteriors (law of total
/// variance for the covariance).
pub(crate) fn mixture_moments(states: &[&GaussianState], weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = states[0].dim();
    let mut mean = DVector::zeros(d);
    for (s, w) in states.iter().zip(weights) {
        mean += &s.mean * *w;
    }
    let mut cov = DMatrix::zeros(d, d);
    for (s, w) in states.iter().zip(weights) {
        let dm = &s.mean - &mean;
        cov += (&s.cov + &dm * dm.transpose()) * *w;
    }
    (mean.as_slice().to_vec(), cov.as_slice().to_vec())
}

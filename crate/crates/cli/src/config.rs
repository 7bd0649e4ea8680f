//! Experiment configuration, read from JSON.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use kpf_core::estimators::{KpfConfig, RnpfConfig};
use kpf_core::kalman::GaussianState;
use kpf_core::model::ModelFamily;
use kpf_core::simkit::Scenario;
use kpf_core::smc::{JitterConfig, Resampling};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelBlock,
    pub data: DataBlock,
    #[serde(default)]
    pub estimator: Option<EstimatorBlock>,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    #[serde(rename = "type")]
    pub family: ModelFamily,
    /// True values for simulation; also the pinned value of fixed parameters.
    pub theta: Vec<f64>,
    /// Parameter names held at `theta` instead of estimated.
    #[serde(default)]
    pub fixed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    /// First step (1-based) under the new parameters.
    pub step: usize,
    pub theta: Vec<f64>,
}

/// Either a dataset on disk (`path`) or simulation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub steps: usize,
    #[serde(default)]
    pub maturities: Vec<f64>,
    /// Observation-noise variance `h`. Optional with `path` when the truth
    /// sidecar next to the dataset records it.
    #[serde(default)]
    pub noise_var: Option<f64>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub jumps: Vec<Jump>,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_substeps() -> usize {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Kpf,
    KpfTv,
    Rnpf,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorBlock {
    pub kind: EstimatorKind,
    #[serde(default = "default_particles")]
    pub n_particles: usize,
    /// Latent particles per parameter particle (RNPF).
    #[serde(default = "default_inner")]
    pub n_inner: usize,
    #[serde(default = "default_a")]
    pub a: f64,
    /// Switching level; defaults to `N^{-3/2}`.
    #[serde(default)]
    pub v_n: Option<f64>,
    /// Kernel-2 variance floor; defaults to `V_N / 100`.
    #[serde(default)]
    pub v_f: Option<f64>,
    /// Change-point threshold (kpf_tv).
    #[serde(default)]
    pub b: Option<f64>,
    #[serde(default)]
    pub prior_lo: Vec<f64>,
    #[serde(default)]
    pub prior_hi: Vec<f64>,
    pub x0_mean: Vec<f64>,
    /// Diagonal of the initial state covariance.
    pub x0_var: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub resampling: Resampling,
    #[serde(default)]
    pub replay_window: Option<usize>,
    /// Parameter grid (oracle).
    #[serde(default)]
    pub grid: Vec<Vec<f64>>,
    /// Prior weights over the grid; uniform when absent.
    #[serde(default)]
    pub grid_prior: Option<Vec<f64>>,
}

fn default_particles() -> usize {
    1000
}

fn default_inner() -> usize {
    150
}

fn default_a() -> f64 {
    0.98
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Add the particle-averaged state posterior to the trace.
    #[serde(default)]
    pub emit_state: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        // Relative dataset paths are relative to the config file.
        if let (Some(p), Some(dir)) = (&cfg.data.path, path.parent()) {
            if p.is_relative() {
                cfg.data.path = Some(dir.join(p));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let fam = self.model.family;
        let n = fam.n_params();
        if self.model.theta.len() != n {
            return Err(CliError::config(format!(
                "model.theta: {fam:?} takes {n} parameters, got {}",
                self.model.theta.len()
            )));
        }
        for name in &self.model.fixed {
            if !fam.param_names().contains(&name.as_str()) {
                return Err(CliError::config(format!(
                    "model.fixed: unknown parameter {name:?} (expected one of {:?})",
                    fam.param_names()
                )));
            }
        }
        fam.spec(&self.model.theta)?.ensure_admissible()?;
        if self.data.path.is_none() {
            if self.data.maturities.is_empty() {
                return Err(CliError::config("data.maturities: at least one maturity is required"));
            }
            match self.data.noise_var {
                Some(h) if h >= 0.0 && h.is_finite() => {}
                _ => return Err(CliError::config("data.noise_var: a nonnegative noise variance is required")),
            }
            if let Some(x0) = &self.data.x0 {
                if x0.len() != fam.state_dim() {
                    return Err(CliError::config(format!("data.x0: expected {} entries", fam.state_dim())));
                }
            }
            let mut last = 1;
            for (i, j) in self.data.jumps.iter().enumerate() {
                if j.step <= last || j.step > self.data.steps {
                    return Err(CliError::config(format!(
                        "data.jumps[{i}].step: must increase and lie in 2..={}",
                        self.data.steps
                    )));
                }
                if j.theta.len() != n {
                    return Err(CliError::config(format!("data.jumps[{i}].theta: expected {n} parameters")));
                }
                last = j.step;
            }
        }
        if let Some(est) = &self.estimator {
            self.validate_estimator(est)?;
        }
        Ok(())
    }

    fn validate_estimator(&self, est: &EstimatorBlock) -> CliResult<()> {
        let fam = self.model.family;
        let n = fam.n_params();
        if est.x0_mean.len() != fam.state_dim() || est.x0_var.len() != fam.state_dim() {
            return Err(CliError::config(format!("estimator.x0_mean/x0_var: expected {} entries", fam.state_dim())));
        }
        match est.kind {
            EstimatorKind::Oracle => {
                if est.grid.is_empty() || est.grid.iter().any(|g| g.len() != n) {
                    return Err(CliError::config(format!("estimator.grid: nonempty list of {n}-vectors required")));
                }
            }
            _ => {
                if est.prior_lo.len() != n || est.prior_hi.len() != n {
                    return Err(CliError::config(format!("estimator.prior_lo/prior_hi: expected {n} bounds each")));
                }
                if let Some((j, _)) = est.prior_lo.iter().zip(&est.prior_hi).enumerate().find(|(_, (l, h))| !(l <= h)) {
                    return Err(CliError::config(format!("estimator.prior_lo[{j}] exceeds prior_hi[{j}]")));
                }
            }
        }
        if est.kind == EstimatorKind::KpfTv && est.b.is_none() {
            return Err(CliError::config("estimator.b: kpf_tv needs a jump threshold"));
        }
        Ok(())
    }

    /// Prior bounds covering the truth, or a note per coordinate that does not.
    pub fn prior_warnings(&self) -> Vec<String> {
        let Some(est) = &self.estimator else {
            return vec![];
        };
        if est.kind == EstimatorKind::Oracle {
            return vec![];
        }
        let (lo, hi) = self.prior_bounds(est);
        let names = self.model.family.param_names();
        self.truth_thetas()
            .iter()
            .flat_map(|theta| {
                (0..theta.len())
                    .filter(|j| theta[*j] < lo[*j] || theta[*j] > hi[*j])
                    .map(|j| format!("true {} = {} lies outside the prior [{}, {}]", names[j], theta[j], lo[j], hi[j]))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    fn truth_thetas(&self) -> Vec<Vec<f64>> {
        if self.data.path.is_some() {
            return vec![];
        }
        std::iter::once(self.model.theta.clone()).chain(self.data.jumps.iter().map(|j| j.theta.clone())).collect()
    }

    /// Prior bounds with fixed parameters pinned at their model value.
    pub fn prior_bounds(&self, est: &EstimatorBlock) -> (Vec<f64>, Vec<f64>) {
        let names = self.model.family.param_names();
        let (mut lo, mut hi) = (est.prior_lo.clone(), est.prior_hi.clone());
        for name in &self.model.fixed {
            let j = names.iter().position(|n| n == name).expect("validated");
            lo[j] = self.model.theta[j];
            hi[j] = self.model.theta[j];
        }
        (lo, hi)
    }

    pub fn scenario(&self) -> Scenario {
        let fam = self.model.family;
        let mut segments = vec![];
        let mut start = 1;
        let mut theta = self.model.theta.clone();
        for j in &self.data.jumps {
            segments.push((j.step - start, theta));
            start = j.step;
            theta = j.theta.clone();
        }
        segments.push((self.data.steps + 1 - start, theta));
        Scenario {
            family: fam,
            segments,
            maturities: self.data.maturities.clone(),
            noise_var: self.data.noise_var.unwrap_or(0.0),
            x0: self.data.x0.clone().unwrap_or_else(|| vec![0.0; fam.state_dim()]),
            substeps: self.data.substeps,
        }
    }

    pub fn x0_prior(est: &EstimatorBlock) -> CliResult<GaussianState> {
        GaussianState::new(
            DVector::from_column_slice(&est.x0_mean),
            DMatrix::from_diagonal(&DVector::from_column_slice(&est.x0_var)),
        )
        .map_err(|e| CliError::config(format!("estimator.x0_var: {e}")))
    }

    pub fn kpf_config(&self, est: &EstimatorBlock) -> CliResult<KpfConfig> {
        let (lo, hi) = self.prior_bounds(est);
        let mut cfg = KpfConfig::new(self.model.family, est.n_particles, est.a, lo, hi, Self::x0_prior(est)?, est.seed);
        let defaults = JitterConfig::for_particles(est.a, est.n_particles);
        let v_n = est.v_n.unwrap_or(defaults.v_n);
        cfg.jitter = JitterConfig { a: est.a, v_n, v_f: est.v_f.unwrap_or(v_n / 100.0) };
        cfg.jump_threshold = est.b;
        cfg.resampling = est.resampling;
        cfg.replay_window = est.replay_window;
        cfg.record_state = self.output.emit_state;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn rnpf_config(&self, est: &EstimatorBlock) -> CliResult<RnpfConfig> {
        let (lo, hi) = self.prior_bounds(est);
        let mut cfg =
            RnpfConfig::new(self.model.family, est.n_particles, est.n_inner, lo, hi, Self::x0_prior(est)?, est.seed);
        if let Some(v) = est.v_n {
            cfg.jitter_var = v;
        }
        cfg.resampling = est.resampling;
        cfg.record_state = self.output.emit_state;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cir() -> ExperimentConfig {
        serde_json::from_str(
            r#"{
                "model": {"type": "cir", "theta": [0.45, 0.001, 0.017]},
                "data": {"steps": 20, "maturities": [1, 2, 5], "noise_var": 1e-8, "x0": [0.005], "seed": 3},
                "estimator": {"kind": "kpf", "n_particles": 50, "prior_lo": [0, 0, 0], "prior_hi": [1, 0.01, 0.1],
                              "x0_mean": [0.005], "x0_var": [0.01], "seed": 4}
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn parses_and_validates() {
        let cfg = cir();
        cfg.validate().unwrap();
        let est = cfg.estimator.as_ref().unwrap();
        let kpf = cfg.kpf_config(est).unwrap();
        assert_eq!(kpf.jitter.v_n, 50f64.powf(-1.5));
        assert_eq!(kpf.jitter.v_f, kpf.jitter.v_n / 100.0);
        assert!(cfg.prior_warnings().is_empty());
    }

    #[test]
    fn fixed_parameters_are_pinned() {
        let mut cfg = cir();
        cfg.model.fixed = vec!["beta".into()];
        let (lo, hi) = cfg.prior_bounds(cfg.estimator.as_ref().unwrap());
        assert_eq!((lo[1], hi[1]), (0.001, 0.001));
        cfg.model.fixed = vec!["gamma".into()];
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn jumps_split_the_scenario() {
        let mut cfg = cir();
        cfg.data.jumps = vec![Jump { step: 11, theta: vec![0.55, 0.0015, 0.023] }];
        cfg.validate().unwrap();
        let sc = cfg.scenario();
        assert_eq!(sc.segments.len(), 2);
        assert_eq!((sc.segments[0].0, sc.segments[1].0), (10, 10));
        cfg.data.jumps[0].step = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn uncovered_truth_warns() {
        let mut cfg = cir();
        cfg.estimator.as_mut().unwrap().prior_hi[0] = 0.4;
        assert_eq!(cfg.prior_warnings().len(), 1);
    }

    #[test]
    fn field_errors_name_the_field() {
        let mut cfg = cir();
        cfg.estimator.as_mut().unwrap().prior_lo.pop();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("estimator.prior_lo"), "{msg}");
        let bad = serde_json::from_str::<ExperimentConfig>(
            r#"{"model": {"type": "cir", "theta": [1, 2, 3], "colour": 1}, "data": {}}"#,
        );
        assert!(bad.unwrap_err().to_string().contains("line"));
    }
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use kpf_core::estimators::{grid_posterior_oracle, kpf_run, kpf_tv_run, rnpf_run, Phase, PosteriorTrace, TraceRow};
use kpf_core::riccati::SolverSettings;
use kpf_core::simkit::ObservationSeries;

use crate::config::{EstimatorKind, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::io::{self, TraceTable, TruthFile};

fn out_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> CliResult<PathBuf> {
    let dir = flag.map(Path::to_path_buf).or_else(|| cfg.output.dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

fn simulate_series(cfg: &ExperimentConfig) -> CliResult<ObservationSeries> {
    Ok(cfg.scenario().simulate(&mut ChaCha8Rng::seed_from_u64(cfg.data.seed))?)
}

/// Writes `dataset.csv` and `dataset.truth.json`; returns the dataset path.
pub fn simulate(cfg: &ExperimentConfig, out: Option<&Path>, seed: Option<u64>) -> CliResult<PathBuf> {
    if cfg.data.path.is_some() {
        return Err(CliError::config("data.path: simulate needs simulation settings, not a dataset path"));
    }
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    let dir = out_dir(&cfg, out)?;
    let series = simulate_series(&cfg)?;
    let path = dir.join("dataset.csv");
    io::write_dataset(&path, &series)?;
    let truth = series.truth.as_ref().expect("simulated series carry their truth");
    io::write_json(&io::sidecar_path(&path), &TruthFile::new(truth, series.noise_var, cfg.data.seed))?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub estimator: EstimatorKind,
    pub param_names: Vec<String>,
    pub steps: usize,
    pub final_mean: Vec<f64>,
    pub final_std: Vec<f64>,
    pub switch_step: Option<usize>,
    pub switch_steps: Vec<usize>,
    pub reset_steps: Vec<usize>,
    pub wall_clock_seconds: f64,
    pub data_seed: Option<u64>,
    pub estimator_seed: u64,
    /// Resolved configuration; rerunning it reproduces the trace.
    pub config: ExperimentConfig,
}

fn load_series(cfg: &ExperimentConfig) -> CliResult<(ObservationSeries, Option<u64>)> {
    let Some(path) = &cfg.data.path else {
        return Ok((simulate_series(cfg)?, Some(cfg.data.seed)));
    };
    let sidecar = io::sidecar_path(path);
    let truth: Option<TruthFile> = if sidecar.exists() { Some(io::read_json(&sidecar)?) } else { None };
    let noise_var = match (cfg.data.noise_var, &truth) {
        (Some(h), _) => h,
        (None, Some(t)) => t.noise_var,
        (None, None) => {
            return Err(CliError::config(format!(
                "data.noise_var: required because {} has no truth sidecar",
                path.display()
            )))
        }
    };
    Ok((io::read_dataset(path, noise_var)?, truth.map(|t| t.data_seed)))
}

/// Posterior mean/std over the grid, one row per step.
fn oracle_trace(cfg: &ExperimentConfig, series: &ObservationSeries) -> CliResult<(PosteriorTrace, Vec<Vec<f64>>)> {
    let est = cfg.estimator.as_ref().expect("checked by caller");
    let post = grid_posterior_oracle(
        series,
        cfg.model.family,
        &est.grid,
        est.grid_prior.as_deref(),
        &ExperimentConfig::x0_prior(est)?,
        &SolverSettings::default(),
    )?;
    let mut trace = PosteriorTrace::new(cfg.model.family);
    let d = cfg.model.family.n_params();
    for (k, w) in post.weights.iter().enumerate() {
        let mean: Vec<f64> = (0..d).map(|j| post.grid.iter().zip(w).map(|(g, wg)| wg * g[j]).sum()).collect();
        let std = (0..d)
            .map(|j| post.grid.iter().zip(w).map(|(g, wg)| wg * (g[j] - mean[j]).powi(2)).sum::<f64>().sqrt())
            .collect();
        trace.rows.push(TraceRow {
            step: k + 1,
            time: series.times[k],
            mean,
            std,
            max_loglik: f64::NAN,
            jitter_std: vec![0.0; d],
            phase: Phase::Recursive,
            reset: false,
            state_mean: None,
            state_cov: None,
        });
    }
    Ok((trace, post.weights))
}

/// Runs the configured estimator; writes `trace.csv` and `summary.json`
/// (plus `oracle_weights.csv` for the oracle).
pub fn calibrate(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
) -> CliResult<Summary> {
    let mut cfg = cfg.clone();
    if let Some(p) = data {
        cfg.data.path = Some(p.to_path_buf());
    }
    let Some(est) = cfg.estimator.as_mut() else {
        return Err(CliError::config("estimator: calibrate needs an estimator block"));
    };
    if let Some(s) = seed {
        est.seed = s;
    }
    cfg.validate()?;
    for w in cfg.prior_warnings() {
        eprintln!("warning: {w}");
    }
    let est = cfg.estimator.clone().expect("present");
    let dir = out_dir(&cfg, out)?;
    let (series, data_seed) = load_series(&cfg)?;
    let t0 = Instant::now();
    let trace = match est.kind {
        EstimatorKind::Kpf => kpf_run(&series, &cfg.kpf_config(&est)?)?,
        EstimatorKind::KpfTv => kpf_tv_run(&series, &cfg.kpf_config(&est)?)?,
        EstimatorKind::Rnpf => rnpf_run(&series, &cfg.rnpf_config(&est)?)?,
        EstimatorKind::Oracle => {
            let (trace, weights) = oracle_trace(&cfg, &series)?;
            write_oracle_weights(&dir.join("oracle_weights.csv"), &weights)?;
            trace
        }
    };
    let secs = t0.elapsed().as_secs_f64();
    let phase = (est.kind == EstimatorKind::Oracle).then_some("exact");
    io::write_trace(&dir.join("trace.csv"), &trace, phase)?;
    let last = trace.last();
    let summary = Summary {
        estimator: est.kind,
        param_names: trace.param_names.clone(),
        steps: trace.rows.len(),
        final_mean: last.map(|r| r.mean.clone()).unwrap_or_default(),
        final_std: last.map(|r| r.std.clone()).unwrap_or_default(),
        switch_step: trace.first_switch(),
        switch_steps: trace.switch_steps.clone(),
        reset_steps: trace.reset_steps.clone(),
        wall_clock_seconds: secs,
        data_seed,
        estimator_seed: est.seed,
        config: cfg,
    };
    io::write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn write_oracle_weights(path: &Path, weights: &[Vec<f64>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    let g = weights.first().map_or(0, |r| r.len());
    let header = std::iter::once("step".to_string()).chain((0..g).map(|i| format!("w_{i}")));
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for (k, row) in weights.iter().enumerate() {
        let rec = std::iter::once((k + 1).to_string()).chain(row.iter().map(|v| v.to_string()));
        w.write_record(rec).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMetrics {
    pub final_abs_error: BTreeMap<String, f64>,
    /// Root mean square of the final absolute errors.
    pub final_rmse: f64,
    /// Root mean square of the final errors relative to the true values.
    pub final_rel_rmse: f64,
    pub switch_steps: Vec<usize>,
    pub reset_steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub param_names: Vec<String>,
    pub series: BTreeMap<String, SeriesMetrics>,
}

/// Error trajectories and final metrics of labelled traces against the truth.
/// Writes `errors.csv`, `metrics.json` and the long-format `plot.csv`.
pub fn report(traces: &[(String, PathBuf)], truth: &Path, out: &Path) -> CliResult<Metrics> {
    if traces.is_empty() {
        return Err(CliError::config("report needs at least one trace"));
    }
    let truth: TruthFile = io::read_json(truth)?;
    let tables: Vec<(String, TraceTable)> =
        traces.iter().map(|(l, p)| Ok((l.clone(), io::read_trace(p)?))).collect::<CliResult<_>>()?;
    let names = tables[0].1.param_names.clone();
    for (label, t) in &tables {
        if t.param_names != names {
            return Err(CliError::config(format!(
                "trace {label:?} has parameters {:?}, expected {names:?}",
                t.param_names
            )));
        }
    }
    if names != truth.param_names {
        return Err(CliError::config(format!("truth has parameters {:?}, traces have {names:?}", truth.param_names)));
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;

    let errors_path = out.join("errors.csv");
    let plot_path = out.join("plot.csv");
    let mut errors = csv::Writer::from_path(&errors_path).map_err(|e| CliError::io(&errors_path, e))?;
    let mut plot = csv::Writer::from_path(&plot_path).map_err(|e| CliError::io(&plot_path, e))?;
    let werr = |e| CliError::io(out, e);
    errors.write_record(["step", "series", "parameter", "abs_error"]).map_err(werr)?;
    plot.write_record(["step", "series", "value"]).map_err(werr)?;

    let mut metrics = Metrics { param_names: names.clone(), series: BTreeMap::new() };
    let longest = tables.iter().max_by_key(|(_, t)| t.rows.len()).map(|(_, t)| t.rows.len()).unwrap_or(0);
    for step in 1..=longest {
        if let Some(theta) = truth.theta_at(step) {
            for (j, n) in names.iter().enumerate() {
                plot.write_record([step.to_string(), format!("truth/{n}"), theta[j].to_string()]).map_err(werr)?;
            }
        }
    }
    for (label, table) in &tables {
        let mut last_err = vec![f64::NAN; names.len()];
        let mut last_theta: Vec<f64> = vec![];
        for row in &table.rows {
            let theta = truth
                .theta_at(row.step)
                .ok_or_else(|| CliError::config(format!("trace {label:?} step {} precedes the truth", row.step)))?;
            for (j, n) in names.iter().enumerate() {
                let err = (row.mean[j] - theta[j]).abs();
                last_err[j] = err;
                errors.write_record([row.step.to_string(), label.clone(), n.clone(), err.to_string()]).map_err(werr)?;
                let step = row.step.to_string();
                plot.write_record([step.clone(), format!("{label}/mean_{n}"), row.mean[j].to_string()])
                    .map_err(werr)?;
                plot.write_record([step.clone(), format!("{label}/std_{n}"), row.std[j].to_string()]).map_err(werr)?;
                plot.write_record([step, format!("{label}/abs_error_{n}"), err.to_string()]).map_err(werr)?;
            }
            last_theta = theta.to_vec();
        }
        let k = names.len() as f64;
        let rmse = (last_err.iter().map(|e| e * e).sum::<f64>() / k).sqrt();
        let rel = (last_err.iter().zip(&last_theta).map(|(e, t)| (e / t.abs()).powi(2)).sum::<f64>() / k).sqrt();
        metrics.series.insert(
            label.clone(),
            SeriesMetrics {
                final_abs_error: names.iter().cloned().zip(last_err.iter().copied()).collect(),
                final_rmse: rmse,
                final_rel_rmse: rel,
                switch_steps: table.switch_steps(),
                reset_steps: table.reset_steps(),
            },
        );
    }
    errors.flush().map_err(|e| CliError::io(&errors_path, e))?;
    plot.flush().map_err(|e| CliError::io(&plot_path, e))?;
    io::write_json(&out.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

/// Side-by-side final error table.
pub fn metrics_table(m: &Metrics) -> String {
    let mut s = format!("{:<16}", "series");
    for n in &m.param_names {
        s += &format!(" {:>12}", n);
    }
    s += &format!(" {:>12} {:>12}\n", "rmse", "rel_rmse");
    for (label, sm) in &m.series {
        s += &format!("{label:<16}");
        for n in &m.param_names {
            s += &format!(" {:>12.4e}", sm.final_abs_error[n]);
        }
        s += &format!(" {:>12.4e} {:>12.4e}\n", sm.final_rmse, sm.final_rel_rmse);
    }
    s
}

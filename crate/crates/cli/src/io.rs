//! File formats: dataset CSV (`time,tau_<m>,...`), truth sidecar JSON and
//! per-step trace CSV.

use std::fs::File;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use kpf_core::estimators::{Phase, PosteriorTrace};
use kpf_core::model::ModelFamily;
use kpf_core::simkit::{ObservationSeries, Truth, TruthSegment};

use crate::error::{CliError, CliResult};

/// Truth sidecar written next to a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub family: ModelFamily,
    pub param_names: Vec<String>,
    pub noise_var: f64,
    pub data_seed: u64,
    pub segments: Vec<TruthSegment>,
    pub latent: Vec<Vec<f64>>,
}

impl TruthFile {
    pub fn new(truth: &Truth, noise_var: f64, data_seed: u64) -> Self {
        Self {
            family: truth.family,
            param_names: truth.family.param_names().iter().map(|s| s.to_string()).collect(),
            noise_var,
            data_seed,
            segments: truth.segments.clone(),
            latent: truth.latent.clone(),
        }
    }

    pub fn theta_at(&self, step: usize) -> Option<&[f64]> {
        self.segments.iter().rev().find(|s| s.start_step <= step).map(|s| s.theta.as_slice())
    }
}

/// `data.csv` -> `data.truth.json`.
pub fn sidecar_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("truth.json")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))
}

fn write_record<I, S>(w: &mut csv::Writer<File>, path: &Path, rec: I) -> CliResult<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(rec).map_err(|e| CliError::io(path, e))
}

pub fn write_dataset(path: &Path, series: &ObservationSeries) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    let header = std::iter::once("time".to_string()).chain(series.maturities.iter().map(|m| format!("tau_{m}")));
    write_record(&mut w, path, header)?;
    for (t, y) in series.times.iter().zip(&series.y) {
        write_record(&mut w, path, std::iter::once(t.to_string()).chain(y.iter().map(|v| v.to_string())))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn parse_f64(path: &Path, line: usize, field: &str) -> CliResult<f64> {
    field.trim().parse().map_err(|_| CliError::config(format!("{}:{line}: not a number: {field:?}", path.display())))
}

pub fn read_dataset(path: &Path, noise_var: f64) -> CliResult<ObservationSeries> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let header = r.headers().map_err(|e| CliError::io(path, e))?.clone();
    if header.get(0) != Some("time") || header.len() < 2 {
        return Err(CliError::config(format!("{}:1: expected header time,tau_<m>,...", path.display())));
    }
    let maturities = header
        .iter()
        .skip(1)
        .map(|h| match h.strip_prefix("tau_") {
            Some(m) => parse_f64(path, 1, m),
            None => Err(CliError::config(format!("{}:1: column {h:?} is not tau_<maturity>", path.display()))),
        })
        .collect::<CliResult<Vec<f64>>>()?;
    let (mut times, mut y) = (vec![], vec![]);
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let vals = rec.iter().map(|f| parse_f64(path, i + 2, f)).collect::<CliResult<Vec<f64>>>()?;
        times.push(vals[0]);
        y.push(DVector::from_column_slice(&vals[1..]));
    }
    let series = ObservationSeries { times, maturities, y, noise_var, truth: None };
    series.validate().map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    Ok(series)
}

fn phase_label(p: Phase) -> &'static str {
    match p {
        Phase::NonRecursive => "non_recursive",
        Phase::Recursive => "recursive",
    }
}

/// Writes one row per step; `phase` overrides the phase column when given.
pub fn write_trace(path: &Path, trace: &PosteriorTrace, phase: Option<&str>) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    let names = &trace.param_names;
    let state_dim = trace.rows.first().and_then(|r| r.state_mean.as_ref()).map_or(0, |m| m.len());
    let mut header: Vec<String> =
        ["step", "time", "phase", "reset", "max_loglik"].iter().map(|s| s.to_string()).collect();
    for prefix in ["mean", "std", "jitter_std"] {
        header.extend(names.iter().map(|n| format!("{prefix}_{n}")));
    }
    for prefix in ["state_mean", "state_var"] {
        header.extend((1..=state_dim).map(|i| format!("{prefix}_{i}")));
    }
    write_record(&mut w, path, &header)?;
    for row in &trace.rows {
        let mut rec = vec![
            row.step.to_string(),
            row.time.to_string(),
            phase.unwrap_or(phase_label(row.phase)).to_string(),
            (row.reset as u8).to_string(),
            row.max_loglik.to_string(),
        ];
        for v in row.mean.iter().chain(&row.std).chain(&row.jitter_std) {
            rec.push(v.to_string());
        }
        if state_dim > 0 {
            let m = row.state_mean.as_ref().expect("state recorded on every row");
            let c = row.state_cov.as_ref().expect("state recorded on every row");
            rec.extend(m.iter().map(|v| v.to_string()));
            rec.extend((0..state_dim).map(|i| c[i * state_dim + i].to_string()));
        }
        write_record(&mut w, path, &rec)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub phase: String,
    pub reset: bool,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceTable {
    pub param_names: Vec<String>,
    pub rows: Vec<TraceRecord>,
}

impl TraceTable {
    /// First step in the recursive phase, per segment.
    pub fn switch_steps(&self) -> Vec<usize> {
        let mut out = vec![];
        let mut prev: Option<&str> = None;
        for r in &self.rows {
            let entered = r.phase == "recursive" && (prev != Some("recursive") || r.reset);
            if entered {
                out.push(r.step);
            }
            prev = Some(&r.phase);
        }
        out
    }

    pub fn reset_steps(&self) -> Vec<usize> {
        self.rows.iter().filter(|r| r.reset).map(|r| r.step).collect()
    }
}

pub fn read_trace(path: &Path) -> CliResult<TraceTable> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let header = r.headers().map_err(|e| CliError::io(path, e))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::config(format!("{}: missing column {name:?}", path.display())))
    };
    let names: Vec<String> = header.iter().filter_map(|h| h.strip_prefix("mean_")).map(|s| s.to_string()).collect();
    if names.is_empty() {
        return Err(CliError::config(format!("{}: no mean_<parameter> columns", path.display())));
    }
    let (c_step, c_phase, c_reset) = (col("step")?, col("phase")?, col("reset")?);
    let c_mean = names.iter().map(|n| col(&format!("mean_{n}"))).collect::<CliResult<Vec<_>>>()?;
    let c_std = names.iter().map(|n| col(&format!("std_{n}"))).collect::<CliResult<Vec<_>>>()?;
    let mut rows = vec![];
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let line = i + 2;
        let num = |c: usize| parse_f64(path, line, &rec[c]);
        rows.push(TraceRecord {
            step: rec[c_step].parse().map_err(|_| CliError::config(format!("{}:{line}: bad step", path.display())))?,
            phase: rec[c_phase].to_string(),
            reset: &rec[c_reset] == "1",
            mean: c_mean.iter().map(|c| num(*c)).collect::<CliResult<_>>()?,
            std: c_std.iter().map(|c| num(*c)).collect::<CliResult<_>>()?,
        });
    }
    Ok(TraceTable { param_names: names, rows })
}

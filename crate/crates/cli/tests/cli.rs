use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kpf_cli::commands::Summary;
use kpf_cli::io::{read_dataset, read_trace, TruthFile};

fn kpf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kpf")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const CIR_MODEL: &str = r#""model": {"type": "cir", "theta": [0.45, 0.001, 0.017]}"#;
const CIR_EST: &str = r#""estimator": {"kind": "kpf", "n_particles": 60, "prior_lo": [0, 0, 0], "prior_hi": [1, 0.01, 0.1],
    "x0_mean": [0.005], "x0_var": [0.01], "seed": 5}"#;

fn cir_config(dir: &Path, steps: usize, maturities: usize, estimator: &str) -> PathBuf {
    let mats: Vec<String> = (1..=maturities).map(|m| m.to_string()).collect();
    let data = format!(
        r#""data": {{"steps": {steps}, "maturities": [{}], "noise_var": 1e-8, "x0": [0.005], "seed": 11}}"#,
        mats.join(", ")
    );
    let body = if estimator.is_empty() {
        format!("{{{CIR_MODEL}, {data}}}")
    } else {
        format!("{{{CIR_MODEL}, {data}, {estimator}}}")
    };
    write(dir, "config.json", &body)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_the_full_yield_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cir_config(dir.path(), 2000, 30, "");
    let out = dir.path().join("data");
    let o = kpf(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let series = read_dataset(&out.join("dataset.csv"), 1e-8).unwrap();
    assert_eq!(series.len(), 2000);
    assert_eq!(series.maturities.len(), 30);
    assert!(series.y.iter().all(|y| y.len() == 30));
    let truth: TruthFile =
        serde_json::from_str(&std::fs::read_to_string(out.join("dataset.truth.json")).unwrap()).unwrap();
    assert_eq!(truth.latent.len(), 2000);
    assert_eq!(truth.noise_var, 1e-8);
}

#[test]
fn simulate_is_deterministic_and_handles_empty_series() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cir_config(dir.path(), 40, 5, "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&kpf(&["simulate", "--config", s(&cfg), "--out", s(&a)])), 0);
    assert_eq!(code(&kpf(&["simulate", "--config", s(&cfg), "--out", s(&b)])), 0);
    for f in ["dataset.csv", "dataset.truth.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let c = dir.path().join("c");
    assert_eq!(code(&kpf(&["simulate", "--config", s(&cfg), "--out", s(&c), "--seed", "12"])), 0);
    assert_ne!(std::fs::read(a.join("dataset.csv")).unwrap(), std::fs::read(c.join("dataset.csv")).unwrap());

    let empty = cir_config(dir.path(), 0, 3, "");
    let e = dir.path().join("e");
    assert_eq!(code(&kpf(&["simulate", "--config", s(&empty), "--out", s(&e)])), 0);
    assert_eq!(std::fs::read_to_string(e.join("dataset.csv")).unwrap(), "time,tau_1,tau_2,tau_3\n");
}

#[test]
fn calibrate_writes_one_row_per_step_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cir_config(dir.path(), 30, 10, CIR_EST);
    let out = dir.path().join("run");
    let o = kpf(&["calibrate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = read_trace(&out.join("trace.csv")).unwrap();
    assert_eq!(trace.rows.len(), 30);
    assert_eq!(trace.param_names, ["alpha", "beta", "sigma"]);
    let summary: Summary = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.steps, 30);
    assert_eq!(summary.estimator_seed, 5);
    assert_eq!(summary.data_seed, Some(11));

    // The echoed config alone reproduces the trace.
    let echo = write(dir.path(), "echo.json", &serde_json::to_string(&summary.config).unwrap());
    let again = dir.path().join("again");
    assert_eq!(code(&kpf(&["calibrate", "--config", s(&echo), "--out", s(&again)])), 0);
    assert_eq!(std::fs::read(out.join("trace.csv")).unwrap(), std::fs::read(again.join("trace.csv")).unwrap());
}

#[test]
fn calibrate_reads_a_simulated_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cir_config(dir.path(), 25, 10, CIR_EST);
    let data = dir.path().join("data");
    assert_eq!(code(&kpf(&["simulate", "--config", s(&cfg), "--out", s(&data)])), 0);
    let csv = data.join("dataset.csv");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&kpf(&["calibrate", "--config", s(&cfg), "--out", s(&a)])), 0);
    let o = kpf(&["calibrate", "--config", s(&cfg), "--data", s(&csv), "--out", s(&b)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // Same data either way, so the same trace.
    assert_eq!(std::fs::read(a.join("trace.csv")).unwrap(), std::fs::read(b.join("trace.csv")).unwrap());
}

#[test]
fn hull_white_summary_has_five_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "hw.json",
        r#"{
            "model": {"type": "hw2", "theta": [0.03, 0.23, 0.02, 0.02, -0.5]},
            "data": {"steps": 15, "maturities": [1, 2, 5, 10, 20, 30], "noise_var": 6e-7, "x0": [0, 0], "seed": 2},
            "estimator": {"kind": "kpf", "n_particles": 500, "prior_lo": [0, 0, 0, 0, -0.8], "prior_hi": [0.4, 0.4, 0.1, 0.1, -0.3],
                          "x0_mean": [0, 0], "x0_var": [0.1, 0.1], "seed": 1}
        }"#,
    );
    let out = dir.path().join("run");
    let o = kpf(&["calibrate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Summary = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.param_names, ["alpha1", "alpha2", "sigma1", "sigma2", "rho"]);
    assert_eq!(summary.final_mean.len(), 5);
}

#[test]
fn oracle_rejects_square_root_models() {
    let dir = tempfile::tempdir().unwrap();
    let est =
        r#""estimator": {"kind": "oracle", "grid": [[0.45, 0.001, 0.017]], "x0_mean": [0.005], "x0_var": [0.01]}"#;
    let cfg = cir_config(dir.path(), 10, 5, est);
    let o = kpf(&["calibrate", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unsupported model regime"));
}

#[test]
fn oracle_runs_on_hull_white() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "hw.json",
        r#"{
            "model": {"type": "hw2", "theta": [0.03, 0.23, 0.02, 0.02, -0.5]},
            "data": {"steps": 12, "maturities": [1, 5, 10], "noise_var": 6e-7, "x0": [0, 0], "seed": 2},
            "estimator": {"kind": "oracle", "grid": [[0.03, 0.23, 0.02, 0.02, -0.5], [0.06, 0.23, 0.02, 0.02, -0.5]],
                          "x0_mean": [0, 0], "x0_var": [0.1, 0.1]}
        }"#,
    );
    let out = dir.path().join("run");
    assert_eq!(code(&kpf(&["calibrate", "--config", s(&cfg), "--out", s(&out)])), 0);
    assert_eq!(read_trace(&out.join("trace.csv")).unwrap().rows.len(), 12);
    let weights = std::fs::read_to_string(out.join("oracle_weights.csv")).unwrap();
    assert_eq!(weights.lines().count(), 13);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&kpf(&["simulate", "--config", s(&missing)])), 4);
    let bad = write(dir.path(), "bad.json", "{\"model\": ");
    let o = kpf(&["simulate", "--config", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));
    let wrong = write(
        dir.path(),
        "wrong.json",
        r#"{"model": {"type": "cir", "theta": [0.45, 0.001]}, "data": {"steps": 3, "maturities": [1], "noise_var": 1e-8}}"#,
    );
    let o = kpf(&["simulate", "--config", s(&wrong)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.theta"));
}

fn write_trace(path: &Path, rows: &[[f64; 3]]) {
    let mut text =
        String::from("step,time,phase,reset,max_loglik,mean_alpha,mean_beta,mean_sigma,std_alpha,std_beta,std_sigma\n");
    for (k, m) in rows.iter().enumerate() {
        text += &format!("{},{},recursive,0,1.0,{},{},{},0.1,0.1,0.1\n", k + 1, k + 1, m[0], m[1], m[2]);
    }
    std::fs::write(path, text).unwrap();
}

fn truth_file(dir: &Path) -> PathBuf {
    let cfg = cir_config(dir, 5, 3, "");
    let data = dir.join("data");
    assert_eq!(code(&kpf(&["simulate", "--config", s(&cfg), "--out", s(&data)])), 0);
    data.join("dataset.truth.json")
}

#[test]
fn report_of_a_perfect_trace_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let truth = truth_file(dir.path());
    let trace = dir.path().join("perfect.csv");
    write_trace(&trace, &[[0.45, 0.001, 0.017]; 5]);
    let out = dir.path().join("report");
    let o = kpf(&["report", "--trace", s(&trace), "--truth", s(&truth), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let errors = std::fs::read_to_string(out.join("errors.csv")).unwrap();
    assert_eq!(errors.lines().count(), 1 + 5 * 3);
    assert!(errors.lines().skip(1).all(|l| l.ends_with(",0")));
    let plot = std::fs::read_to_string(out.join("plot.csv")).unwrap();
    assert!(plot.starts_with("step,series,value\n"));
    assert!(plot.contains("perfect/mean_alpha"));
}

#[test]
fn report_compares_traces_side_by_side() {
    let dir = tempfile::tempdir().unwrap();
    let truth = truth_file(dir.path());
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_trace(&a, &[[0.4, 0.001, 0.017]; 5]);
    write_trace(&b, &[[0.5, 0.002, 0.02]; 5]);
    let out = dir.path().join("report");
    let ta = format!("kpf={}", s(&a));
    let tb = format!("rnpf={}", s(&b));
    let o = kpf(&["report", "--trace", &ta, "--trace", &tb, "--truth", s(&truth), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("kpf") && table.contains("rnpf"));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let rmse = |l: &str| metrics["series"][l]["final_rmse"].as_f64().unwrap();
    assert!((rmse("kpf") - (0.05f64.powi(2) / 3.0).sqrt()).abs() < 1e-12);
    assert!(rmse("rnpf") > rmse("kpf"));
}

#[test]
fn report_rejects_mismatched_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let truth = truth_file(dir.path());
    let other = dir.path().join("hw.csv");
    std::fs::write(&other, "step,time,phase,reset,max_loglik,mean_alpha1,std_alpha1\n1,1,recursive,0,0,0.1,0.1\n")
        .unwrap();
    let o = kpf(&["report", "--trace", s(&other), "--truth", s(&truth), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn selftest_runs_selected_criteria() {
    let o = kpf(&["selftest", "--only", "1,2"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("PASS [1]") && stdout.contains("PASS [2]"), "{stdout}");
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = kpf_cli::config::ExperimentConfig::load(&path).unwrap();
        assert!(cfg.estimator.is_some(), "{}", path.display());
        assert!(cfg.prior_warnings().is_empty(), "{}: {:?}", path.display(), cfg.prior_warnings());
        seen += 1;
    }
    assert_eq!(seen, 4);
}

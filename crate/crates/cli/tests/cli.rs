use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bpmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bpmf")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bpmf(args);
    assert!(
        out.status.success(),
        "bpmf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_sim(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("sim.txt");
    fs::write(&cfg, "n = 4\nt = 10\na = 6\nq = 2\nr = 2\ntau_t = 0.01,0.02\ntau_a = 0.01,0.02\nkappa = -0.05,0.05\n").unwrap();
    let out = dir.join("sim");
    ok(&["simulate", "--config", p(&cfg), "--out", p(&out), "--seed", "7"]);
    out
}

#[test]
fn simulate_fit_postprocess_forecast_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = small_sim(tmp.path());
    for f in ["panel.csv", "sim_config.txt", "run_manifest.txt", "truth/manifest.txt", "truth/z.csv"] {
        assert!(sim.join(f).exists(), "{f}");
    }
    let fit = tmp.path().join("fit");
    let fit_args = |out: &Path, threads: &str| {
        ok(&[
            "fit", "--data", p(&sim.join("panel.csv")), "--q", "2", "--r", "2", "--draws", "120", "--burnin", "60",
            "--thin", "2", "--out", p(out), "--threads", threads,
        ])
    };
    let stdout = fit_args(&fit, "1");
    assert!(stdout.contains("wrote 60 draws"), "{stdout}");
    let manifest = fs::read_to_string(fit.join("run_manifest.txt")).unwrap();
    assert!(manifest.contains("input.data.sha256 = "));
    assert!(manifest.contains("seed = 1"));

    let post = ok(&["postprocess", "--fit-dir", p(&fit), "--truth", p(&sim.join("truth"))]);
    assert!(post.contains("matrix model 20"), "{post}");
    for f in ["hosvd_time.csv", "hosvd_age.csv", "hosvd_explained.csv", "recovery.csv", "parameter_counts.txt"] {
        assert!(fit.join("postprocess").join(f).exists(), "{f}");
    }

    ok(&["forecast", "--fit-dir", p(&fit), "--horizon", "3"]);
    let summary = fs::read_to_string(fit.join("forecast/forecast_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4 * 3 * 6);
    assert!(fit.join("forecast/forecast_totals.csv").exists());

    // idempotent across reruns and thread counts
    let again = tmp.path().join("fit2");
    fit_args(&again, "2");
    for f in ["sigma2.csv", "f_t.csv", "lambda.csv", "fitted.csv", "summary.csv", "manifest.txt"] {
        assert_eq!(fs::read(fit.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn benchmark_and_report_produce_table() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = small_sim(tmp.path());
    let bench = tmp.path().join("bench");
    let table = ok(&[
        "benchmark", "--data", p(&sim.join("panel.csv")), "--spec", "rw,rw_drift,time_fact_sep:1..2", "--windows", "7,3",
        "--out", p(&bench),
    ]);
    assert!(table.starts_with("Model"));
    assert!(table.contains("Random Walk ") && table.contains("RMSE1") && table.contains("RMSE3"));
    let eval = fs::read_to_string(bench.join("forecast_eval.csv")).unwrap();
    // three one-step windows and one three-step row for each of four models
    assert_eq!(eval.lines().count(), 1 + 4 * 4);

    let rep = tmp.path().join("rep");
    let text = ok(&["report", "--inputs", p(&bench.join("forecast_eval.csv")), "--out", p(&rep)]);
    assert_eq!(text, table);
    let csv = fs::read_to_string(rep.join("table.csv")).unwrap();
    assert!(csv.starts_with("model,Q,R,rmse_h1,mae_h1,corr_h1,rmse_h3,mae_h3,corr_h3"));
}

#[test]
fn cv_writes_grid_and_choice() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = small_sim(tmp.path());
    let out = tmp.path().join("cv");
    let text = ok(&[
        "cv", "--data", p(&sim.join("panel.csv")), "--q-range", "1..2", "--r-range", "1", "--folds", "3", "--max-folds",
        "2", "--draws", "40", "--burnin", "20", "--thin", "1", "--out", p(&out),
    ]);
    assert!(text.contains("rmse.one_se = "), "{text}");
    let grid = fs::read_to_string(out.join("cv_grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 2 * 2);
    let merged = ok(&["report", "--inputs", p(&out.join("cv_grid.csv"))]);
    assert_eq!(merged, text);
}

#[test]
fn exit_codes() {
    assert_eq!(bpmf(&["--help"]).status.code(), Some(0));
    assert_eq!(bpmf(&["fit", "--bogus"]).status.code(), Some(1));
    assert_eq!(bpmf(&[]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.csv");
    let out = bpmf(&["fit", "--data", p(&missing), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read"));

    let bad_cfg = tmp.path().join("bad.txt");
    fs::write(&bad_cfg, "n = 4\nwat = 1\n").unwrap();
    assert_eq!(bpmf(&["simulate", "--config", p(&bad_cfg), "--out", p(tmp.path())]).status.code(), Some(1));

    // output path below a regular file cannot be created
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let sim = small_sim(tmp.path());
    let out = bpmf(&["benchmark", "--data", p(&sim.join("panel.csv")), "--windows", "7", "--out", p(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_defaults() {
    let fit = ok(&["fit", "--help"]);
    for d in ["[default: 25000]", "[default: 7500]", "[default: 2.5]", "[default: 1.5]", "[default: 1]"] {
        assert!(fit.contains(d), "fit --help lacks {d}");
    }
    for sub in ["simulate", "forecast", "cv", "benchmark", "postprocess", "report"] {
        let help = ok(&[sub, "--help"]);
        assert!(help.contains("--seed") && help.contains("--threads"), "{sub}");
    }
}

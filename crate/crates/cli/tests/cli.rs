use std::path::Path;
use std::process::{Command, Output};

fn cdand(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdand"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(cdand(&["--help"]).status.code(), Some(0));
    assert_eq!(cdand(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_two_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    for args in [
        vec!["run", "--preset", "inf-xx-fr9", "-o", out_dir],
        vec!["run", "--lambda", "-1", "-o", out_dir],
        vec!["run", "--threads", "0", "-o", out_dir],
        vec!["frobnicate"],
    ] {
        let out = cdand(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
        let err = stderr(&out);
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
        assert!(err.starts_with("error[usage]: "), "{err}");
    }
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = cdand(&[
        "run",
        "--input",
        missing.to_str().unwrap(),
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error[data]: "));
}

#[test]
fn generate_then_run_from_file_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = cdand(&[
        "generate",
        "--preset",
        "inf-sh-fr1",
        "--seed",
        "5",
        "--drops",
        "40",
        "-o",
        data.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = read(&data.join("snapshots.csv"));
    assert!(csv.starts_with("# plan_hash="));
    assert!(csv.contains("# seed=5\n"));

    let run_dir = dir.path().join("run");
    let out = cdand(&[
        "run",
        "--input",
        data.join("snapshots.csv").to_str().unwrap(),
        "--folds",
        "4",
        "-o",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for name in [
        "run_result.json",
        "summary.csv",
        "confusion.csv",
        "scores.csv",
        "plan.json",
        "cdf/LS.csv",
    ] {
        assert!(run_dir.join(name).is_file(), "missing {name}");
    }
    let summary = read(&run_dir.join("summary.csv"));
    assert!(
        summary.lines().any(|l| l.starts_with("snapshots,CDA_ND_RERS_SD,40,")),
        "{summary}"
    );
    let result: serde_json::Value = serde_json::from_str(&read(&run_dir.join("run_result.json"))).unwrap();
    let hash = result["provenance"]["plan_hash"].as_str().unwrap().to_string();
    assert!(summary.starts_with(&format!("# plan_hash={hash}\n")));

    let out = cdand(&["report", run_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains(&hash));
    assert!(text.contains("# HD: recall="));
    assert!(text.contains("# SD: recall="));
}

#[test]
fn json_config_and_fit_survey() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    std::fs::write(&plan, r#"{"preset": "inf-dh-fr1", "seed": 3, "drops": 30, "K": 4}"#).unwrap();
    let out_dir = dir.path().join("survey");
    let out = cdand(&[
        "fit-survey",
        "--config",
        plan.to_str().unwrap(),
        "-o",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let mapping: serde_json::Value = serde_json::from_str(&read(&out_dir.join("sd_mapping.json"))).unwrap();
    assert_eq!(mapping["seed"], 3);
    assert!(mapping["plan_hash"].as_str().is_some_and(|h| h.len() == 64));
    let curve = read(&out_dir.join("sd_curve.csv"));
    let values: Vec<f64> = curve
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(values.len(), 200);
    assert!(
        values.windows(2).all(|w| w[1] >= w[0] - 1e-12),
        "sigmoid curve must be non-decreasing"
    );
    assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let common = [
        "run",
        "--preset",
        "inf-sh-fr1",
        "--drops",
        "30",
        "--folds",
        "3",
        "--mmd-orders",
        "3",
    ];
    let run = |out: &Path, threads: &str| {
        let mut args = common.to_vec();
        args.extend(["--threads", threads, "-o", out.to_str().unwrap()]);
        let o = cdand(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    run(&a, "1");
    run(&b, "4");
    for name in ["run_result.json", "summary.csv", "scores.csv", "mmd.csv", "roc_hd.csv"] {
        assert_eq!(read(&a.join(name)), read(&b.join(name)), "{name}");
    }
}

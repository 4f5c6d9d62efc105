use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn qgeom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qgeom")).args(args).output().expect("spawn qgeom")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("cfg.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn check_passes_on_fresh_build() {
    let out = qgeom(&["check"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{stdout}\n{}", stderr(&out));
    assert!(stdout.contains("0 failed"));
    assert!(!stdout.lines().any(|l| l.starts_with("FAIL")));
}

#[test]
fn false_flatness_writes_run_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"seed": 3}"#);
    let run = tmp.path().join("ff0");
    let out = qgeom(&["false-flatness", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["config.json", "spectra.csv", "representatives.csv", "summary.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let summary: Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["provenance"]["seed"], 3);
    assert!(summary["assertions"].as_array().unwrap().iter().all(|a| a["pass"] == true));
}

#[test]
fn existing_out_dir_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "{}");
    let out = qgeom(&["false-flatness", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("already exists"));
}

#[test]
fn missing_config_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let run = tmp.path().join("run");
    let out = qgeom(&["implicit-bias", "--config", missing.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains(missing.to_str().unwrap()));
    assert!(!run.exists());
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let run = run.to_str().unwrap();
    let cases: [(&str, &[&str]); 5] = [
        (r#"{"seed": 1, "colour": 2}"#, &[]),
        ("{not json", &[]),
        ("{}", &["--set", "no_such_field=1"]),
        ("{}", &["--set", "m=0"]),
        (r#"{"loss": "hinge"}"#, &[]),
    ];
    for (body, extra) in cases {
        let cfg = write_config(tmp.path(), body);
        let mut args = vec!["local-dynamics", "--config", &cfg, "--out", run];
        args.extend_from_slice(extra);
        let out = qgeom(&args);
        assert_eq!(code(&out), 2, "{body} {extra:?}: {}", stderr(&out));
        assert!(stderr(&out).starts_with("error:"));
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&qgeom(&["frobnicate"])), 2);
    assert_eq!(code(&qgeom(&["false-flatness", "--out", "x"])), 2);
    assert_eq!(code(&qgeom(&[])), 2);
}

#[test]
fn divergent_learning_rate_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"lr": 1e6, "max_restarts": 1}"#);
    let run = tmp.path().join("run");
    let out = qgeom(&["false-flatness", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(!run.exists());
}

#[test]
fn failed_assertion_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"scale_log_range": [0.0, 0.0]}"#);
    let run = tmp.path().join("run");
    let out = qgeom(&["false-flatness", "--config", &cfg, "--out", run.to_str().unwrap(), "--set", "num_orbit_reps=3"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(run.join("summary.json").is_file());
}

#[test]
fn written_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"seed": 11, "num_perturbations": 2}"#);
    let first = tmp.path().join("a");
    let out = qgeom(&["implicit-bias", "--config", &cfg, "--out", first.to_str().unwrap(), "--set", "steps=20000", "--set", "tol_block.rank_tol=1e-9"]);
    assert!(matches!(code(&out), 0 | 1), "{}", stderr(&out));
    let written = fs::read_to_string(first.join("config.json")).unwrap();
    let v: Value = serde_json::from_str(&written).unwrap();
    assert_eq!(v["seed"], 11);
    assert_eq!(v["steps"], 20000);
    assert_eq!(v["tol_block"]["rank_tol"], 1e-9);

    let second = tmp.path().join("b");
    let out = qgeom(&["implicit-bias", "--config", first.join("config.json").to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert!(matches!(code(&out), 0 | 1), "{}", stderr(&out));
    assert_eq!(written, fs::read_to_string(second.join("config.json")).unwrap());
    for f in ["within_orbit.csv", "across_seeds.csv"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn inspect_reports_regularity_and_complexity() {
    let tmp = tempfile::tempdir().unwrap();
    let theta = tmp.path().join("theta.json");
    fs::write(&theta, r#"{"m": 2, "d": 2, "units": [{"a": 1.0, "w": [1.0, 0.0]}, {"a": -0.5, "w": [0.0, 2.0]}]}"#).unwrap();
    let out = qgeom(&["inspect", theta.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["regularity"]["orbit_dim"], 2);
    assert_eq!(v["regularity"]["unit_flags"].as_array().unwrap().len(), 2);
    // Q = diag(1, -2)
    let c = &v["complexity"];
    assert!((c["q_frobenius"].as_f64().unwrap() - 5.0f64.sqrt()).abs() < 1e-12);
    assert!((c["q_nuclear"].as_f64().unwrap() - 3.0).abs() < 1e-12);
    assert!((c["q_operator"].as_f64().unwrap() - 2.0).abs() < 1e-12);

    fs::write(&theta, r#"{"m": 3, "d": 2, "units": []}"#).unwrap();
    assert_eq!(code(&qgeom(&["inspect", theta.to_str().unwrap()])), 2);
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
model = numerical_example
input = standard_normal
threshold = 9.150979800
threshold.target_p = 0.00996
seed = 42
budget.schedule = 600, 100, 100
em.restarts = 3
experiment.repetitions = 2
baseline.optimal_n = 200
";

fn cesis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cesis")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.conf");
    fs::write(&path, text).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn run_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = cesis(&["run", "--config", conf.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", "2"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).starts_with("method,mean,std_error,cmc_ratio,n_total\nce_sis,"));
    }
    for file in ["summary.csv", "results.csv", "iterations.csv", "reports/rep_0001.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }

    let o = cesis(&["run", "--config", conf.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "7"]);
    assert!(o.status.success());
    assert_ne!(fs::read(a.join("results.csv")).unwrap(), fs::read(b.join("results.csv")).unwrap());
}

#[test]
fn baselines_append_rows() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = cesis(&["baselines", "--config", conf.to_str().unwrap(), "--out", out.to_str().unwrap(), "--reps", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let methods: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["cmc", "optimal_sis"]);
    assert_eq!(fs::read_to_string(out.join("results.csv")).unwrap().lines().count(), 1 + 6);
}

#[test]
fn oracle_and_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), SMALL);
    let o = cesis(&["oracle-p", "--config", conf.to_str().unwrap()]);
    assert!(o.status.success());
    let p: f64 = stdout(&o).trim().parse().unwrap();
    assert!((p - 0.00996).abs() < 1e-9, "{p}");

    let o = cesis(&["calibrate-l", "--config", conf.to_str().unwrap()]);
    let l: f64 = stdout(&o).trim().parse().unwrap();
    assert!((l - 9.150_979_8).abs() < 1e-4, "{l}");
}

#[test]
fn kl_diag_reads_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    assert!(cesis(&["run", "--config", conf.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.success());
    let report = out.join("reports/rep_0000.json");
    let o = cesis(&["kl-diag", "--config", conf.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "iteration,kl");
    assert_eq!(rows.len(), 1 + 3);
    for row in &rows[1..] {
        let kl: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!(kl >= 0.0);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "model = numerical_example\nbogus = 1\n");
    let o = cesis(&["oracle-p", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));

    let conf = write_config(dir.path(), SMALL);
    let o = cesis(&["run", "--config", conf.to_str().unwrap(), "--jobs", "0"]);
    assert_eq!(o.status.code(), Some(2));

    let missing = dir.path().join("missing.json");
    let o = cesis(&["kl-diag", "--config", conf.to_str().unwrap(), "--report", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

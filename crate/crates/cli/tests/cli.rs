use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hypergrad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypergrad")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn quadratic_oracle_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = hypergrad(&["quadratic-oracle", "--output", out.to_str().unwrap(), "--seeds", "0,1,2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.toml", "oracle.csv", "oracle_summary.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = fs::read_to_string(out.join("oracle.csv")).unwrap();
    assert_eq!(csv.split("\r\n").filter(|l| !l.is_empty()).count(), 4);
}

#[test]
fn written_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let second = dir.path().join("b");
    let o = hypergrad(&["invert-demo", "--output", first.to_str().unwrap(), "--seeds", "3", "--no-plots"]);
    assert!(o.status.success());
    let cfg = first.join("config.toml");
    let o = hypergrad(&["invert-demo", "--config", cfg.to_str().unwrap(), "--output", second.to_str().unwrap(), "--no-plots"]);
    assert!(o.status.success());
    let a = fs::read(first.join("invert_errors.csv")).unwrap();
    let b = fs::read(second.join("invert_errors.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unknown_config_key_exits_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "experiment = \"invert-demo\"\nsize = 3\n");
    let o = hypergrad(&["invert-demo", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_for_another_experiment_exits_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "q.toml", "experiment = \"quadratic-oracle\"\n");
    let o = hypergrad(&["bound-check", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_config_file_exits_with_3() {
    let o = hypergrad(&["invert-demo", "--config", "/nonexistent/config.toml"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn exceeded_oracle_tolerance_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "q.toml",
        "experiment = \"quadratic-oracle\"\nseeds = [0]\ntolerance = 1e-300\n",
    );
    let out = dir.path().join("run");
    let o = hypergrad(&["quadratic-oracle", "--config", &cfg, "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

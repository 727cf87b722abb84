//! Drives the `fibecfed` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3

[federation]
num_devices = 4
sampled_per_round = 2
rounds = 3
local_iterations = 1
lr = 0.02

[curriculum]
batch_size = 4

[gal]
t_warm = 1
lipschitz_samples = 8

[mask]
t_prime = 1

[data]
num_classes = 3
dim = 4
per_class = 20

[model]
hidden = [4, 4]
"#;

fn fibecfed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fibecfed")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_metrics_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("out");
    let res = fibecfed(&["run", &config, "--out", out.to_str().unwrap(), "--mode", "no-mask", "--seed", "5"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("round,sampled_ids,train_loss,weighted_test_acc,server_view_acc,bytes_down,bytes_up,wall_ms"));
    assert_eq!(lines.count(), 3);

    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"mode\": \"no-mask\""));
    assert!(summary.contains("\"seed\": 5"));
}

#[test]
fn bad_config_exits_with_one_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "bad.toml", "[federation]\nrounds = \"many\"\n");
    let res = fibecfed(&["run", &config, "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("federation.rounds"));

    let config = write(dir.path(), "unknown.toml", "[gal]\nnoise = 0.1\n");
    let res = fibecfed(&["run", &config]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("gal.noise"));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let res = fibecfed(&["compare", missing.to_str().unwrap(), missing.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn compare_marks_unreached_targets() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "small.toml", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, mode) in [(&a, "fedavg-lora"), (&b, "fibecfed")] {
        let res = fibecfed(&["run", &config, "--out", out.to_str().unwrap(), "--mode", mode]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    let res = fibecfed(&[
        "compare",
        a.join("metrics.csv").to_str().unwrap(),
        b.join("metrics.csv").to_str().unwrap(),
        "--targets",
        "0.0,1.01",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = String::from_utf8_lossy(&res.stdout);
    assert!(text.contains("1.01,/,/"), "{text}");
    assert!(text.contains("0,0,0"), "{text}");
}

//! Row-count and verdict-format contracts of `reproduce`, on MNIST with a
//! deliberately tiny model so each protocol finishes in seconds.

use std::path::PathBuf;
use std::process::Command;

fn mnist_root() -> PathBuf {
    std::env::var_os("ITN_MNIST")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

const TINY: &[&str] = &[
    "--train.iterations",
    "1",
    "--train.disc_steps",
    "2",
    "--train.batch_size",
    "8",
    "--train.negatives_per_iteration",
    "16",
    "--model.conv_channels",
    "4",
    "--model.num_layers",
    "2",
    "--predictor.channels",
    "4",
    "--sampler.max_steps",
    "2",
];

fn reproduce(protocol: &str, seeds: &str) -> (String, String) {
    let root = mnist_root();
    assert!(root.join("t10k-images-idx3-ubyte").is_file(), "MNIST not found under {} (run scripts/fetch-mnist.sh)", root.display());
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec![
        "reproduce".to_string(),
        protocol.to_string(),
        "--out".into(),
        tmp.path().to_str().unwrap().into(),
        "--data.root".into(),
        root.to_str().unwrap().into(),
        "--reproduce.seeds".into(),
        seeds.into(),
    ];
    args.extend(TINY.iter().map(|s| s.to_string()));
    let o = Command::new(env!("CARGO_BIN_EXE_itn")).args(&args).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("comparison.csv")).unwrap();
    (csv, String::from_utf8_lossy(&o.stdout).into_owned())
}

fn verdict_ok(line: &str, prefix: &str) -> bool {
    line.strip_prefix(prefix).is_some_and(|rest| rest == "true" || rest == "false")
}

#[test]
fn limited_data_has_two_rows_per_seed() {
    let (csv, out) = reproduce("limited_data", "0,1,2");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,seed,error");
    assert_eq!(lines.len(), 7);
    for seed in 0..3 {
        for method in ["itn", "baseline"] {
            assert!(lines.iter().any(|l| l.starts_with(&format!("{},{},", method, seed))), "{} {}", method, seed);
        }
    }
    assert!(verdict_ok(out.trim(), "ORDER itn<baseline: "), "{}", out);
}

#[test]
fn threshold_sweep_has_one_itn_row_per_value_and_seed() {
    let (csv, out) = reproduce("threshold_sweep", "0,1");
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r.starts_with("itn@t_u=0.001,")).count(), 2);
    assert_eq!(rows.iter().filter(|r| r.starts_with("itn@t_u=0.1,")).count(), 2);
    assert!(verdict_ok(out.trim(), "ORDER itn@t_u=0.1>=itn@t_u=0.001: "), "{}", out);
}

#[test]
fn cross_dataset_compares_three_methods() {
    let (csv, out) = reproduce("cross_dataset", "0");
    let methods: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["itn", "baseline_da", "baseline"]);
    assert!(verdict_ok(out.trim(), "ORDER itn<baseline: "), "{}", out);
}

//! The `dimcl` binary end to end: outputs, exit statuses and config files.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dimcl_cli::run::parse_metrics_csv;
use dimcl_cli::{parse_config, ExperimentConfig};

const QUICK: &str = "\
synth_train_per_class = 40
synth_test_per_class = 10
mlp_hidden = 32
proj_hidden = 32
dim = 16
pred_hidden = 8
epochs = 2
batch_size = 32
eval_every = 1
probe_epochs = 5
eval_samples = 64
knn_k = 5
";

fn dimcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dimcl")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{QUICK}{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn train_writes_every_output_and_eval_reads_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "");
    let o = dimcl(&["train", &cfg, "--out-dir", out.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "summary.json", "config.txt", "checkpoint.bin"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }

    let rows = parse_metrics_csv(&fs::read_to_string(out.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.is_evaluated()));

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "completed");

    // The stored configuration reproduces the run, seed override included.
    let stored = parse_config(&fs::read_to_string(out.join("config.txt")).unwrap()).unwrap();
    assert_eq!(stored.seed, 3);
    assert_eq!(stored.output_dir, out);

    let data = dir.path().join("data.bin");
    let (train, _) = dimcl::data::synth::synth_split(3, 32, 20, 1, 0.1, 0).unwrap();
    dimcl::data::synth::write_synth(&train, fs::File::create(&data).unwrap()).unwrap();
    let o = dimcl(&["eval", out.join("checkpoint.bin").to_str().unwrap(), data.to_str().unwrap(), "--knn-k", "3", "--probe-epochs", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(eval["framework"], "simsiam");
    assert_eq!(eval["test_examples"], 12);
}

#[test]
fn sweep_writes_one_directory_per_value_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let cfg = write_config(dir.path(), "");
    let o = dimcl(&["sweep", &cfg, "--param", "tau", "--values", "0.1,0.5", "--out-dir", out.to_str().unwrap(), "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["tau-0.1/metrics.csv", "tau-0.5/metrics.csv", "sweep.csv", "comparison.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let cmp = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(cmp.lines().count(), 3);
    assert!(cmp.lines().skip(1).all(|l| l.contains(",completed,")));
    let long = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(long.starts_with("param_value,metric,epoch,value"));
}

#[test]
fn exit_status_reflects_the_failure_kind() {
    let dir = tempfile::tempdir().unwrap();

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "lambda = 1.5\n").unwrap();
    let o = dimcl(&["train", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1: lambda out of [0,1]"));

    let unknown = dimcl(&["sweep", bad.to_str().unwrap(), "--param", "beta", "--values", "1"]);
    assert_eq!(unknown.status.code(), Some(2));

    let missing = dimcl(&["train", dir.path().join("absent.cfg").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(4));

    let corrupt = dir.path().join("ckpt.bin");
    fs::write(&corrupt, b"DCLCKPT1 but not really").unwrap();
    let o = dimcl(&["eval", corrupt.to_str().unwrap(), corrupt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));

    let out = dir.path().join("diverged");
    let cfg = write_config(dir.path(), "lr = 1e300\nframework = simclr\n");
    let o = dimcl(&["train", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "diverged");
    assert!(out.join("metrics.csv").is_file());
}

#[test]
fn verify_passes() {
    let o = dimcl(&["verify", "--seed", "9"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5);
}

#[test]
fn config_documents_round_trip() {
    let cfg = ExperimentConfig {
        lambda: 0.25,
        mlp_hidden: vec![7, 9],
        center: true,
        seed: 12,
        ..ExperimentConfig::default()
    };
    assert_eq!(parse_config(&cfg.to_document()).unwrap(), cfg);

    let e = parse_config("epochs = 3\nepochs = 4\n").unwrap_err();
    assert_eq!(e.line, Some(2));
    assert!(parse_config("dataset = cifar10\n").is_err(), "cifar needs a data_path");
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk-simsiam.cfg", "cifar10-byol.cfg"] {
        let text = fs::read_to_string(root.join(name)).unwrap();
        parse_config(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

mod common;

use std::fs;
use std::path::Path;

use adob_core::harness::config::{ExperimentConfig, Mode};
use adob_core::harness::experiment::{run_experiment, METRICS_FILE, REPORT_FILE, THEORY_FILE, TRADEOFF_FILE};
use adob_core::theory::TheoryReport;
use common::{repo_config, repo_root};

const SYNTHETIC_VFL: &str = r#"
mode = "vfl"
seed = 21
repeats = 2

[dataset]
source = "synthetic"
generator = "binary_vfl"
samples = 300
features = 8

[split]
train = 200
test = 100
aux = 20

[vfl]
epochs = 3
batch_size = 20
passive_bottoms = [
  [{ kind = "passport_dense", inputs = 4, outputs = 8, passport_len = 2 }, { kind = "relu" }],
  [{ kind = "passport_dense", inputs = 4, outputs = 8, passport_len = 2 }, { kind = "relu" }],
]
top = [{ kind = "dense", inputs = 8, outputs = 2 }]
passive_passport = { mode = "random", mean_range = 1.0, variance = 1.0 }

[vfl.sgd]
learning_rate = 0.05
momentum = 0.9

[sweep]
param = "passport_mean_range"
values = [1.0, 10.0]

[[attacks]]
attack = "wmi"
targets = 4
config = { iterations = 50, learning_rate = 1.0 }

[[attacks]]
attack = "bmi"
party = 1
targets = 4
queries = 50

[[attacks]]
attack = "pmc"

[[attacks]]
attack = "ns"
samples = 40

[[attacks]]
attack = "ds"
samples = 40
"#;

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn shipped_configs_validate_and_round_trip() {
    let mut seen = 0;
    for entry in fs::read_dir(repo_root().join("configs")).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        let cfg = repo_config(&name);
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg, "{name}");
        assert_eq!(back.to_toml().unwrap(), text, "{name}");
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg, "{name}");
        seen += 1;
    }
    assert!(seen >= 5);
}

#[test]
fn theory_mode_reports_no_violations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo_config("theory.toml");
    let report = run_experiment(&cfg, dir.path(), 1).unwrap();
    assert_eq!(report.mode, Mode::TheoryCheck);
    let written: Vec<TheoryReport> = serde_json::from_slice(&read(dir.path(), THEORY_FILE)).unwrap();
    assert_eq!(written, report.theory);
    assert_eq!(written.len(), 5);
    for r in &written {
        assert_eq!(r.violations, 0, "{}", r.check);
        assert!(r.instances > 0);
    }
}

#[test]
fn vfl_experiment_is_byte_identical_across_runs_and_jobs() {
    let cfg = ExperimentConfig::from_toml(SYNTHETIC_VFL).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, a.path(), 1).unwrap();
    run_experiment(&cfg, b.path(), 2).unwrap();
    for f in [REPORT_FILE, TRADEOFF_FILE, METRICS_FILE] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }

    // 2 values x 2 repeats, 5 attacks each; point i trains with seed 21 + i.
    assert_eq!(report.points.len(), 4);
    assert_eq!(report.rows.len(), 20);
    let seeds: Vec<u64> = report.points.iter().map(|p| p.seed).collect();
    assert_eq!(seeds, [21, 22, 23, 24]);
    let hash = cfg.hash().unwrap();
    assert!(report.rows.iter().all(|r| r.config_hash == hash && r.defense == "fedadob"));
    let csv = String::from_utf8(read(a.path(), TRADEOFF_FILE)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("param_name,param_value,accuracy,recovery_error,attack,defense,seed"));
    assert_eq!(lines.count(), 20);
    let caps: Vec<&str> = report.cap.iter().map(|c| c.attack.as_str()).collect();
    assert_eq!(caps, ["bmi", "ds", "ns", "pmc", "wmi"]);
    assert!(report.cap.iter().all(|c| c.points == 4 && c.cap >= 0.0));
    let metrics = String::from_utf8(read(a.path(), METRICS_FILE)).unwrap();
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(first["point"], 0);
    assert_eq!(first["seed"], 21);
}

#[test]
fn hfl_experiment_dumps_recovered_images() {
    let text = r#"
mode = "hfl"
seed = 3
dump_images = true

[dataset]
source = "mnist_idx"
images = "data/mnist-5k/images-idx3-ubyte.gz"
labels = "data/mnist-5k/labels-idx1-ubyte.gz"

[split]
train = 60
test = 10
aux = 0

[hfl]
clients = 2
rounds = 1
batch_size = 10
bottom = [{ kind = "flatten" }, { kind = "passport_dense", inputs = 784, outputs = 16, passport_len = 4 }, { kind = "relu" }]
top = [{ kind = "dense", inputs = 16, outputs = 10 }]
passport = { mode = "random", mean_range = 5.0, variance = 1.0 }
defense = { kind = "dp_gaussian", noise_level = 0.001 }

[hfl.sgd]
learning_rate = 0.05

[[attacks]]
attack = "wgi"
config = { iterations = 20, learning_rate = 1.0 }

[[attacks]]
attack = "bgi"
config = { iterations = 20, learning_rate = 1.0 }
"#;
    let root = repo_root();
    let text = text.replace("data/", &format!("{}/data/", root.display()));
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, dir.path(), 1).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows.iter().all(|r| r.defense == "fedadob+dp" && r.param_name == "none"));
    let images: Vec<_> = fs::read_dir(dir.path().join("images")).unwrap().collect();
    assert_eq!(images.len(), 2);
    let pgm = fs::read(images[0].as_ref().unwrap().path()).unwrap();
    assert!(pgm.starts_with(b"P5\n28 28\n255\n"));
    assert_eq!(pgm.len(), b"P5\n28 28\n255\n".len() + 784);
}

#[test]
fn invalid_experiments_fail_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::from_toml(SYNTHETIC_VFL).unwrap();
    cfg.repeats = 0;
    assert!(run_experiment(&cfg, dir.path(), 1).is_err());
    let mut cfg = ExperimentConfig::from_toml(SYNTHETIC_VFL).unwrap();
    cfg.vfl.as_mut().unwrap().passive_passport = Default::default();
    let err = run_experiment(&cfg, dir.path(), 1).unwrap_err().to_string();
    assert!(err.contains("random passport"), "{err}");
    assert!(!dir.path().join(REPORT_FILE).exists());
}

//! End-to-end tests of the `gge` binary: every subcommand is exercised
//! against a small generated dataset and the artifacts it writes are
//! checked for existence, determinism, and internal consistency.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gge::report::read_metrics_json;

const BIN: &str = env!("CARGO_BIN_EXE_gge");

/// A small configuration that keeps every subcommand fast.
const SMALL_CONFIG: &str = r#"
[generator]
classes = 8
types = 2
regions = 4
d_v = 6
d_q = 6
n_train = 240
n_test = 80
head_mass = 0.7
shortcut_rate = 0.8
noise_sigma = 0.3
seed = 7

[model]
hidden = 12

[training]
epochs = 2
batch_size = 32
lr = 0.01
seed = 3
"#;

struct Workspace {
    dir: PathBuf,
}

impl Workspace {
    fn new(tag: &str) -> Workspace {
        let dir = std::env::temp_dir().join(format!("gge-cli-{tag}-{}", std::process::id()));
        if dir.exists() {
            std::fs::remove_dir_all(&dir).unwrap();
        }
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("config.toml"), SMALL_CONFIG).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn config(&self) -> String {
        self.path("config.toml").display().to_string()
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.dir);
    }
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary should launch")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn gen_data(ws: &Workspace, dir: &str) {
    run_ok(&["gen-data", "--config", &ws.config(), "--data-dir", &ws.path(dir).display().to_string()]);
}

fn train(ws: &Workspace, data: &str, run_dir: &str, extra: &[&str]) {
    let mut args = vec![
        "train".to_string(),
        "--config".into(),
        ws.config(),
        "--data-dir".into(),
        ws.path(data).display().to_string(),
        "--run-dir".into(),
        ws.path(run_dir).display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    run_ok(&refs);
}

fn read_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn gen_data_writes_all_splits_and_is_deterministic() {
    let ws = Workspace::new("gendata");
    gen_data(&ws, "data_a");
    gen_data(&ws, "data_b");
    for name in ["train.dat", "test_ood.dat", "test_id.dat", "generator.toml", "priors.csv"] {
        let a = read_bytes(&ws.path("data_a").join(name));
        let b = read_bytes(&ws.path("data_b").join(name));
        assert!(!a.is_empty(), "{name} should not be empty");
        assert_eq!(a, b, "{name} should be byte-identical across runs");
    }
    // the priors summary reflects the configured head mass (0.7 per type)
    let priors = String::from_utf8(read_bytes(&ws.path("data_a").join("priors.csv"))).unwrap();
    for type_id in 0..2 {
        let head: f64 = priors
            .lines()
            .filter(|l| l.starts_with(&format!("train,{type_id},")))
            .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .fold(0.0, f64::max);
        assert!(
            (head - 0.7).abs() < 0.1,
            "train head mass for type {type_id} should be near 0.7, got {head}"
        );
    }
}

#[test]
fn train_writes_run_artifacts_and_checkpoints_are_reproducible() {
    let ws = Workspace::new("train");
    gen_data(&ws, "data");
    train(&ws, "data", "run_a", &["--variant", "gge-dq"]);
    train(&ws, "data", "run_b", &["--variant", "gge-dq"]);
    for name in ["config.toml", "arch.json", "base.jsonl", "losses.csv", "branch_shortcut.jsonl"] {
        let a = read_bytes(&ws.path("run_a").join(name));
        let b = read_bytes(&ws.path("run_b").join(name));
        assert!(!a.is_empty(), "{name} should not be empty");
        assert_eq!(a, b, "{name} should be byte-identical for identical config+seed");
    }
    // a different seed must change the checkpoint
    train(&ws, "data", "run_c", &["--variant", "gge-dq", "--seed", "9"]);
    assert_ne!(
        read_bytes(&ws.path("run_a").join("base.jsonl")),
        read_bytes(&ws.path("run_c").join("base.jsonl")),
        "different seeds should produce different parameters"
    );
}

#[test]
fn eval_writes_metrics_and_dump_roundtrips() {
    let ws = Workspace::new("eval");
    gen_data(&ws, "data");
    train(&ws, "data", "run", &[]);
    let dump = ws.path("preds.jsonl").display().to_string();
    let direct = run_ok(&[
        "eval",
        "--run-dir",
        &ws.path("run").display().to_string(),
        "--data-dir",
        &ws.path("data").display().to_string(),
        "--split",
        "test_id",
        "--dump",
        &dump,
    ]);
    let report = read_metrics_json(&ws.path("run").join("metrics_test_id.json")).unwrap();
    assert!(report.accuracy >= 0.0 && report.accuracy <= 1.0);
    assert!((report.cgd - (report.cgr - report.cgw)).abs() < 1e-12);

    // scoring the dump reproduces the same metrics table body
    let from_dump = run_ok(&["eval", "--from-dump", &dump]);
    let tail = |s: &str| {
        s.lines()
            .map(|l| l.split_whitespace().skip(1).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(tail(&direct), tail(&from_dump), "dump scoring should match direct eval");
}

#[test]
fn inverted_grounding_changes_metrics_but_not_accuracy() {
    let ws = Workspace::new("invert");
    gen_data(&ws, "data");
    train(&ws, "data", "run", &[]);
    let run_dir = ws.path("run").display().to_string();
    let data_dir = ws.path("data").display().to_string();
    run_ok(&["eval", "--run-dir", &run_dir, "--data-dir", &data_dir, "--split", "test_ood"]);
    run_ok(&[
        "eval",
        "--run-dir",
        &run_dir,
        "--data-dir",
        &data_dir,
        "--split",
        "test_ood",
        "--invert-grounding",
    ]);
    let plain = read_metrics_json(&ws.path("run").join("metrics_test_ood.json")).unwrap();
    let flipped = read_metrics_json(&ws.path("run").join("metrics_test_ood_inverted.json")).unwrap();
    assert_eq!(plain.accuracy, flipped.accuracy, "masks must not affect predictions");
    assert_eq!(plain.n_rp + plain.n_wp, flipped.n_rp + flipped.n_wp);
}

#[test]
fn sweep_covers_the_paired_threshold_grid() {
    let ws = Workspace::new("sweep");
    gen_data(&ws, "data");
    train(&ws, "data", "run", &[]);
    let stdout = run_ok(&[
        "sweep",
        "--run-dir",
        &ws.path("run").display().to_string(),
        "--data-dir",
        &ws.path("data").display().to_string(),
    ]);
    for pair in ["t=0.1 cap=9", "t=0.2 cap=4", "t=0.3 cap=3", "t=0.4 cap=2"] {
        assert!(stdout.contains(pair), "sweep output should include `{pair}`:\n{stdout}");
    }
    let csv = std::fs::read_to_string(ws.path("run").join("sweep_test_ood.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "header plus one row per threshold");
}

#[test]
fn report_reprints_losses_and_metrics() {
    let ws = Workspace::new("report");
    gen_data(&ws, "data");
    train(&ws, "data", "run", &["--variant", "gge-q"]);
    run_ok(&[
        "eval",
        "--run-dir",
        &ws.path("run").display().to_string(),
        "--data-dir",
        &ws.path("data").display().to_string(),
        "--split",
        "test_ood",
    ]);
    let stdout = run_ok(&["report", "--run-dir", &ws.path("run").display().to_string()]);
    assert!(stdout.contains("epochs: 2"), "report should show the epoch count:\n{stdout}");
    assert!(stdout.contains("test_ood"), "report should list evaluated splits:\n{stdout}");
}

#[test]
fn ablate_tabulates_every_variant() {
    let ws = Workspace::new("ablate");
    gen_data(&ws, "data");
    run_ok(&[
        "ablate",
        "--config",
        &ws.config(),
        "--data-dir",
        &ws.path("data").display().to_string(),
        "--run-dir",
        &ws.path("grid").display().to_string(),
        "--seeds",
        "1",
        "--jobs",
        "2",
    ]);
    let csv = std::fs::read_to_string(ws.path("grid").join("ablation.csv")).unwrap();
    for label in [
        "baseline",
        "gge-d",
        "gge-q-iter",
        "gge-q-tog",
        "gge-dq-iter",
        "gge-dq-tog",
        "gge-sf",
        "sum-dq",
        "rubi",
        "inverse-supervision",
        "vision-only",
    ] {
        assert!(
            csv.lines().any(|l| l.starts_with(&format!("{label},"))),
            "ablation.csv should contain a `{label}` row:\n{csv}"
        );
    }
}

#[test]
fn invalid_arguments_are_rejected() {
    let ws = Workspace::new("badargs");
    gen_data(&ws, "data");
    let out = run(&[
        "train",
        "--config",
        &ws.config(),
        "--data-dir",
        &ws.path("data").display().to_string(),
        "--run-dir",
        &ws.path("run").display().to_string(),
        "--variant",
        "no-such-variant",
    ]);
    assert!(!out.status.success(), "unknown variant should be rejected");
    let out = run(&["eval", "--split", "test_ood"]);
    assert!(!out.status.success(), "eval without run dir or dump should be rejected");
}

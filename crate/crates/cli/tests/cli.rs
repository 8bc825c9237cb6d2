#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{gaussian_clusters, purity, Clusters};
use rpml_core::dataset::{self, MatrixFormat};
use rpml_core::manifold::orthonormality_error;

fn rpml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpml")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
    data: Clusters,
}

impl Fixture {
    fn new() -> Self {
        let data = gaussian_clusters(3, 6, 20, 12.0, 5);
        let dir = tempfile::tempdir().unwrap();
        dataset::save_features(&data.train, &dir.path().join("train.csv"), MatrixFormat::Csv).unwrap();
        dataset::save_features(&data.test, &dir.path().join("test.rpml"), MatrixFormat::Binary).unwrap();
        dataset::save_labels(&data.train_labels, &dir.path().join("train_labels.txt")).unwrap();
        dataset::save_labels(&data.test_labels, &dir.path().join("test_labels.txt")).unwrap();
        Fixture { dir, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }
}

fn train_args<'a>(f: &'a Fixture, out: &'a str, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = vec![
        "train".into(),
        "--features".into(),
        f.arg("train.csv"),
        "--labels".into(),
        f.arg("train_labels.txt"),
        "--output".into(),
        f.arg(&format!("{out}.rpml")),
        "--weights".into(),
        f.arg(&format!("{out}_w.rpml")),
        "--trace".into(),
        f.arg(&format!("{out}.jsonl")),
        "--l".into(),
        "3".into(),
        "--seed".into(),
        "11".into(),
    ];
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run_strings(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    rpml(&refs)
}

fn trace_costs(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["cost"].as_f64().unwrap())
        .collect()
}

#[test]
fn cluster_writes_one_label_per_row() {
    let f = Fixture::new();
    let o = rpml(&["cluster", "--features", &f.arg("train.csv"), "--output", &f.arg("pl.txt"), "--k", "15", "--epsilon", "0.3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let labels = dataset::load_labels(&f.path("pl.txt")).unwrap();
    assert_eq!(labels.len(), 60);
    assert_eq!(purity(f.data.train_labels.as_slice(), labels.as_slice()), 1.0);
    assert!(stdout(&o).contains("clusters"));
}

#[test]
fn triplets_command_writes_valid_rows() {
    let f = Fixture::new();
    let o = rpml(&["triplets", "--labels", &f.arg("train_labels.txt"), "--output", &f.arg("t.tsv"), "--per-anchor", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lab = f.data.train_labels.as_slice();
    let text = fs::read_to_string(f.path("t.tsv")).unwrap();
    assert_eq!(text.lines().count(), 120);
    for line in text.lines() {
        let v: Vec<usize> = line.split('\t').map(|x| x.parse().unwrap()).collect();
        assert_eq!(lab[v[0]], lab[v[1]]);
        assert_ne!(lab[v[0]], lab[v[2]]);
        assert_ne!(v[0], v[1]);
    }
}

#[test]
fn train_outputs_are_orthonormal_and_trace_decreases() {
    let f = Fixture::new();
    let o = run_strings(&train_args(&f, "a", &[]));
    assert!(o.status.success(), "{}", stderr(&o));
    let l = dataset::load_embedding(&f.path("a.rpml")).unwrap();
    assert_eq!(l.shape(), (6, 3));
    assert!(orthonormality_error(&l) < 1e-5);
    let w = dataset::load_matrix(&f.path("a_w.rpml"), MatrixFormat::Binary).unwrap();
    assert_eq!(w.shape(), (12, 1));
    let costs = trace_costs(&f.path("a.jsonl"));
    assert!(costs.windows(2).all(|c| c[1] <= c[0] + 1e-12), "{costs:?}");
    assert!(stdout(&o).contains("final-cost"));
}

#[test]
fn repeated_training_is_byte_identical() {
    let f = Fixture::new();
    assert!(run_strings(&train_args(&f, "a", &["--threads", "1"])).status.success());
    assert!(run_strings(&train_args(&f, "b", &["--threads", "3"])).status.success());
    for (x, y) in [("a.rpml", "b.rpml"), ("a_w.rpml", "b_w.rpml"), ("a.jsonl", "b.jsonl")] {
        assert_eq!(fs::read(f.path(x)).unwrap(), fs::read(f.path(y)).unwrap(), "{x}");
    }
}

#[test]
fn zero_iterations_returns_the_initial_embedding() {
    let f = Fixture::new();
    assert!(run_strings(&train_args(&f, "z", &["--maxiter", "0"])).status.success());
    let l = dataset::load_embedding(&f.path("z.rpml")).unwrap();
    let init = rpml_core::trainer::initialize(6, 3, rpml_core::Variant::Rpml, 11, None).unwrap();
    assert!((l - init.l).amax() < 1e-6);
    assert_eq!(trace_costs(&f.path("z.jsonl")).len(), 1);
}

#[test]
fn bilinear_variant_is_dispatched() {
    let f = Fixture::new();
    let o = run_strings(&train_args(&f, "v", &["--variant", "rpml_v1"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let w = dataset::load_matrix(&f.path("v_w.rpml"), MatrixFormat::Binary).unwrap();
    assert_eq!(w.shape(), (6, 3));
    assert!(stdout(&o).contains("rpml_v1"));
}

#[test]
fn stochastic_mode_runs_with_self_clustering() {
    let f = Fixture::new();
    let o = rpml(&[
        "train", "--features", &f.arg("train.csv"), "--self-cluster", "--k", "15", "--epsilon", "0.3",
        "--output", &f.arg("s.rpml"), "--mode", "stochastic", "--epochs", "3", "--batch-size", "16", "--l", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("stochastic"));
    assert_eq!(dataset::load_embedding(&f.path("s.rpml")).unwrap().shape(), (6, 2));
}

#[test]
fn embed_then_eval_round_trip() {
    let f = Fixture::new();
    assert!(run_strings(&train_args(&f, "a", &[])).status.success());
    let o = rpml(&["embed", "--features", &f.arg("test.rpml"), "--embedding", &f.arg("a.rpml"), "--output", &f.arg("e.csv")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e = dataset::load_matrix(&f.path("e.csv"), MatrixFormat::Csv).unwrap();
    assert_eq!(e.shape(), (60, 3));
    let o = rpml(&["eval", "--features", &f.arg("e.csv"), "--labels", &f.arg("test_labels.txt"), "--ks", "1,4", "--output", &f.arg("m.tsv")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert_eq!(table.lines().next().unwrap(), "NMI\tF\tP\tR\tR@1\tR@4");
    assert_eq!(fs::read_to_string(f.path("m.tsv")).unwrap(), table);
}

#[test]
fn pipeline_writes_every_output() {
    let f = Fixture::new();
    let out = f.arg("run");
    let o = rpml(&[
        "pipeline", "--train", &f.arg("train.csv"), "--test", &f.arg("test.rpml"),
        "--test-labels", &f.arg("test_labels.txt"), "--out-dir", &out, "--k", "15", "--epsilon", "0.3",
        "--l", "3", "--baseline",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["pseudo_labels.txt", "embedding.rpml", "weights.rpml", "test_embedded.rpml", "metrics.tsv", "baseline_metrics.tsv", "trace.jsonl"] {
        assert!(f.path("run").join(name).exists(), "{name}");
    }
    let text = stdout(&o);
    assert!(text.starts_with("# rpml ("));
    assert!(text.contains("# random orthonormal baseline"));
}

#[test]
fn missing_input_names_the_path() {
    let f = Fixture::new();
    let missing = f.arg("nope.csv");
    let o = rpml(&["cluster", "--features", &missing, "--output", &f.arg("x.txt")]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(&missing), "{}", stderr(&o));
}

#[test]
fn single_example_is_a_data_error() {
    let f = Fixture::new();
    fs::write(f.path("one.csv"), "1.0,2.0\n").unwrap();
    let o = rpml(&["cluster", "--features", &f.arg("one.csv"), "--output", &f.arg("x.txt")]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("need at least 2 examples (got 1)"));
}

#[test]
fn label_count_mismatch_is_a_data_error() {
    let f = Fixture::new();
    let o = rpml(&["eval", "--features", &f.arg("train.csv"), "--labels", &f.arg("test_labels.txt"), "--ks", "1"]);
    assert!(o.status.success(), "same length is accepted");
    fs::write(f.path("short.txt"), "0\n1\n").unwrap();
    let o = rpml(&["eval", "--features", &f.arg("train.csv"), "--labels", &f.arg("short.txt")]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn invalid_parameters_are_reported_together() {
    let f = Fixture::new();
    let o = run_strings(&train_args(&f, "a", &["--alpha", "95", "--eta", "-1", "--batch-size", "0"]));
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for key in ["alpha", "eta", "batch-size"] {
        assert!(err.contains(key), "{key} missing from {err}");
    }
}

#[test]
fn unknown_config_key_is_named() {
    let f = Fixture::new();
    fs::write(f.path("c.toml"), "k = 10\nepsilom = 0.2\n").unwrap();
    let o = rpml(&["cluster", "--config", &f.arg("c.toml"), "--features", &f.arg("train.csv"), "--output", &f.arg("x.txt")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epsilom"));
}

#[test]
fn flags_override_the_config_file() {
    let f = Fixture::new();
    fs::write(f.path("c.toml"), "l = 2\nmaxiter = 0\nseed = 11\n").unwrap();
    let mut args = train_args(&f, "c", &["--config", &f.arg("c.toml")]);
    assert!(run_strings(&args).status.success());
    // --l 3 from the shared argument list wins over l = 2.
    assert_eq!(dataset::load_embedding(&f.path("c.rpml")).unwrap().shape(), (6, 3));
    assert_eq!(trace_costs(&f.path("c.jsonl")).len(), 1);
    args.retain(|a| a != "--l" && a != "3");
    assert!(run_strings(&args).status.success());
    assert_eq!(dataset::load_embedding(&f.path("c.rpml")).unwrap().shape(), (6, 2));
}

#[test]
fn log_lines_are_json() {
    let f = Fixture::new();
    let o = Command::new(env!("CARGO_BIN_EXE_rpml"))
        .args(train_args(&f, "a", &[]))
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    assert!(o.status.success());
    let err = stderr(&o);
    assert!(err.lines().count() >= 1);
    for line in err.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap_or_else(|_| panic!("not JSON: {line}"));
    }
}

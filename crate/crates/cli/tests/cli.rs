use std::path::Path;
use std::process::{Command, Output};

use protoflow::episodes::load_embeddings;
use protoflow::metatrain::Checkpoint;

fn protoflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protoflow"))
        .args(args)
        .env_remove("PROTOFLOW_SEED")
        .env_remove("PROTOFLOW_THREADS")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = protoflow(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn csv_rows(p: &str) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(p).unwrap();
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

/// Small dataset: 30 classes, dim 16, 40 per class.
fn small_data(dir: &Path) -> String {
    let p = path(dir, "small.pfeb");
    ok(&["synth", "--classes", "30", "--dim", "16", "--per-class", "40", "--seed", "1", "-o", &p]);
    p
}

fn train_args<'a>(data: &'a str, out: &'a str, metrics: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train", "--set"];
    let data_set = Box::leak(format!("data=\"{data}\"").into_boxed_str());
    let out_set = Box::leak(format!("output=\"{out}\"").into_boxed_str());
    let metrics_set = Box::leak(format!("metrics=\"{metrics}\"").into_boxed_str());
    v.extend([&*data_set, &*out_set, &*metrics_set, "episodes_per_epoch=6", "val_episodes=4", "steps=3", "T=3"]);
    v.extend(extra);
    v
}

#[test]
fn synth_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(dir.path(), "a.pfeb"), path(dir.path(), "b.pfeb"));
    let cmd = |o: &str| ok(&["synth", "--classes", "25", "--dim", "64", "--per-class", "200", "--seed", "7", "-o", o]);
    let stdout = cmd(&a);
    cmd(&b);
    assert!(stdout.contains("25 classes"));
    assert_eq!(load_embeddings(&a).unwrap().len(), 5000);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn synth_rejects_zero_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = protoflow(&["synth", "--per-class", "0", "-o", &path(dir.path(), "x.pfeb")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn seed_env_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let p = path(dir.path(), name);
        let mut c = Command::new(env!("CARGO_BIN_EXE_protoflow"));
        c.args(["synth", "--classes", "3", "--dim", "4", "--per-class", "5", "-o", &p]).env_remove("PROTOFLOW_SEED");
        if let Some(e) = env {
            c.env("PROTOFLOW_SEED", e);
        }
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        assert!(c.output().unwrap().status.success());
        std::fs::read(p).unwrap()
    };
    let env3 = run("e3", Some("3"), None);
    assert_eq!(env3, run("f3", None, Some("3")));
    assert_eq!(run("both", Some("3"), Some("4")), run("f4", None, Some("4")));
    assert_ne!(env3, run("f4b", None, Some("4")));
}

#[test]
fn convert_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let src = small_data(dir.path());
    let (c, back) = (path(dir.path(), "d.csv"), path(dir.path(), "back.pfeb"));
    ok(&["convert", &src, &c]);
    ok(&["convert", &c, &back]);
    assert_eq!(std::fs::read(&src).unwrap(), std::fs::read(&back).unwrap());
}

#[test]
fn config_lists_defaults() {
    let text = ok(&["config"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["meta"]["lr"], 1e-4);
    assert_eq!(v["model"]["solver"]["steps"], 40);
    let help = ok(&["train", "--help"]);
    assert!(help.contains("Defaults") && help.contains("weight_decay") && help.contains("model.solver.kind"));
}

#[test]
fn zero_epochs_writes_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let (out, metrics) = (path(dir.path(), "m.pfpw"), path(dir.path(), "m.jsonl"));
    let cfg = path(dir.path(), "cfg.json");
    std::fs::write(&cfg, r#"{"model": {"flow": "e2gradnet"}, "meta": {"epochs": 3}}"#).unwrap();
    let mut args = train_args(&data, &out, &metrics, &["epochs=0", "flow=e2gradnet", "solver=e2"]);
    args.extend(["-c", &cfg]);
    ok(&args);
    let ck = Checkpoint::load(&out).unwrap();
    assert_eq!(ck.epoch, 0);
    assert_eq!(ck.model.flow.kind(), protoflow::gradflow::FlowKind::E2GradNet);
    assert!(ck.model.correction.is_some());
    assert!(std::fs::read_to_string(&metrics).unwrap().is_empty());
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = |tag: &str| {
        let (out, metrics) = (path(dir.path(), &format!("{tag}.pfpw")), path(dir.path(), &format!("{tag}.jsonl")));
        let mut args = train_args(&data, &out, &metrics, &["epochs=2", "lr=0.001", "batch_episodes=2"]);
        args.extend(["--seed", "5"]);
        ok(&args);
        (std::fs::read(&out).unwrap(), std::fs::read_to_string(&metrics).unwrap(), metrics)
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    let lines: Vec<serde_json::Value> = a.1.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "train_loss", "val_acc", "lr"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
    let rows = csv_rows(&a.2.replace(".jsonl", ".csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1][2].parse::<f64>().unwrap(), lines[1]["val_acc"].as_f64().unwrap());
}

#[test]
fn bad_config_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let (out, metrics) = (path(dir.path(), "m.pfpw"), path(dir.path(), "m.jsonl"));
    let code = |extra: &[&str]| protoflow(&train_args(&data, &out, &metrics, extra)).status.code();
    assert_eq!(code(&["meta.bogus=1"]), Some(2));
    assert_eq!(code(&["lr=-1"]), Some(2));
    assert_eq!(code(&["flow=nonsense"]), Some(2));
    let cfg = path(dir.path(), "cfg.json");
    std::fs::write(&cfg, r#"{"unknown": 1}"#).unwrap();
    assert_eq!(protoflow(&["train", "-c", &cfg]).status.code(), Some(2));
}

#[test]
fn divergence_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let (out, metrics) = (path(dir.path(), "m.pfpw"), path(dir.path(), "m.jsonl"));
    let res = protoflow(&train_args(&data, &out, &metrics, &["epochs=3", "lr=1e300", "batch_episodes=1", "weight_decay=0"]));
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(Checkpoint::load(&out).is_ok());
}

#[test]
fn zero_flow_eval_matches_baseline_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let (out, metrics) = (path(dir.path(), "z.pfpw"), path(dir.path(), "z.jsonl"));
    ok(&train_args(&data, &out, &metrics, &["epochs=0", "flow=zero", "solver=euler"]));
    let csv = path(dir.path(), "eval.csv");
    let stdout = ok(&["eval", "--checkpoint", &out, "--data", &data, "--episodes", "40", "--csv", &csv]);
    let rows = csv_rows(&csv);
    assert_eq!(rows[0][0], "model");
    assert_eq!(rows[1][0], "baseline");
    assert_eq!(rows[0][1..], rows[1][1..]);
    assert!(stdout.lines().any(|l| l.starts_with("baseline") && l.contains(&rows[1][1])));

    let pb = path(dir.path(), "pb.csv");
    ok(&["proto-bias", "--checkpoint", &out, "--data", &data, "--episodes", "20", "--csv", &pb]);
    let rows = csv_rows(&pb);
    assert_eq!(rows[0][1], rows[1][1]);
    let gb = path(dir.path(), "gb.csv");
    ok(&["grad-bias", "--checkpoint", &out, "--data", &data, "--episodes", "20", "--csv", &gb]);
    assert_eq!(csv_rows(&gb).len(), 2);
}

#[test]
fn mismatched_checkpoint_is_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let (out, metrics) = (path(dir.path(), "z.pfpw"), path(dir.path(), "z.jsonl"));
    ok(&train_args(&data, &out, &metrics, &["epochs=0", "flow=zero", "solver=euler"]));
    let other = path(dir.path(), "wide.pfeb");
    ok(&["synth", "--classes", "30", "--dim", "8", "--per-class", "40", "-o", &other]);
    let res = protoflow(&["eval", "--checkpoint", &out, "--data", &other, "--episodes", "5"]);
    assert_eq!(res.status.code(), Some(4));
}

#[test]
fn bench_solvers_orders_in_windows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = path(dir.path(), "orders.csv");
    ok(&["bench-solvers", "--csv", &csv]);
    let rows = csv_rows(&csv);
    let order = |solver: &str| rows.iter().find(|r| r[0] == solver).unwrap()[4].parse::<f64>().unwrap();
    assert!((0.9..=1.1).contains(&order("euler")));
    assert!((3.5..=4.5).contains(&order("rk4")));
    let e2: f64 = rows.iter().find(|r| r[0] == "e2").unwrap()[3].parse().unwrap();
    let euler8: f64 = rows.iter().find(|r| r[0] == "euler" && r[1] == "8").unwrap()[3].parse().unwrap();
    assert!(e2 < euler8);
}

#[test]
fn bench_runtime_e2gradnet_is_faster() {
    let dir = tempfile::tempdir().unwrap();
    let csv = path(dir.path(), "rt.csv");
    ok(&["bench-runtime", "--scales", "1", "--repeats", "3", "--csv", &csv]);
    let rows = csv_rows(&csv);
    let median = |flow: &str| rows.iter().find(|r| r[0] == flow).unwrap()[5].parse::<f64>().unwrap();
    assert!(median("e2gradnet") < median("gradnet"));
    assert!(rows.iter().all(|r| r[1..5] == ["5", "5", "15", "4"]));
}


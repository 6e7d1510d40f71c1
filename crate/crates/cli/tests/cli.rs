use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use red_forge::shapes::load_database;
use serde_json::Value;

const SMALL: &[&str] = &[
    "--set",
    "data.db_per_category=3",
    "--set",
    "data.train_per_category=3",
    "--set",
    "data.test_per_category=2",
    "--set",
    "run.epochs=2",
    "--set",
    "retrieval.n_samples=40",
];

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_red-forge"))
        .args(args)
        .current_dir(dir)
        .env_remove("RED_FORGE_THREADS")
        .output()
        .expect("spawn red-forge")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(SMALL).copied().collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// db, data and a trained run in a fresh directory.
fn pipeline() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&with_small(&["gen-db", "--out", "db"]), d);
    ok(&with_small(&["gen-data", "--out", "data"]), d);
    ok(&with_small(&["train", "--db", "db", "--data", "data", "--out", "run"]), d);
    tmp
}

#[test]
fn gen_db_round_trips_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["gen-db", "--out", "a", "--per-category", "2", "--seed", "7"], d);
    ok(&["gen-db", "--out", "b", "--per-category", "2", "--seed", "7"], d);
    let db = load_database(&d.join("a")).unwrap();
    assert_eq!(db.len(), 6);
    assert_eq!(db.seed(), Some(7));
    assert!(d.join("a/config.txt").is_file());
    let a = fs::read(d.join("a/manifest.json")).unwrap();
    let b = fs::read(d.join("b/manifest.json")).unwrap();
    assert_eq!(a, b);
    let m: Value = serde_json::from_slice(&a).unwrap();
    assert!(m.to_string().contains("invariant"), "manifest lists its checks");
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for args in [
        vec!["gen-db", "--out", "x", "--per-category", "0"],
        vec!["--threads", "0", "grad-check"],
        vec!["gen-db", "--out", "x", "--set", "no.such_key=1"],
        vec!["gen-db", "--out", "x", "--set", "run.epochs"],
        vec!["eval", "--checkpoint", "missing.ckpt", "--db", "db", "--data", "data", "--out", "e.json"],
        vec!["grad-check", "--inject-fault", "no_such_op"],
        vec!["deform", "--db", "db", "--source", "s", "--target", "t", "--out", "o.json"],
    ] {
        let out = run(&args, d);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn threads_env_is_read() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_red-forge"))
        .args(["grad-check", "--module", "losses"])
        .env("RED_FORGE_THREADS", "0")
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_passes_and_catches_faults() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = ok(&["grad-check", "--module", "losses"], d);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("chamfer") && text.contains("max rel err"));

    let out = run(&["grad-check", "--module", "autodiff", "--inject-fault", "sqrt"], d);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("autodiff/sqrt"), "{err}");
}

#[test]
fn full_pipeline_outputs() {
    let tmp = pipeline();
    let d = tmp.path();
    assert!(d.join("run/model.ckpt").is_file());
    assert!(d.join("run/config.txt").is_file());

    ok(&["eval", "--checkpoint", "run/model.ckpt", "--db", "db", "--data", "data", "--out", "ev.json", "--planted", "--baselines"], d);
    let ev = json(&d.join("ev.json"));
    for c in ["chair", "table", "cabinet"] {
        assert!(ev["per_category"][c].as_f64().unwrap() > 0.0);
    }
    assert!(ev["instance_average"].as_f64().is_some());
    assert_eq!(ev["instances"].as_array().unwrap().len(), 6);
    let recall = ev["planted"]["recall"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&recall));
    assert!(ev["baselines"]["rigid"]["instance_average"].as_f64().is_some());
    assert!(ev["baselines"]["direct"]["instance_average"].as_f64().is_some());
    assert!(d.join("ev.config.txt").is_file());

    let target = "data/partials/test-table-000.pcf";
    ok(&["retrieve", "--checkpoint", "run/model.ckpt", "--db", "db", "--target", target, "--category", "table", "--out", "r.json"], d);
    let r = json(&d.join("r.json"));
    assert_eq!(r["n_samples"], 40);
    let results = r["results"].as_array().unwrap();
    assert_eq!(results.len(), 3, "restricted to tables");
    assert!(results.iter().all(|x| x["id"].as_str().unwrap().starts_with("table")));
    let votes: u64 = results.iter().map(|x| x["votes"].as_u64().unwrap()).sum();
    assert_eq!(votes, 40);
    assert!(!r["top_k"].as_array().unwrap().is_empty());

    ok(&["deform", "--db", "db", "--source", "table-001", "--target", target, "--direct", "--out", "p.json", "--cloud-out", "p.pcf"], d);
    let p = json(&d.join("p.json"));
    let parts = p.as_object().unwrap();
    assert!(!parts.is_empty());
    for v in parts.values() {
        assert_eq!(v["cd"].as_array().unwrap().len(), 3);
        assert!(v["s"].as_array().unwrap().iter().all(|s| s.as_f64().unwrap() > 0.0));
    }
    assert!(d.join("p.pcf").is_file());
    ok(&["deform", "--db", "db", "--source", "table-001", "--target", target, "--checkpoint", "run/model.ckpt", "--out", "q.json"], d);

    ok(&["ablate-occlusion", "--ratios", "0,0.75", "--checkpoint", "run/model.ckpt", "--db", "db", "--data", "data", "--out", "ab.json"], d);
    let ab = json(&d.join("ab.json"));
    let rows = ab["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["ratio"], 0.75);
    assert!(rows[0]["per_category"]["cabinet"].as_f64().is_some());
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let tmp = pipeline();
    let d = tmp.path();
    let eval = |threads: &str, out: &str| {
        ok(&["--threads", threads, "eval", "--checkpoint", "run/model.ckpt", "--db", "db", "--data", "data", "--out", out], d);
        fs::read(d.join(out)).unwrap()
    };
    assert_eq!(eval("1", "e1.json"), eval("3", "e3.json"));

    ok(&with_small(&["--threads", "3", "train", "--db", "db", "--data", "data", "--out", "run3"]), d);
    assert_eq!(fs::read(d.join("run/model.ckpt")).unwrap(), fs::read(d.join("run3/model.ckpt")).unwrap());
}

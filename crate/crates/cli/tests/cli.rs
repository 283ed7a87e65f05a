use std::process::Command;

use ckpt_cli::run_with;
use ckpt_core::chunkstore::ProcessIndexDoc;
use ckpt_core::coordination::{Mode, Runtime, RuntimeConfig};
use ckpt_core::load::{self, LoadOptions};
use ckpt_core::save::{save_tree, SaveOptions};
use ckpt_core::sharding::{Mesh, PartitionSpec, Sharding};
use ckpt_core::storage::{OpKind, Storage};
use ckpt_core::tree::{DType, DenseArray, Node, Scalar, ShardedTree, Tree};
use serde_json::Value;

fn cli(storage: &Storage, args: &[&str]) -> (i32, String, String) {
    let mut argv = vec!["ckpt".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let (mut out, mut err) = (vec![], vec![]);
    let code = run_with(argv, Some(storage), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn json(storage: &Storage, args: &[&str]) -> (i32, Value) {
    let mut a = args.to_vec();
    a.push("--json");
    let (code, out, err) = cli(storage, &a);
    assert!(!out.is_empty(), "no output (exit {code}): {err}");
    (code, serde_json::from_str(&out).unwrap())
}

fn arange(shape: &[usize]) -> DenseArray {
    let n: usize = shape.iter().product();
    DenseArray::from_slice(shape.to_vec(), &(0..n).map(|i| i as f32).collect::<Vec<_>>()).unwrap()
}

fn mesh(axes: &[(&str, usize)], per_process: usize) -> Mesh {
    Mesh::new(axes.iter().map(|(a, n)| (a.to_string(), *n)).collect(), per_process).unwrap()
}

fn spec(dims: &[Option<&str>]) -> PartitionSpec {
    PartitionSpec::new(dims.iter().map(|d| d.map(str::to_string)).collect())
}

/// Two leaves: a (8, 4) f32 array sharded over two processes and a scalar.
fn two_leaf(storage: &Storage, path: &str) -> ShardedTree {
    let rt = Runtime::new(storage.clone(), RuntimeConfig::new(2, Mode::MultiController)).unwrap();
    let m = mesh(&[("x", 2)], 1);
    let st =
        ShardedTree::new(Tree::new(Node::mapping([("w", Node::leaf(arange(&[8, 4]))), ("step", Node::leaf(Scalar::new(3i64)))])).unwrap())
            .with_sharding("w", Sharding::new(m, spec(&[Some("x"), None]), vec![8, 4]).unwrap());
    save_tree(&rt, path, st.clone(), &SaveOptions::sync()).unwrap();
    st
}

#[test]
fn inspect_lists_leaves_without_payload_reads() {
    let s = Storage::memory();
    two_leaf(&s, "ck");
    let before = s.counters();
    let (code, out, _) = cli(&s, &["inspect", "ck"]);
    assert_eq!(code, 0);
    assert_eq!(s.counters().since(&before).total.payload_bytes_read, 0);
    assert!(out.contains("state/w") && out.contains("state/step"), "{out}");
    let (code, v) = json(&s, &["inspect", "ck"]);
    assert_eq!(code, 0);
    assert_eq!(v["leaves"].as_array().unwrap().len(), 2);
    assert_eq!(v["io"]["payload_bytes_read"], 0);
    assert_eq!(v["io"]["bytes_written"], 0);
    let w = &v["leaves"][1];
    assert_eq!(w["path"], "w");
    assert_eq!(w["shape"], serde_json::json!([8, 4]));
    assert_eq!(w["write_chunk"], serde_json::json!([4, 4]));
    assert_eq!(w["sharding"], "[x=2] (x,_)");
}

#[test]
fn inspect_missing_or_unfinalized_is_usage_error() {
    let s = Storage::memory_without_rename();
    assert_eq!(cli(&s, &["inspect", "nope"]).0, 2);
    two_leaf(&s, "ck");
    s.raw().delete("ck/COMMIT").unwrap();
    let (code, _, err) = cli(&s, &["inspect", "ck"]);
    assert_eq!(code, 2);
    assert!(err.contains("not finalized"), "{err}");
}

#[test]
fn validate_reports() {
    let s = Storage::memory();
    two_leaf(&s, "ck");
    let before = s.counters();
    let (code, v) = json(&s, &["validate", "ck"]);
    assert_eq!(code, 0, "{v}");
    assert_eq!(v["ok"], true);
    assert_eq!(v["chunks_checked"], 2);
    let d = s.counters().since(&before).total;
    assert_eq!((d.payload_bytes_read, d.bytes_written), (0, 0));

    s.raw().delete("ck/process_1/state/w/c.1.0").unwrap();
    let (code, out, _) = cli(&s, &["validate", "ck"]);
    assert_eq!(code, 1);
    assert!(out.contains("ck/process_1/state/w/c.1.0"), "{out}");

    assert_eq!(cli(&s, &["validate", "missing"]).0, 2);
}

#[test]
fn validate_detects_conflicting_process_metadata() {
    let s = Storage::memory();
    two_leaf(&s, "ck");
    let key = "ck/process_1/array_metadata.json";
    let mut doc: ProcessIndexDoc = serde_json::from_slice(&s.raw().get(key).unwrap()).unwrap();
    doc.arrays.get_mut("state/w").unwrap().storage.dtype = DType::F64;
    s.raw().put(key, &doc.to_bytes()).unwrap();
    let (code, v) = json(&s, &["validate", "ck"]);
    assert_eq!(code, 1);
    let problems = v["problems"].to_string();
    assert!(problems.contains("inconsistent"), "{problems}");
}

#[test]
fn validate_flags_missing_commit() {
    let s = Storage::memory_without_rename();
    two_leaf(&s, "ck");
    s.raw().delete("ck/COMMIT").unwrap();
    let (code, out, _) = cli(&s, &["validate", "ck"]);
    assert_eq!(code, 1);
    assert!(out.contains("COMMIT"), "{out}");
}

#[test]
fn reshard_16x4_to_64x1() {
    let s = Storage::memory();
    let rt = Runtime::new(s.clone(), RuntimeConfig::new(8, Mode::MultiController)).unwrap();
    let src = mesh(&[("x", 16), ("y", 4)], 8);
    let a = arange(&[256, 64]);
    let st = ShardedTree::new(Tree::new(Node::mapping([("a", Node::leaf(a.clone()))])).unwrap())
        .with_sharding("a", Sharding::new(src, spec(&[Some("x"), Some("y")]), vec![256, 64]).unwrap());
    save_tree(&rt, "src", st, &SaveOptions::sync()).unwrap();

    let (code, v) = json(
        &s,
        &["reshard", "src", "dst", "--mesh", "x=64,y=1", "--partitions", "a=x,y", "--processes", "8", "--subchunk-target-bytes", "256"],
    );
    assert_eq!(code, 0, "{v}");
    assert_eq!(v["arrays"], 1);
    let back = load::load(&rt, "dst", None, &LoadOptions::default()).unwrap();
    assert_eq!(back.tree.get("a").unwrap().as_array().unwrap(), &a);
    assert_eq!(back.shardings["a"].mesh().axes(), &[("x".to_string(), 64), ("y".to_string(), 1)]);
    let (_, info) = json(&s, &["inspect", "dst"]);
    assert_eq!(info["leaves"][0]["read_chunk"], serde_json::json!([1, 64]));

    // identity
    let (code, _, err) = cli(&s, &["reshard", "src", "same", "--layout", "aggregated"]);
    assert_eq!(code, 0, "{err}");
    let same = load::load(&rt, "same", None, &LoadOptions::default()).unwrap();
    assert_eq!(same.tree.get("a").unwrap().as_array().unwrap(), &a);

    // indivisible target
    let (code, _, err) = cli(&s, &["reshard", "src", "bad", "--mesh", "x=3", "--partitions", "a=x,_", "--processes", "3"]);
    assert_eq!(code, 1, "{err}");
    assert!(err.contains("not divisible"), "{err}");
}

fn strip_wall(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.remove("wall_ms");
            m.values_mut().for_each(strip_wall);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_wall),
        _ => {}
    }
}

#[test]
fn bench_replica_parallel_and_broadcast_ratios() {
    let s = Storage::memory();
    let (code, v) = json(&s, &["bench", "--processes", "8", "--replicas", "4", "--seed", "7"]);
    assert_eq!(code, 0, "{v}");
    let saves = v["saves"].as_array().unwrap();
    let single: Vec<u64> = saves[0]["per_process_payload_written"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
    assert_eq!(single[2..].iter().sum::<u64>(), 0, "{single:?}");
    let total = v["config"]["total_bytes"].as_u64().unwrap();
    assert_eq!(saves[1]["max_process_payload_written"].as_u64().unwrap(), total / 8);
    assert!((v["replica_parallel_max_ratio"].as_f64().unwrap() - 0.25).abs() < 0.0025, "{}", v["replica_parallel_max_ratio"]);
    assert!((v["broadcast_read_ratio"].as_f64().unwrap() - 0.25).abs() < 0.0025, "{}", v["broadcast_read_ratio"]);
    assert!(v["loads"].as_array().unwrap().iter().all(|l| l["bit_identical"] == true));

    // totals equal the backend's counters; the scratch prefix is removed
    let c = serde_json::to_value(s.counters().total).unwrap();
    assert_eq!(v["totals"], c);
    assert!(s.dump("").unwrap().is_empty());

    let mut again = json(&Storage::memory(), &["bench", "--processes", "8", "--replicas", "4", "--seed", "7"]).1;
    let mut first = v.clone();
    strip_wall(&mut first);
    strip_wall(&mut again);
    assert_eq!(first, again);
}

#[test]
fn bench_single_process_strategies_coincide() {
    let (code, v) = json(&Storage::memory(), &["bench", "--seed", "1"]);
    assert_eq!(code, 0);
    assert_eq!(v["replica_parallel_max_ratio"].as_f64().unwrap(), 1.0);
    assert_eq!(v["broadcast_read_ratio"].as_f64().unwrap(), 1.0);
}

#[test]
fn bench_model_spec_and_bad_replicas() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("model.json");
    std::fs::write(
        &f,
        r#"[{"path": "enc/w", "shape": [64, 32], "dtype": "f32", "partition": [null, "model"]},
                          {"path": "enc/b", "shape": [32], "dtype": "i64"}]"#,
    )
    .unwrap();
    let s = Storage::memory();
    let (code, v) = json(
        &s,
        &[
            "bench",
            "--processes",
            "4",
            "--replicas",
            "2",
            "--model-spec",
            f.to_str().unwrap(),
            "--strategy",
            "replica-parallel",
            "--load-strategy",
            "broadcast",
        ],
    );
    assert_eq!(code, 0, "{v}");
    assert_eq!(v["config"]["leaves"], 2);
    assert_eq!(v["saves"].as_array().unwrap().len(), 1);
    assert!(v["broadcast_read_ratio"].is_null());
    assert_eq!(cli(&s, &["bench", "--processes", "4", "--replicas", "3"]).0, 2);
}

#[test]
fn gc_and_latest() {
    let s = Storage::memory();
    let rt = Runtime::local(s.clone());
    for step in 0..6u64 {
        let t = Tree::new(Node::mapping([("x", Node::leaf(Scalar::new(step as i64)))])).unwrap();
        save_tree(&rt, &format!("run/step_{step:08}"), t, &SaveOptions::sync()).unwrap();
    }
    let (code, out, _) = cli(&s, &["latest", "run"]);
    assert_eq!((code, out.as_str()), (0, "5"));
    let (code, v) = json(&s, &["gc", "run", "--keep-last", "2", "--keep-period", "4"]);
    assert_eq!(code, 0);
    assert_eq!(v["deleted_steps"], serde_json::json!([1, 2, 3]));
    let (_, v) = json(&s, &["gc", "run", "--keep-last", "2", "--keep-period", "4"]);
    assert_eq!(v["deleted_steps"], serde_json::json!([]));
    assert_eq!(cli(&s, &["gc", "run"]).0, 2);
    assert_eq!(cli(&s, &["latest", "empty"]).1, "none");
}

#[test]
fn gc_sweep_tmp() {
    let s = Storage::memory();
    let rt = Runtime::local(s.clone());
    let t = || Tree::new(Node::mapping([("x", Node::leaf(arange(&[4])))])).unwrap();
    save_tree(&rt, "run/step_00000000", t(), &SaveOptions::sync()).unwrap();
    s.fail_puts_containing("merged_index");
    let _ = save_tree(&rt, "run/step_00000001", t(), &SaveOptions { retain_temp_on_failure: true, ..SaveOptions::sync() });
    s.clear_faults();
    let (_, v) = json(&s, &["gc", "run", "--sweep-tmp"]);
    assert_eq!(v["swept"], serde_json::json!([]));
    let (code, v) = json(&s, &["gc", "run", "--sweep-tmp", "--max-age-secs", "0"]);
    assert_eq!(code, 0);
    assert_eq!(v["swept"].as_array().unwrap().len(), 1);
    assert_eq!(s.counters().total.op(OpKind::DeletePrefix), 1);
}

#[test]
fn config_file_mirrors_flags() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("c.json");
    std::fs::write(&f, r#"{"processes": 4, "replicas": 4, "seed": 3, "strategy": "replica-parallel", "load_strategy": "direct"}"#).unwrap();
    let (code, v) = json(&Storage::memory(), &["bench", "--config", f.to_str().unwrap()]);
    assert_eq!(code, 0, "{v}");
    assert_eq!(v["config"]["processes"], 4);
    assert_eq!(v["config"]["seed"], 3);
    assert_eq!(v["saves"][0]["strategy"], "replica-parallel");
}

#[test]
fn usage_errors() {
    let s = Storage::memory();
    assert_eq!(cli(&s, &["frobnicate"]).0, 2);
    assert_eq!(cli(&s, &["inspect"]).0, 2);
    assert_eq!(cli(&s, &["--mode", "dual", "inspect", "x"]).0, 2);
    assert_eq!(cli(&s, &["--help"]).0, 0);
}

#[test]
fn binary_on_filesystem_backend() {
    let dir = tempfile::tempdir().unwrap();
    let storage = Storage::filesystem(dir.path()).unwrap();
    two_leaf(&storage, "ck");
    let backend = format!("fs:{}", dir.path().display());
    let run = |args: &[&str]| Command::new(env!("CARGO_BIN_EXE_ckpt")).arg("--backend").arg(&backend).args(args).output().unwrap();
    let o = run(&["inspect", "ck"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("state/w"));
    assert_eq!(run(&["validate", "ck"]).status.code(), Some(0));
    assert_eq!(run(&["inspect", "missing"]).status.code(), Some(2));
    std::fs::remove_file(dir.path().join("ck/process_0/state/w/c.0.0")).unwrap();
    let o = run(&["validate", "ck"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("c.0.0"));
    let o = Command::new(env!("CARGO_BIN_EXE_ckpt")).args(["--backend", "s3:x", "inspect", "ck"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn subchunk_target_flag() {
    let s = Storage::memory();
    two_leaf(&s, "ck");
    let (code, _, err) = cli(&s, &["reshard", "ck", "whole", "--subchunk-target-bytes", "off"]);
    assert_eq!(code, 0, "{err}");
    let (_, v) = json(&s, &["inspect", "whole"]);
    assert_eq!(v["leaves"][1]["read_chunk"], v["leaves"][1]["write_chunk"]);
    let (code, _, err) = cli(&s, &["reshard", "ck", "small", "--subchunk-target-bytes", "16"]);
    assert_eq!(code, 0, "{err}");
    let (_, v) = json(&s, &["inspect", "small"]);
    assert_eq!(v["leaves"][1]["read_chunk"], serde_json::json!([1, 4]));
    assert_eq!(cli(&s, &["reshard", "ck", "bad", "--subchunk-target-bytes", "lots"]).0, 2);
}

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use ckpt_core::chunkstore::{Layout, MergedIndexDoc, MERGED_INDEX};
use ckpt_core::coordination::{CrashPoint, Mode, Runtime, RuntimeConfig};
use ckpt_core::load::{self, metadata, plan, LoadMode, LoadOptions};
use ckpt_core::save::{self, is_finalized, save_tree, SaveOptions, SavePhase, COMMIT_FILE};
use ckpt_core::sharding::Sharding;
use ckpt_core::storage::{Actor, OpKind, Storage};
use ckpt_core::tree::{
    abstract_of, AbstractCheckpointable, AbstractLeaf, Checkpointable, DType, DenseArray, IndexIterator, Leaf, Node, Scalar, ShardedTree,
    StatefulCheckpointable, Tree,
};
use ckpt_core::Error;
use common::*;

fn sync_opts() -> SaveOptions {
    SaveOptions::sync()
}

#[test]
fn two_leaf_round_trip() {
    let s = Storage::memory();
    let rt = Runtime::local(s.clone());
    let tree = Tree::new(Node::mapping([("a", Node::leaf(arange(&[3, 4], DType::F32))), ("b", Node::leaf(Scalar::new(1.5f64)))])).unwrap();
    save_tree(&rt, "ck", tree.clone(), &sync_opts()).unwrap();
    assert!(is_finalized(&s, "ck").unwrap());
    let back = load::load(&rt, "ck", None, &LoadOptions::default()).unwrap();
    assert!(arrays_equal(&back.tree, &tree));
}

#[test]
fn multi_process_round_trip_and_disjoint_keys() {
    for p in [1, 2, 4] {
        let s = Storage::memory();
        let rt = runtime(&s, p, Mode::MultiController);
        let st = sample(p);
        save_tree(&rt, "ck", st.clone(), &sync_opts()).unwrap();
        let back = load::load(&rt, "ck", None, &LoadOptions::default()).unwrap();
        assert!(arrays_equal(&back.tree, &st.tree), "P={p}");
        assert_eq!(back.shardings, st.shardings);
        let keys: Vec<String> = s.dump("ck").unwrap().into_keys().collect();
        for i in 0..p {
            let mine: BTreeSet<&String> = keys.iter().filter(|k| k.starts_with(&format!("ck/process_{i}/"))).collect();
            assert!(!mine.is_empty());
        }
    }
}

#[test]
fn chunk_writes_attributed_to_owning_process() {
    let s = Storage::memory();
    let rt = runtime(&s, 4, Mode::MultiController);
    save_tree(&rt, "ck", sample(4), &sync_opts()).unwrap();
    let c = s.counters();
    for p in 0..4 {
        assert!(c.actor(Actor::Process(p)).payload_bytes_written > 0);
    }
    for k in s.dump("ck").unwrap().keys() {
        if let Some(rest) = k.strip_prefix("ck/process_") {
            assert!(rest.chars().next().unwrap().is_ascii_digit());
        }
    }
}

#[test]
fn async_snapshot_isolates_caller_mutations() {
    let s = Storage::memory();
    let rt = Runtime::local(s.clone());
    let original = arange(&[16], DType::I32);
    let mut items = single("state", Tree::new(Node::mapping([("x", Node::leaf(original.clone()))])).unwrap());
    s.close_gate();
    let h = save::save(&rt, "ck", &items, &SaveOptions::default()).unwrap();
    assert_eq!(h.phase().max(SavePhase::Snapshotted), h.phase());
    assert_eq!(s.counters().total.payload_bytes_written, 0);
    // mutate the caller's tree after return
    if let Some(Checkpointable::Tree(st)) = items.get_mut("state") {
        st.tree = Tree::new(Node::mapping([("x", Node::leaf(DenseArray::zeros(vec![16], DType::I32)))])).unwrap();
    }
    s.open_gate();
    h.wait().unwrap();
    assert_eq!(h.phase(), SavePhase::Finalized);
    let back = load::load(&rt, "ck", None, &LoadOptions::default()).unwrap();
    assert_eq!(back.tree.get("x"), Some(&Leaf::Array(original)));
}

#[test]
fn occupied_path_rejected_before_snapshot() {
    let s = Storage::memory();
    let rt = Runtime::local(s.clone());
    save_tree(&rt, "ck", sample(1), &sync_opts()).unwrap();
    let before = s.counters();
    let err = save_tree(&rt, "ck", sample(1), &SaveOptions::default()).unwrap_err();
    assert_eq!(err, Error::AlreadyExists("ck".into()));
    let delta = s.counters().since(&before).total;
    assert_eq!(delta.bytes_written, 0);
    assert_eq!(delta.op(OpKind::CreateDir), 0);
}

#[test]
fn injected_write_failure_reported_once() {
    for storage in [Storage::memory(), Storage::memory_without_rename()] {
        let rt = runtime(&storage, 2, Mode::MultiController);
        storage.fail_puts_containing("params/w/c.1");
        let h = save_tree(&rt, "ck", sample(2), &SaveOptions::default()).unwrap();
        let err = h.wait().unwrap_err();
        assert!(err.to_string().contains("params/w/c.1"), "{err}");
        assert!(h.wait().is_ok());
        assert_eq!(h.phase(), SavePhase::Failed);
        storage.clear_faults();
        assert!(!is_finalized(&storage, "ck").unwrap());
        // the temporary target was removed
        assert!(storage.dump("").unwrap().is_empty(), "{:?}", storage.dump("").unwrap().keys().collect::<Vec<_>>());
    }
}

#[test]
fn retained_temp_on_failure() {
    let s = Storage::memory();
    let rt = Runtime::local(s.clone());
    s.fail_puts_containing("merged_index");
    let opts = SaveOptions { retain_temp_on_failure: true, ..sync_opts() };
    assert!(save_tree(&rt, "ck", sample(1), &opts).is_err());
    s.clear_faults();
    assert!(s.dump("").unwrap().keys().any(|k| k.starts_with("ck.tmp.")));
}

#[test]
fn commit_styles() {
    let s = Storage::memory();
    save_tree(&Runtime::local(s.clone()), "ck", sample(1), &sync_opts()).unwrap();
    assert!(!s.raw().exists(&format!("ck/{COMMIT_FILE}")).unwrap());
    let s = Storage::memory_without_rename();
    save_tree(&Runtime::local(s.clone()), "ck", sample(1), &sync_opts()).unwrap();
    assert!(s.raw().exists(&format!("ck/{COMMIT_FILE}")).unwrap());
    assert_eq!(s.counters().total.op(OpKind::Rename), 0);
}

#[test]
fn unfinalized_indicator_checkpoint_is_invisible_and_replaced() {
    let s = Storage::memory_without_rename();
    let rt = Runtime::local(s.clone());
    save_tree(&rt, "ck", sample(1), &sync_opts()).unwrap();
    s.raw().delete("ck/COMMIT").unwrap();
    assert!(matches!(metadata(&s, "ck"), Err(Error::NotFinalized(_))));
    // a new save clears the stale content
    save_tree(&rt, "ck", sample(1), &sync_opts()).unwrap();
    assert!(is_finalized(&s, "ck").unwrap());
}

#[test]
fn crash_before_commit_leaves_nothing() {
    let s = Storage::memory();
    let rt = Runtime::new(
        s.clone(),
        RuntimeConfig::new(4, Mode::MultiController).with_timeout(Duration::from_millis(300)).with_crash(CrashPoint { process: 2, at: 2 }),
    )
    .unwrap();
    let h = save_tree(&rt, "ck", sample(4), &SaveOptions::default()).unwrap();
    assert!(h.wait().is_err());
    assert!(!is_finalized(&s, "ck").unwrap());
    assert!(matches!(metadata(&s, "ck"), Err(Error::NotFound(_))));
}

#[test]
fn leader_actions_happen_once() {
    for mode in [Mode::MultiController, Mode::SingleController] {
        let s = Storage::memory();
        let rt = runtime(&s, 4, mode);
        save_tree(&rt, "ck", sample(4), &sync_opts()).unwrap();
        let stats = rt.stats();
        let who = if mode == Mode::MultiController { Actor::Process(0) } else { Actor::Controller };
        for action in ["create_dir", "write_global_metadata", "merge", "commit"] {
            assert_eq!(stats.action_count(action), 1, "{action} {mode}");
            assert_eq!(stats.action_actors(action), BTreeSet::from([who]));
        }
    }
}

#[test]
fn controller_modes_write_identical_checkpoints() {
    let mut dumps = vec![];
    for mode in [Mode::MultiController, Mode::SingleController] {
        let s = Storage::memory();
        save_tree(&runtime(&s, 4, mode), "ck", sample(4), &sync_opts()).unwrap();
        assert_eq!(s.counters().actor(Actor::Controller).payload_bytes_written, 0);
        dumps.push(s.dump("").unwrap());
    }
    assert_eq!(dumps[0], dumps[1]);
}

#[test]
fn existence_check_never_sees_new_directory() {
    for storage in [Storage::memory_without_rename(), Storage::memory()] {
        for seed in 0..40 {
            let rt =
                Runtime::new(storage.clone(), RuntimeConfig::new(1 + (seed as usize % 8), Mode::MultiController).with_seed(seed)).unwrap();
            let p = rt.process_count();
            let path = format!("race{seed}");
            save_tree(&rt, &path, sample(p), &sync_opts()).unwrap();
            let seen: Vec<_> = rt.events().into_iter().filter(|e| e.kind == "existence_check").collect();
            assert_eq!(seen.len(), p);
            assert!(seen.iter().all(|e| e.detail.ends_with("existed=false")), "{seen:?}");
        }
    }
}

#[test]
fn without_existence_barrier_followers_can_see_the_directory() {
    // negative control: drop the barrier and some follower eventually observes the leader's directory
    let s = Storage::memory_without_rename();
    let mut observed = false;
    for seed in 0..200 {
        let rt = Runtime::new(s.clone(), RuntimeConfig::new(8, Mode::MultiController).with_seed(seed)).unwrap();
        let opts = SaveOptions { skip_existence_barrier: true, ..sync_opts() };
        let _ = save_tree(&rt, &format!("nb{seed}"), sample(8), &opts);
        if rt.events().iter().any(|e| e.kind == "existence_check" && e.detail.ends_with("existed=true")) {
            observed = true;
            break;
        }
    }
    assert!(observed);
}

#[test]
fn metadata_reads_no_chunk_data() {
    let s = Storage::memory();
    let rt = runtime(&s, 2, Mode::MultiController);
    let st = sample(2);
    save_tree(&rt, "ck", st.clone(), &sync_opts()).unwrap();
    let before = s.counters();
    let meta = metadata(&s, "ck").unwrap();
    assert_eq!(s.counters().since(&before).total.payload_bytes_read, 0);
    let expected = abstract_of(&st.tree, &st.shardings).unwrap();
    assert_eq!(meta.abstract_tree("state").unwrap(), expected);
}

#[test]
fn tampered_index_names_missing_leaf() {
    let s = Storage::memory();
    let rt = Runtime::local(s.clone());
    save_tree(&rt, "ck", sample(1), &sync_opts()).unwrap();
    let key = format!("ck/{MERGED_INDEX}");
    let mut idx = MergedIndexDoc::parse(&key, &s.raw().get(&key).unwrap()).unwrap();
    idx.arrays.remove("state/params/b");
    s.raw().put(&key, &idx.to_bytes()).unwrap();
    let err = metadata(&s, "ck").unwrap_err();
    assert!(err.to_string().contains("state/params/b"), "{err}");
}

#[test]
fn partial_and_strict_plans() {
    let s = Storage::memory();
    let rt = runtime(&s, 2, Mode::MultiController);
    let st = sample(2);
    save_tree(&rt, "ck", st.clone(), &sync_opts()).unwrap();
    let meta = metadata(&s, "ck").unwrap();
    let full = abstract_of(&st.tree, &st.shardings).unwrap();

    let same = plan(&meta, "state", Some(&full), LoadMode::Strict, None, 2, false).unwrap();
    assert!(same.directives.iter().all(|d| d.cast.is_none() && !d.is_placeholder()));

    let subset = full.filter(|p| !p.starts_with("opt/"));
    let p = plan(&meta, "state", Some(&subset), LoadMode::Partial, None, 2, false).unwrap();
    assert!(p.directives.iter().all(|d| !d.path.starts_with("opt/")));
    assert_eq!(p.directives.len(), 3);
    let err = plan(&meta, "state", Some(&subset), LoadMode::Strict, None, 2, false).unwrap_err();
    assert!(
        matches!(&err, Error::StructureMismatch { extra, missing } if missing.is_empty() && extra == &vec!["opt/m".to_string(), "opt/step".to_string()])
    );

    let mut root = match full.root().clone() {
        Node::Mapping(m) => m,
        _ => unreachable!(),
    };
    root.insert("new_head".into(), Node::mapping([("w", Node::leaf(AbstractLeaf::array(vec![4], DType::F32)))]));
    let superset = Tree::new(Node::Mapping(root)).unwrap();
    let p = plan(&meta, "state", Some(&superset), LoadMode::Partial, None, 2, false).unwrap();
    let ph: Vec<&str> = p.directives.iter().filter(|d| d.is_placeholder()).map(|d| d.path.as_str()).collect();
    assert_eq!(ph, vec!["new_head/w"]);
    let err = plan(&meta, "state", Some(&superset), LoadMode::Strict, None, 2, false).unwrap_err();
    assert!(matches!(&err, Error::StructureMismatch { missing, .. } if missing == &vec!["new_head/w".to_string()]));

    let loaded = load::load(&rt, "ck", Some(&superset), &LoadOptions { mode: LoadMode::Partial, ..LoadOptions::default() }).unwrap();
    assert!(matches!(loaded.tree.get("new_head/w"), Some(Leaf::Placeholder(_))));
    assert_eq!(loaded.tree.get("opt/step"), st.tree.get("opt/step"));
}

#[test]
fn partial_load_reads_only_requested_leaves() {
    let s = Storage::memory();
    let rt = runtime(&s, 2, Mode::MultiController);
    let st = sample(2);
    save_tree(&rt, "ck", st.clone(), &sync_opts()).unwrap();
    let full = abstract_of(&st.tree, &st.shardings).unwrap();
    let only_b = full.filter(|p| p == "params/b");
    let before = s.counters();
    let (tree, report) =
        load::load_item(&rt, "ck", None, Some(&only_b), &LoadOptions { mode: LoadMode::Partial, ..Default::default() }).unwrap();
    let read = s.counters().since(&before).total.payload_bytes_read;
    let b_bytes = st.tree.get("params/b").unwrap().as_array().unwrap().bytes().len() as u64;
    assert_eq!(read, b_bytes);
    assert_eq!(report.per_leaf.keys().collect::<Vec<_>>(), vec!["params/b"]);
    assert_eq!(tree.tree.paths(), vec!["params/b"]);
}

#[test]
fn widening_cast_is_exact() {
    let s = Storage::memory();
    let rt = Runtime::local(s.clone());
    let a = DenseArray::from_slice(vec![4], &[0.1f32, -3.5, 1e30, f32::MIN_POSITIVE]).unwrap();
    save_tree(&rt, "ck", Tree::new(Node::mapping([("a", Node::leaf(a.clone()))])).unwrap(), &sync_opts()).unwrap();
    let target = Tree::new(Node::mapping([("a", Node::leaf(AbstractLeaf::array(vec![4], DType::F64)))])).unwrap();
    let back = load::load(&rt, "ck", Some(&target), &LoadOptions::default()).unwrap();
    let got = back.tree.get("a").unwrap().as_array().unwrap().to_vec::<f64>();
    let want: Vec<f64> = a.to_vec::<f32>().into_iter().map(f64::from).collect();
    assert_eq!(got, want);
}

#[test]
fn narrowing_overflow_fails_whole_load() {
    let s = Storage::memory();
    let rt = Runtime::local(s.clone());
    let a = DenseArray::from_slice(vec![2], &[1i64, 1 << 40]).unwrap();
    save_tree(&rt, "ck", Tree::new(Node::mapping([("a", Node::leaf(a))])).unwrap(), &sync_opts()).unwrap();
    let target = Tree::new(Node::mapping([("a", Node::leaf(AbstractLeaf::array(vec![2], DType::I32)))])).unwrap();
    assert!(load::load(&rt, "ck", Some(&target), &LoadOptions::default()).is_err());
}

#[test]
fn load_never_writes() {
    let s = Storage::memory();
    let rt = runtime(&s, 4, Mode::MultiController);
    save_tree(&rt, "ck", sample(4), &sync_opts()).unwrap();
    let before = s.counters();
    load::load(&rt, "ck", None, &LoadOptions::default()).unwrap();
    let d = s.counters().since(&before).total;
    assert_eq!(d.bytes_written, 0);
    assert_eq!(d.op(OpKind::Put) + d.op(OpKind::Delete) + d.op(OpKind::Rename), 0);
}

#[test]
fn topology_change_needs_abstract_state() {
    let s = Storage::memory();
    save_tree(&runtime(&s, 4, Mode::MultiController), "ck", sample(4), &sync_opts()).unwrap();
    let rt2 = runtime(&s, 2, Mode::MultiController);
    assert!(matches!(load::load(&rt2, "ck", None, &LoadOptions::default()), Err(Error::TopologyMismatch(_))));
    let other = mesh(&[("x", 2)], 1);
    let opts = LoadOptions { mesh: Some(other.clone()), ..Default::default() };
    assert!(matches!(load::load(&rt2, "ck", None, &opts), Err(Error::TopologyMismatch(_))));
    // an explicit target works
    let st = sample(4);
    let shardings: BTreeMap<String, Sharding> =
        st.shardings.iter().map(|(k, v)| (k.clone(), Sharding::replicated(other.clone(), v.global_shape().to_vec()))).collect();
    let target = abstract_of(&st.tree, &shardings).unwrap();
    let back = load::load(&rt2, "ck", Some(&target), &LoadOptions::default()).unwrap();
    assert!(arrays_equal(&back.tree, &st.tree));
}

#[test]
fn resharding_from_16x4_to_64x1_overhead() {
    // (256, 64) f32 saved over a (16, 4) grid, read back over (64, 1)
    let a = arange(&[256, 64], DType::F32);
    let src = mesh(&[("x", 16), ("y", 4)], 8);
    let dst = mesh(&[("x", 64), ("y", 1)], 8);
    for (target, ratio) in [(Some(256u64), 1.0), (None, 4.0)] {
        let s = Storage::memory();
        let rt = runtime(&s, 8, Mode::MultiController);
        let st = ShardedTree::new(Tree::new(Node::mapping([("a", Node::leaf(a.clone()))])).unwrap())
            .with_sharding("a", sharding(&src, &[Some("x"), Some("y")], &[256, 64]));
        save_tree(&rt, "ck", st, &SaveOptions { subchunk_target_bytes: target, ..sync_opts() }).unwrap();
        let want = Tree::new(Node::mapping([(
            "a",
            Node::leaf(AbstractLeaf::array(vec![256, 64], DType::F32).with_sharding(sharding(&dst, &[Some("x"), Some("y")], &[256, 64]))),
        )]))
        .unwrap();
        let (back, report) = load::load_item(&rt, "ck", None, Some(&want), &LoadOptions::default()).unwrap();
        assert_eq!(back.tree.get("a"), Some(&Leaf::Array(a.clone())));
        assert_eq!(report.total.overhead_ratio(), ratio);
    }
}

#[test]
fn broadcast_load_reads_one_replica() {
    for n in [1usize, 2, 4] {
        let s = Storage::memory();
        let m = mesh(&[("replica", n), ("model", 2)], 1).with_replica_axis("replica").unwrap();
        let procs = 2 * n;
        let rt = runtime(&s, procs, Mode::MultiController);
        let mut r = rng(n as u64);
        let w = random_array(&mut r, &[16, 8], DType::F32);
        let st = ShardedTree::new(Tree::new(Node::mapping([("w", Node::leaf(w))])).unwrap())
            .with_sharding("w", sharding(&m, &[None, Some("model")], &[16, 8]));
        save_tree(&rt, "ck", st.clone(), &sync_opts()).unwrap();
        let target = abstract_of(&st.tree, &st.shardings).unwrap();
        let b0 = s.counters();
        let plain = load::load(&rt, "ck", Some(&target), &LoadOptions::default()).unwrap();
        let b1 = s.counters();
        let bcast = load::load_with_broadcast(&rt, "ck", &target, &LoadOptions::default()).unwrap();
        let b2 = s.counters();
        assert_eq!(plain, bcast);
        assert!(arrays_equal(&plain.tree, &st.tree));
        let direct = b1.since(&b0).total.payload_bytes_read;
        let via = b2.since(&b1).total.payload_bytes_read;
        assert_eq!(via * n as u64, direct, "n={n}");
    }
}

#[test]
fn broadcast_needs_complete_group_zero() {
    let s = Storage::memory();
    let m = mesh(&[("replica", 2), ("model", 2)], 1).with_replica_axis("replica").unwrap();
    let rt = runtime(&s, 4, Mode::MultiController);
    let st = ShardedTree::new(Tree::new(Node::mapping([("w", Node::leaf(arange(&[8, 8], DType::F32)))])).unwrap())
        .with_sharding("w", sharding(&m, &[Some("replica"), Some("model")], &[8, 8]));
    save_tree(&rt, "ck", st.clone(), &sync_opts()).unwrap();
    let target = abstract_of(&st.tree, &st.shardings).unwrap();
    assert!(load::load_with_broadcast(&rt, "ck", &target, &LoadOptions::default()).is_err());
}

#[test]
fn replica_parallel_spreads_writes() {
    let n = 4;
    let m = mesh(&[("replica", n), ("model", 2)], 1);
    let st = ShardedTree::new(Tree::new(Node::mapping([("w", Node::leaf(arange(&[64, 16], DType::F32)))])).unwrap())
        .with_sharding("w", sharding(&m, &[None, Some("model")], &[64, 16]));
    for rp in [false, true] {
        let s = Storage::memory();
        let rt = runtime(&s, 2 * n, Mode::MultiController);
        save_tree(&rt, "ck", st.clone(), &SaveOptions { replica_parallel: rp, ..sync_opts() }).unwrap();
        let c = s.counters();
        let per: Vec<u64> = (0..2 * n).map(|p| c.actor(Actor::Process(p)).payload_bytes_written).collect();
        let total = 64 * 16 * 4;
        if rp {
            assert!(per.iter().all(|&b| b == total / (2 * n as u64)), "{per:?}");
        } else {
            assert_eq!(per.iter().filter(|&&b| b > 0).count(), 2, "{per:?}");
        }
        let back = load::load(&rt, "ck", None, &LoadOptions::default()).unwrap();
        assert!(arrays_equal(&back.tree, &st.tree));
    }
}

#[test]
fn documents_and_iterators_round_trip() {
    let s = Storage::memory();
    let rt = runtime(&s, 2, Mode::MultiController);
    let mut it = IndexIterator::new(100);
    it.by_ref().take(17).for_each(drop);
    let mut items = single("model", sample(2));
    items.insert("dataset".into(), Checkpointable::from_stateful(&it));
    items.insert("config".into(), Checkpointable::Document(serde_json::json!({"lr": 0.1, "name": "x"})));
    save::save(&rt, "ck", &items, &sync_opts()).unwrap();
    let back = load::load_checkpointables(&rt, "ck", None, &LoadOptions::default()).unwrap();
    assert_eq!(back["config"], items["config"]);
    let mut restored = IndexIterator::new(100);
    restored.load_state(back["dataset"].as_document().unwrap()).unwrap();
    assert_eq!(restored.next(), Some(17));
    assert!(arrays_equal(&back["model"].as_tree().unwrap().tree, &items["model"].as_tree().unwrap().tree));

    let targets = BTreeMap::from([("config".to_string(), AbstractCheckpointable::Document)]);
    let only =
        load::load_checkpointables(&rt, "ck", Some(&targets), &LoadOptions { mode: LoadMode::Partial, ..Default::default() }).unwrap();
    assert_eq!(only.keys().collect::<Vec<_>>(), vec!["config"]);
}

#[test]
fn invalid_names_and_placeholders_rejected() {
    let rt = Runtime::local(Storage::memory());
    for bad in ["", "a/b", "process_1", "x.json", "COMMIT", ".."] {
        let items = single(bad, sample(1));
        assert!(matches!(save::save(&rt, "ck", &items, &sync_opts()), Err(Error::InvalidName(_))), "{bad:?}");
    }
    let t = Tree::new(Node::mapping([("p", Node::leaf(Leaf::Placeholder(AbstractLeaf::text())))])).unwrap();
    assert!(save_tree(&rt, "ck", t, &sync_opts()).is_err());
}

#[test]
fn indivisible_sharding_is_a_sync_error() {
    let m = mesh(&[("x", 4)], 1);
    assert!(matches!(Sharding::new(m, spec(&[Some("x")]), vec![6]), Err(Error::Indivisible { .. })));
}

#[test]
fn aggregated_layout_and_filesystem_backend() {
    let dir = tempfile::tempdir().unwrap();
    for (i, storage) in
        [Storage::filesystem(dir.path()).unwrap(), Storage::filesystem_with_indicator(dir.path()).unwrap()].into_iter().enumerate()
    {
        let rt = runtime(&storage, 2, Mode::MultiController);
        let path = format!("run/ck{i}");
        let st = sample(2);
        save_tree(&rt, &path, st.clone(), &SaveOptions { layout: Layout::Aggregated, ..sync_opts() }).unwrap();
        let back = load::load(&rt, &path, None, &LoadOptions::default()).unwrap();
        assert!(arrays_equal(&back.tree, &st.tree));
        assert!(dir.path().join(&path).join("process_1/manifest.json").exists());
        assert_eq!(dir.path().join(&path).join("COMMIT").exists(), i == 1);
    }
}

#[test]
fn zero_sized_and_rank0_arrays() {
    let s = Storage::memory();
    let rt = runtime(&s, 2, Mode::MultiController);
    let m = mesh(&[("x", 2)], 1);
    let st = ShardedTree::new(
        Tree::new(Node::mapping([
            ("empty", Node::leaf(DenseArray::zeros(vec![0, 4], DType::F32))),
            ("r0", Node::leaf(DenseArray::from_slice(vec![], &[9i32]).unwrap())),
            ("nothing", Node::mapping::<&str>([])),
            ("seq", Node::sequence([Node::leaf(Scalar::new(true)), Node::leaf("t")])),
        ]))
        .unwrap(),
    )
    .with_sharding("empty", sharding(&m, &[Some("x"), None], &[0, 4]));
    save_tree(&rt, "ck", st.clone(), &sync_opts()).unwrap();
    let back = load::load(&rt, "ck", None, &LoadOptions::default()).unwrap();
    assert!(arrays_equal(&back.tree, &st.tree));
    assert_eq!(back.tree.root(), st.tree.root());
}

#[test]
fn async_load_matches_sync_load() {
    let s = Storage::memory();
    let rt = runtime(&s, 2, Mode::SingleController);
    save_tree(&rt, "ck", sample(2), &sync_opts()).unwrap();
    let a = load::load_async(&rt, "ck", None, &LoadOptions::default()).wait().unwrap().0;
    let b = load::load(&rt, "ck", None, &LoadOptions::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(s.counters().actor(Actor::Controller).payload_bytes_read, 0);
}

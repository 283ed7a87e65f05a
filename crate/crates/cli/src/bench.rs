//! Seeded synthetic save/load runs with per-strategy storage counters.
//!
//! The simulated mesh is `replica=n` x `model=P/n`, one device per process.
//! Each save strategy writes its own checkpoint; each load strategy reads
//! the first one back and compares it bit-for-bit with the input.

use std::collections::BTreeMap;
use std::time::Instant;

use ckpt_core::chunkstore::Layout;
use ckpt_core::coordination::Runtime;
use ckpt_core::load::{load_item, LoadOptions};
use ckpt_core::save::{save_tree, SaveOptions};
use ckpt_core::sharding::{Mesh, PartitionSpec, Sharding};
use ckpt_core::storage::{Actor, CounterSnapshot, Counters, Storage};
use ckpt_core::tree::{abstract_of, DType, DenseArray, Leaf, Node, ShardedTree, Tree};
use ckpt_core::Error;
use clap::{Args, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::util::{add_counters, fmt_shape, table, SubchunkTarget};
use crate::{runtime, GlobalArgs, Outcome, EXIT_FAILURE, EXIT_OK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaveStrategy {
    SingleSlice,
    ReplicaParallel,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoadStrategy {
    Direct,
    Broadcast,
    Both,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// JSON list of `{path, shape, dtype, partition}`; a small built-in model if omitted.
    #[arg(long)]
    pub model_spec: Option<std::path::PathBuf>,
    /// Model replicas (data-parallel groups); must divide the process count.
    #[arg(long, default_value_t = 1)]
    pub replicas: usize,
    #[arg(long, value_enum, default_value = "both")]
    pub strategy: SaveStrategy,
    #[arg(long, value_enum, default_value = "both")]
    pub load_strategy: LoadStrategy,
    /// `per-leaf` or `aggregated`.
    #[arg(long, default_value = "per-leaf")]
    pub layout: Layout,
    /// Read-subchunk size target in bytes, or `off`.
    #[arg(long, default_value_t = SubchunkTarget::default())]
    pub subchunk_target_bytes: SubchunkTarget,
    /// Scratch prefix for the benchmark checkpoints.
    #[arg(long, default_value = "ckpt-bench")]
    pub path: String,
    /// Leave the benchmark checkpoints in place.
    #[arg(long)]
    pub keep: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLeaf {
    pub path: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Mesh axis per dimension (`replica` or `model`), `null` for none.
    #[serde(default)]
    pub partition: Vec<Option<String>>,
}

fn builtin_model(model: usize) -> Vec<ModelLeaf> {
    let leaf = |path: &str, shape: &[usize], partition: &[Option<&str>]| ModelLeaf {
        path: path.into(),
        shape: shape.to_vec(),
        dtype: DType::F32,
        partition: partition.iter().map(|p| p.map(str::to_string)).collect(),
    };
    let h = 64 * model;
    let mut out = vec![leaf("embed", &[256, h], &[None, Some("model")])];
    for l in 0..2 {
        out.push(leaf(&format!("layers/{l}/attn/qkv"), &[h, 3 * h], &[None, Some("model")]));
        out.push(leaf(&format!("layers/{l}/attn/out"), &[h, h], &[Some("model"), None]));
        out.push(leaf(&format!("layers/{l}/mlp/up"), &[h, 4 * h], &[None, Some("model")]));
        out.push(leaf(&format!("layers/{l}/mlp/down"), &[4 * h, h], &[Some("model"), None]));
        out.push(leaf(&format!("layers/{l}/norm"), &[h], &[None]));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    pub processes: usize,
    pub replicas: usize,
    pub mode: String,
    pub seed: u64,
    pub layout: String,
    pub subchunk_target_bytes: Option<u64>,
    pub leaves: usize,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Phase {
    pub name: String,
    pub wall_ms: f64,
    pub counters: CounterSnapshot,
}

#[derive(Debug, Clone, Serialize)]
pub struct SaveRun {
    pub strategy: SaveStrategy,
    pub wall_ms: f64,
    pub payload_bytes_written: u64,
    pub per_process_payload_written: Vec<u64>,
    pub max_process_payload_written: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LoadRun {
    pub strategy: LoadStrategy,
    pub wall_ms: f64,
    pub payload_bytes_read: u64,
    pub per_process_payload_read: Vec<u64>,
    pub bit_identical: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub saves: Vec<SaveRun>,
    pub loads: Vec<LoadRun>,
    /// max per-process payload written, replica-parallel / single-slice.
    pub replica_parallel_max_ratio: Option<f64>,
    /// payload bytes read, broadcast / direct.
    pub broadcast_read_ratio: Option<f64>,
    pub phases: Vec<Phase>,
    /// Sum over phases; equals the backend's counters for the whole run.
    pub totals: Counters,
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Result<DenseArray, Error> {
    let n: usize = shape.iter().product();
    let bytes: Vec<u8> = match dtype {
        DType::F32 => (0..n).flat_map(|_| rng.gen_range(-1.0f32..1.0).to_le_bytes()).collect(),
        DType::F64 => (0..n).flat_map(|_| rng.gen_range(-1.0f64..1.0).to_le_bytes()).collect(),
        DType::Bool => (0..n).map(|_| rng.gen_range(0..2u8)).collect(),
        _ => (0..n * dtype.width()).map(|_| rng.gen()).collect(),
    };
    DenseArray::from_bytes(shape.to_vec(), dtype, bytes)
}

fn build_tree(spec: &[ModelLeaf], mesh: &Mesh, seed: u64) -> Result<ShardedTree, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut leaves = vec![];
    let mut shardings = BTreeMap::new();
    for l in spec {
        leaves.push((l.path.clone(), random_array(&mut rng, &l.shape, l.dtype)?));
        let partition = if l.partition.is_empty() { vec![None; l.shape.len()] } else { l.partition.clone() };
        shardings.insert(l.path.clone(), Sharding::new(mesh.clone(), PartitionSpec::new(partition), l.shape.clone())?);
    }
    let mut root = Node::mapping::<String>([]);
    for (path, a) in leaves {
        insert(&mut root, &path, a)?;
    }
    Ok(ShardedTree { tree: Tree::new(root)?, shardings })
}

fn insert(node: &mut Node<Leaf>, path: &str, a: DenseArray) -> Result<(), Error> {
    let Node::Mapping(m) = node else {
        return Err(Error::InvalidOption(format!("model spec path {path} nests under a leaf")));
    };
    match path.split_once('/') {
        None => {
            if m.insert(path.to_string(), Node::Leaf(Leaf::Array(a))).is_some() {
                return Err(Error::InvalidOption(format!("model spec lists {path} twice")));
            }
            Ok(())
        }
        Some((head, rest)) => insert(m.entry(head.to_string()).or_insert_with(|| Node::mapping::<String>([])), rest, a),
    }
}

fn per_process(c: &CounterSnapshot, processes: usize, f: impl Fn(&Counters) -> u64) -> Vec<u64> {
    (0..processes).map(|p| f(&c.actor(Actor::Process(p)))).collect()
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn bench(g: &GlobalArgs, storage: &Storage, a: &BenchArgs) -> Result<BenchReport, Error> {
    let processes = g.processes.unwrap_or(1);
    if a.replicas == 0 || !processes.is_multiple_of(a.replicas) {
        return Err(Error::InvalidOption(format!("{} replicas do not divide {processes} processes", a.replicas)));
    }
    let model = processes / a.replicas;
    let spec = match &a.model_spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::InvalidOption(format!("model spec {}: {e}", p.display())))?;
            serde_json::from_str::<Vec<ModelLeaf>>(&text).map_err(|e| Error::InvalidOption(format!("model spec {}: {e}", p.display())))?
        }
        None => builtin_model(model),
    };
    let mesh = Mesh::new(vec![("replica".into(), a.replicas), ("model".into(), model)], 1)?.with_replica_axis("replica")?;
    let seed = g.seed.unwrap_or(0);
    let input = build_tree(&spec, &mesh, seed)?;
    let target = abstract_of(&input.tree, &input.shardings)?;
    let rt: Runtime = runtime(g, storage, processes)?;

    let config = BenchConfig {
        processes,
        replicas: a.replicas,
        mode: rt.mode().to_string(),
        seed,
        layout: a.layout.to_string(),
        subchunk_target_bytes: a.subchunk_target_bytes.0,
        leaves: spec.len(),
        total_bytes: spec.iter().map(|l| (l.shape.iter().product::<usize>() * l.dtype.width()) as u64).sum(),
    };
    let start = storage.counters();
    let mut phases = vec![];
    let mut mark = start.clone();
    let mut phase = |name: String, t: Instant| {
        let now = storage.counters();
        let p = Phase { name, wall_ms: ms(t), counters: now.since(&mark) };
        mark = now;
        phases.push(p.clone());
        p
    };

    let save_strategies = match a.strategy {
        SaveStrategy::Both => vec![SaveStrategy::SingleSlice, SaveStrategy::ReplicaParallel],
        s => vec![s],
    };
    let mut saves = vec![];
    let mut first_path = None;
    let run_result = (|| {
        for s in save_strategies {
            let path = format!("{}/{}", a.path.trim_end_matches('/'), serde_json::to_value(s).unwrap().as_str().unwrap());
            let opts = SaveOptions {
                layout: a.layout,
                subchunk_target_bytes: a.subchunk_target_bytes.0,
                replica_parallel: s == SaveStrategy::ReplicaParallel,
                ..SaveOptions::sync()
            };
            let t = Instant::now();
            save_tree(&rt, &path, input.clone(), &opts)?;
            let p = phase(format!("save:{}", serde_json::to_value(s).unwrap().as_str().unwrap()), t);
            let per = per_process(&p.counters, processes, |c| c.payload_bytes_written);
            saves.push(SaveRun {
                strategy: s,
                wall_ms: p.wall_ms,
                payload_bytes_written: p.counters.total.payload_bytes_written,
                max_process_payload_written: per.iter().copied().max().unwrap_or(0),
                per_process_payload_written: per,
            });
            first_path.get_or_insert(path);
        }
        Ok::<_, Error>(())
    })();

    let mut loads = vec![];
    let load_result = run_result.and_then(|()| {
        let path = first_path.clone().expect("at least one save");
        let strategies = match a.load_strategy {
            LoadStrategy::Both => vec![LoadStrategy::Direct, LoadStrategy::Broadcast],
            s => vec![s],
        };
        for s in strategies {
            let opts = LoadOptions { broadcast: s == LoadStrategy::Broadcast, ..LoadOptions::default() };
            let t = Instant::now();
            let (out, _) = load_item(&rt, &path, None, Some(&target), &opts)?;
            let p = phase(format!("load:{}", serde_json::to_value(s).unwrap().as_str().unwrap()), t);
            let bit_identical = out.tree.flatten().iter().zip(input.tree.flatten()).all(|((pa, la), (pb, lb))| {
                pa == &pb
                    && match (la, lb) {
                        (Leaf::Array(x), Leaf::Array(y)) => x.bytes() == y.bytes() && x.shape() == y.shape(),
                        _ => la == &lb,
                    }
            });
            loads.push(LoadRun {
                strategy: s,
                wall_ms: p.wall_ms,
                payload_bytes_read: p.counters.total.payload_bytes_read,
                per_process_payload_read: per_process(&p.counters, processes, |c| c.payload_bytes_read),
                bit_identical,
            });
        }
        Ok::<_, Error>(())
    });

    if !a.keep {
        let t = Instant::now();
        let cleanup = rt.as_coordinator(|| storage.delete_prefix(a.path.trim_end_matches('/')));
        phase("cleanup".into(), t);
        cleanup?;
    }
    load_result?;

    let mut totals = Counters::default();
    for p in &phases {
        add_counters(&mut totals, &p.counters.total);
    }
    let find_save = |s| saves.iter().find(|r: &&SaveRun| r.strategy == s).map(|r| r.max_process_payload_written as f64);
    let find_load = |s| loads.iter().find(|r: &&LoadRun| r.strategy == s).map(|r| r.payload_bytes_read as f64);
    let ratio = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) if y > 0.0 => Some(x / y),
        _ => None,
    };
    Ok(BenchReport {
        replica_parallel_max_ratio: ratio(find_save(SaveStrategy::ReplicaParallel), find_save(SaveStrategy::SingleSlice)),
        broadcast_read_ratio: ratio(find_load(LoadStrategy::Broadcast), find_load(LoadStrategy::Direct)),
        config,
        saves,
        loads,
        phases,
        totals,
    })
}

pub fn run(g: &GlobalArgs, storage: &Storage, a: &BenchArgs) -> Result<Outcome, Error> {
    let r = bench(g, storage, a)?;
    let c = &r.config;
    let mut text = format!(
        "{} processes, {} replicas, {}, seed {}, {} leaves, {} bytes\n\n",
        c.processes, c.replicas, c.mode, c.seed, c.leaves, c.total_bytes
    );
    let name = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
    let save_rows: Vec<Vec<String>> = r
        .saves
        .iter()
        .map(|s| {
            vec![
                name(serde_json::to_value(s.strategy).unwrap()),
                format!("{:.1}", s.wall_ms),
                s.payload_bytes_written.to_string(),
                s.max_process_payload_written.to_string(),
                fmt_shape(&s.per_process_payload_written.iter().map(|&b| b as usize).collect::<Vec<_>>()),
            ]
        })
        .collect();
    text += &table(&["save", "wall_ms", "payload_written", "max_per_process", "per_process"], &save_rows);
    text += "\n";
    let load_rows: Vec<Vec<String>> = r
        .loads
        .iter()
        .map(|l| {
            vec![
                name(serde_json::to_value(l.strategy).unwrap()),
                format!("{:.1}", l.wall_ms),
                l.payload_bytes_read.to_string(),
                l.bit_identical.to_string(),
            ]
        })
        .collect();
    text += &table(&["load", "wall_ms", "payload_read", "bit_identical"], &load_rows);
    if let Some(x) = r.replica_parallel_max_ratio {
        text += &format!("\nreplica-parallel / single-slice max per-process write: {x:.4}\n");
    }
    if let Some(x) = r.broadcast_read_ratio {
        text += &format!("broadcast / direct payload read: {x:.4}\n");
    }
    text +=
        &format!("totals: {} bytes read, {} bytes written, {} ops\n", r.totals.bytes_read, r.totals.bytes_written, r.totals.total_ops());
    let code = if r.loads.iter().all(|l| l.bit_identical) { EXIT_OK } else { EXIT_FAILURE };
    Ok(Outcome::new(&r, text, code))
}

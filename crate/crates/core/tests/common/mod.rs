#![allow(dead_code)]

use std::collections::BTreeMap;
use std::time::Duration;

use ckpt_core::coordination::{Mode, Runtime, RuntimeConfig};
use ckpt_core::sharding::{Mesh, PartitionSpec, Sharding};
use ckpt_core::storage::Storage;
use ckpt_core::tree::{CheckpointTree, DType, DenseArray, Leaf, Node, Scalar, ShardedTree, Tree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn runtime(storage: &Storage, processes: usize, mode: Mode) -> Runtime {
    Runtime::new(storage.clone(), RuntimeConfig::new(processes, mode).with_timeout(Duration::from_secs(10))).unwrap()
}

pub fn mesh(axes: &[(&str, usize)], devices_per_process: usize) -> Mesh {
    Mesh::new(axes.iter().map(|(n, s)| (n.to_string(), *s)).collect(), devices_per_process).unwrap()
}

pub fn spec(dims: &[Option<&str>]) -> PartitionSpec {
    PartitionSpec::new(dims.iter().map(|d| d.map(str::to_string)).collect())
}

pub fn sharding(mesh: &Mesh, dims: &[Option<&str>], shape: &[usize]) -> Sharding {
    Sharding::new(mesh.clone(), spec(dims), shape.to_vec()).unwrap()
}

pub fn arange(shape: &[usize], dtype: DType) -> DenseArray {
    let n: usize = shape.iter().product();
    match dtype {
        DType::F32 => DenseArray::from_slice(shape.to_vec(), &(0..n).map(|i| i as f32 * 0.5).collect::<Vec<_>>()),
        DType::F64 => DenseArray::from_slice(shape.to_vec(), &(0..n).map(|i| i as f64 * 0.25).collect::<Vec<_>>()),
        DType::I32 => DenseArray::from_slice(shape.to_vec(), &(0..n).map(|i| i as i32 - 7).collect::<Vec<_>>()),
        DType::I64 => DenseArray::from_slice(shape.to_vec(), &(0..n).map(|i| i as i64 * 3).collect::<Vec<_>>()),
        DType::U8 => DenseArray::from_slice(shape.to_vec(), &(0..n).map(|i| i as u8).collect::<Vec<_>>()),
        DType::Bool => DenseArray::from_slice(shape.to_vec(), &(0..n).map(|i| i % 3 == 0).collect::<Vec<_>>()),
    }
    .unwrap()
}

pub fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> DenseArray {
    let n: usize = shape.iter().product();
    let bytes: Vec<u8> = match dtype {
        DType::Bool => (0..n).map(|_| rng.gen_range(0..2u8)).collect(),
        DType::F32 => (0..n).flat_map(|_| (rng.gen_range(-1e3..1e3f32)).to_le_bytes()).collect(),
        DType::F64 => (0..n).flat_map(|_| (rng.gen_range(-1e6..1e6f64)).to_le_bytes()).collect(),
        _ => (0..n * dtype.width()).map(|_| rng.gen()).collect(),
    };
    DenseArray::from_bytes(shape.to_vec(), dtype, bytes).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Model-like tree sharded over `x` (one device per process), plus host
/// values: `params/{w,b}`, `opt/{m,step}`, `meta/name`.
pub fn sample(processes: usize) -> ShardedTree {
    let m = mesh(&[("x", processes)], 1);
    let w = arange(&[8 * processes, 6], DType::F32);
    let b = arange(&[4 * processes], DType::I64);
    let mom = arange(&[2 * processes, 3], DType::F64);
    let tree = Tree::new(Node::mapping([
        ("params", Node::mapping([("w", Node::leaf(w)), ("b", Node::leaf(b))])),
        ("opt", Node::mapping([("m", Node::leaf(mom)), ("step", Node::leaf(Scalar::new(42i64)))])),
        ("meta", Node::mapping([("name", Node::leaf("run-a"))])),
    ]))
    .unwrap();
    ShardedTree::new(tree)
        .with_sharding("params/w", sharding(&m, &[Some("x"), None], &[8 * processes, 6]))
        .with_sharding("params/b", sharding(&m, &[Some("x")], &[4 * processes]))
        .with_sharding("opt/m", Sharding::replicated(m.clone(), vec![2 * processes, 3]))
}

pub fn single(name: &str, tree: impl Into<ckpt_core::tree::Checkpointable>) -> ckpt_core::tree::Checkpointables {
    BTreeMap::from([(name.to_string(), tree.into())])
}

pub fn arrays_equal(a: &CheckpointTree, b: &CheckpointTree) -> bool {
    a.same_structure(b) && a.flatten().iter().zip(b.flatten().iter()).all(|((pa, la), (pb, lb))| pa == pb && leaf_eq(la, lb))
}

/// Bitwise leaf equality (NaN-safe).
pub fn leaf_eq(a: &Leaf, b: &Leaf) -> bool {
    match (a, b) {
        (Leaf::Array(x), Leaf::Array(y)) => x.shape() == y.shape() && x.dtype() == y.dtype() && x.bytes() == y.bytes(),
        _ => a == b,
    }
}

pub fn fixture_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/safetensors")
}

pub fn fixture(name: &str) -> Vec<u8> {
    std::fs::read(fixture_dir().join(name)).unwrap()
}

/// Expected arrays per valid fixture, decoded from `expected.json`.
pub fn expected_safetensors() -> BTreeMap<String, BTreeMap<String, DenseArray>> {
    let doc: serde_json::Value = serde_json::from_slice(&fixture("expected.json")).unwrap();
    let mut out = BTreeMap::new();
    for (file, tensors) in doc.as_object().unwrap() {
        let mut arrays = BTreeMap::new();
        for (name, t) in tensors.as_object().unwrap() {
            let shape: Vec<usize> = serde_json::from_value(t["shape"].clone()).unwrap();
            let values = t["values"].as_array().unwrap();
            let (dtype, bytes): (DType, Vec<u8>) = match t["dtype"].as_str().unwrap() {
                "F32" => (DType::F32, values.iter().flat_map(|v| (v.as_u64().unwrap() as u32).to_le_bytes()).collect()),
                "F64" => (DType::F64, values.iter().flat_map(|v| v.as_u64().unwrap().to_le_bytes()).collect()),
                "I32" => (DType::I32, values.iter().flat_map(|v| (v.as_i64().unwrap() as i32).to_le_bytes()).collect()),
                "I64" => (DType::I64, values.iter().flat_map(|v| v.as_i64().unwrap().to_le_bytes()).collect()),
                "U8" => (DType::U8, values.iter().map(|v| v.as_u64().unwrap() as u8).collect()),
                "BOOL" => (DType::Bool, values.iter().map(|v| v.as_bool().unwrap() as u8).collect()),
                other => panic!("fixture dtype {other}"),
            };
            arrays.insert(name.clone(), DenseArray::from_bytes(shape, dtype, bytes).unwrap());
        }
        out.insert(file.clone(), arrays);
    }
    out
}

pub const CORRUPT_FIXTURES: [&str; 4] = ["truncated", "header_len", "overlap", "header_json"];

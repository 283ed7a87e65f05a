//! Read-only safetensors support.
//!
//! Container: an 8-byte little-endian header length `N`, `N` bytes of JSON
//! mapping tensor names to `{dtype, shape, data_offsets: [begin, end]}`
//! (offsets relative to the data section), then the packed row-major data.
//! The optional `__metadata__` entry is ignored.

use std::collections::BTreeMap;

use serde::Deserialize;
use serde_json::Value;

use super::LoadMode;
use crate::error::{Error, Result};
use crate::storage::Storage;
use crate::tree::{cast_leaf, path_difference, AbstractTree, CheckpointTree, DType, DenseArray, Leaf, Node, Tree};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

fn dtype_of(name: &str) -> Result<DType> {
    Ok(match name {
        "F32" => DType::F32,
        "F64" => DType::F64,
        "I32" => DType::I32,
        "I64" => DType::I64,
        "U8" => DType::U8,
        "BOOL" => DType::Bool,
        other => return Err(Error::Safetensors(format!("unsupported dtype {other}"))),
    })
}

/// Parses a complete safetensors file into named arrays.
pub fn parse(bytes: &[u8]) -> Result<BTreeMap<String, DenseArray>> {
    let err = |m: String| Error::Safetensors(m);
    if bytes.len() < 8 {
        return Err(err(format!("file of {} bytes has no header length", bytes.len())));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let header_end = 8u64
        .checked_add(n)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| err(format!("header length {n} exceeds file size {}", bytes.len())))? as usize;
    let header: BTreeMap<String, Value> =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| err(format!("header is not a JSON object: {e}")))?;
    let data = &bytes[header_end..];
    let mut spans = Vec::new();
    let mut out = BTreeMap::new();
    for (name, v) in header {
        if name == "__metadata__" {
            continue;
        }
        if name.is_empty() || name.contains('/') {
            return Err(err(format!("tensor name {name:?} cannot be used as a tree key")));
        }
        let info: TensorInfo = serde_json::from_value(v).map_err(|e| err(format!("{name}: {e}")))?;
        let dtype = dtype_of(&info.dtype)?;
        let [begin, end] = info.data_offsets;
        let expected = info.shape.iter().try_fold(dtype.width() as u64, |acc, &d| acc.checked_mul(d as u64));
        if end < begin || Some(end - begin) != expected {
            return Err(err(format!("{name}: offsets [{begin}, {end}) do not match shape {:?} of {}", info.shape, info.dtype)));
        }
        if end > data.len() as u64 {
            return Err(err(format!("{name}: data ends at {end} but the data section has {} bytes", data.len())));
        }
        spans.push((begin, end, name.clone()));
        let array = DenseArray::from_bytes(info.shape, dtype, data[begin as usize..end as usize].to_vec())?;
        out.insert(name, array);
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[0].1 > w[1].0 {
            return Err(err(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
        }
    }
    Ok(out)
}

/// Loads the safetensors object at `key` as a flat mapping tree.
pub fn load_safetensors(storage: &Storage, key: &str, abstract_tree: Option<&AbstractTree>, mode: LoadMode) -> Result<CheckpointTree> {
    let arrays = parse(&storage.get(key)?)?;
    let tree = Tree::new(Node::Mapping(arrays.into_iter().map(|(k, a)| (k, Node::Leaf(Leaf::Array(a)))).collect()))?;
    let Some(target) = abstract_tree else { return Ok(tree) };
    let (only_file, only_requested) = path_difference(&tree, target);
    if mode == LoadMode::Strict && (!only_file.is_empty() || !only_requested.is_empty()) {
        return Err(Error::StructureMismatch { missing: only_requested, extra: only_file });
    }
    target.try_map_leaves(|path, want| match tree.get(path) {
        Some(leaf) if !want.placeholder => cast_leaf(leaf, want).map_err(|e| match e {
            Error::Cast { reason, .. } => Error::Cast { path: path.to_string(), reason },
            other => other,
        }),
        _ => {
            let mut t = want.clone();
            t.placeholder = true;
            Ok(Leaf::Placeholder(t))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn one_f32_tensor() {
        let mut data = 1.0f32.to_le_bytes().to_vec();
        data.extend_from_slice(&2.0f32.to_le_bytes());
        let f = file(r#"{"t":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"__metadata__":{"a":"b"}}"#, &data);
        let out = parse(&f).unwrap();
        assert_eq!(out["t"].to_vec::<f32>(), vec![1.0, 2.0]);
    }

    #[test]
    fn empty_header() {
        assert!(parse(&file("{}", &[])).unwrap().is_empty());
    }

    #[test]
    fn rejects_malformed() {
        let cases = [
            file(r#"{"t":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#, &[0; 4]),
            file(r#"{"a":{"dtype":"U8","shape":[4],"data_offsets":[0,4]},"b":{"dtype":"U8","shape":[4],"data_offsets":[2,6]}}"#, &[0; 6]),
            file(r#"{"t":{"dtype":"F16","shape":[1],"data_offsets":[0,2]}}"#, &[0; 2]),
            file(r#"{"t":{"dtype":"U8","shape":[3],"data_offsets":[0,2]}}"#, &[0; 3]),
            file("[1,2]", &[]),
            vec![1, 2, 3],
        ];
        for c in cases {
            assert!(matches!(parse(&c), Err(Error::Safetensors(_))));
        }
        let mut long = file("{}", &[]);
        long[0] = 200;
        assert!(matches!(parse(&long), Err(Error::Safetensors(_))));
    }
}

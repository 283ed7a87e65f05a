//! Load-time leaf conversion: numeric dtype casts and rank-0 array <-> scalar.
//!
//! Narrowing float casts round to nearest, ties to even. Integer narrowing is
//! checked and fails on overflow. Float to integer requires an integral value.

use super::dtype::DType;
use super::leaf::{AbstractLeaf, DenseArray, Leaf, LeafKind, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
enum Value {
    Float(f64),
    Int(i128),
    Bool(bool),
}

fn decode(dtype: DType, b: &[u8]) -> Value {
    match dtype {
        DType::F32 => Value::Float(f32::from_le_bytes(b.try_into().unwrap()) as f64),
        DType::F64 => Value::Float(f64::from_le_bytes(b.try_into().unwrap())),
        DType::I32 => Value::Int(i32::from_le_bytes(b.try_into().unwrap()) as i128),
        DType::I64 => Value::Int(i64::from_le_bytes(b.try_into().unwrap()) as i128),
        DType::U8 => Value::Int(b[0] as i128),
        DType::Bool => Value::Bool(b[0] != 0),
    }
}

fn overflow(v: impl ToString, target: DType) -> Error {
    Error::CastOverflow { value: v.to_string(), target: target.to_string() }
}

fn to_int(v: Value, target: DType) -> Result<i128> {
    match v {
        Value::Int(i) => Ok(i),
        Value::Bool(b) => Ok(b as i128),
        Value::Float(x) => {
            if !x.is_finite() || x.fract() != 0.0 {
                return Err(Error::Cast { path: String::new(), reason: format!("{x} is not an integral {target} value") });
            }
            if x.abs() > 1e30 {
                return Err(overflow(x, target));
            }
            Ok(x as i128)
        }
    }
}

fn encode(v: Value, target: DType, out: &mut Vec<u8>) -> Result<()> {
    match target {
        DType::F32 => {
            let x = match v {
                Value::Float(x) => x as f32,
                Value::Int(i) => i as f32,
                Value::Bool(b) => b as u8 as f32,
            };
            out.extend_from_slice(&x.to_le_bytes());
        }
        DType::F64 => {
            let x = match v {
                Value::Float(x) => x,
                Value::Int(i) => i as f64,
                Value::Bool(b) => b as u8 as f64,
            };
            out.extend_from_slice(&x.to_le_bytes());
        }
        DType::I32 => {
            let i = to_int(v, target)?;
            let x = i32::try_from(i).map_err(|_| overflow(i, target))?;
            out.extend_from_slice(&x.to_le_bytes());
        }
        DType::I64 => {
            let i = to_int(v, target)?;
            let x = i64::try_from(i).map_err(|_| overflow(i, target))?;
            out.extend_from_slice(&x.to_le_bytes());
        }
        DType::U8 => {
            let i = to_int(v, target)?;
            out.push(u8::try_from(i).map_err(|_| overflow(i, target))?);
        }
        DType::Bool => {
            let b = match v {
                Value::Bool(b) => b,
                Value::Int(0) => false,
                Value::Int(1) => true,
                Value::Float(0.0) => false,
                Value::Float(1.0) => true,
                Value::Int(i) => return Err(overflow(i, target)),
                Value::Float(x) => return Err(overflow(x, target)),
            };
            out.push(b as u8);
        }
    }
    Ok(())
}

/// Converts a little-endian buffer of `from` elements into `to` elements.
pub fn cast_bytes(bytes: &[u8], from: DType, to: DType) -> Result<Vec<u8>> {
    if from == to {
        return Ok(bytes.to_vec());
    }
    let mut out = Vec::with_capacity(bytes.len() / from.width() * to.width());
    for elem in bytes.chunks_exact(from.width()) {
        encode(decode(from, elem), to, &mut out)?;
    }
    Ok(out)
}

fn cast_array(array: &DenseArray, dtype: Option<DType>) -> Result<DenseArray> {
    match dtype {
        Some(d) if d != array.dtype() => DenseArray::from_bytes(array.shape().to_vec(), d, cast_bytes(array.bytes(), array.dtype(), d)?),
        _ => Ok(array.clone()),
    }
}

fn shape_error(found: &[usize], target: &[usize]) -> Error {
    Error::Cast { path: String::new(), reason: format!("shape {found:?} does not match requested {target:?}") }
}

/// Converts `leaf` so it satisfies `target`.
pub fn cast_leaf(leaf: &Leaf, target: &AbstractLeaf) -> Result<Leaf> {
    match (leaf, target.kind) {
        (Leaf::Placeholder(_), _) => Err(Error::Cast { path: String::new(), reason: "cannot cast a placeholder".into() }),
        (Leaf::Text(s), LeafKind::Text) => Ok(Leaf::Text(s.clone())),
        (Leaf::Text(_), _) | (_, LeafKind::Text) => {
            Err(Error::Cast { path: String::new(), reason: format!("cannot convert {:?} leaf to {:?}", leaf.kind(), target.kind) })
        }
        (Leaf::Array(a), LeafKind::Array) => {
            if let Some(shape) = &target.shape {
                if shape.as_slice() != a.shape() {
                    return Err(shape_error(a.shape(), shape));
                }
            }
            Ok(Leaf::Array(cast_array(a, target.dtype)?))
        }
        (Leaf::Array(a), LeafKind::Scalar) => {
            if !a.shape().is_empty() {
                return Err(shape_error(a.shape(), &[]));
            }
            Ok(Leaf::Scalar(Scalar::from_array(&cast_array(a, target.dtype)?)?))
        }
        (Leaf::Scalar(s), LeafKind::Array) => {
            if let Some(shape) = &target.shape {
                if !shape.is_empty() {
                    return Err(shape_error(&[], shape));
                }
            }
            Ok(Leaf::Array(cast_array(&s.to_array(), target.dtype)?))
        }
        (Leaf::Scalar(s), LeafKind::Scalar) => Ok(Leaf::Scalar(Scalar::from_array(&cast_array(&s.to_array(), target.dtype)?)?)),
    }
}

use serde::{Deserialize, Serialize};

use super::dtype::{DType, Element};
use crate::error::{Error, Result};
use crate::sharding::Sharding;

/// Host-resident dense array: shape, dtype and a row-major little-endian buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<u8>,
}

pub fn num_elements(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl DenseArray {
    pub fn from_bytes(shape: Vec<usize>, dtype: DType, data: Vec<u8>) -> Result<Self> {
        let expected = num_elements(&shape) * dtype.width();
        if data.len() != expected {
            return Err(Error::InvalidLeaf(format!(
                "buffer of {} bytes does not match shape {:?} x {} ({} bytes)",
                data.len(),
                shape,
                dtype,
                expected
            )));
        }
        Ok(Self { shape, dtype, data })
    }

    pub fn from_slice<T: Element>(shape: Vec<usize>, values: &[T]) -> Result<Self> {
        let mut data = Vec::with_capacity(values.len() * T::DTYPE.width());
        for v in values {
            v.write_le(&mut data);
        }
        Self::from_bytes(shape, T::DTYPE, data)
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Self {
        let len = num_elements(&shape) * dtype.width();
        Self { shape, dtype, data: vec![0; len] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn bytes_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }

    pub fn len(&self) -> usize {
        num_elements(&self.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Decodes the buffer as `T`. Panics if `T` does not match the dtype.
    pub fn to_vec<T: Element>(&self) -> Vec<T> {
        assert_eq!(T::DTYPE, self.dtype, "element type mismatch");
        self.data.chunks_exact(self.dtype.width()).map(T::read_le).collect()
    }
}

/// A single host value. Equivalent to a rank-0 [`DenseArray`].
#[derive(Debug, Clone, PartialEq)]
pub struct Scalar {
    dtype: DType,
    bytes: Vec<u8>,
}

impl Scalar {
    pub fn new<T: Element>(value: T) -> Self {
        let mut bytes = Vec::with_capacity(8);
        value.write_le(&mut bytes);
        Self { dtype: T::DTYPE, bytes }
    }

    pub fn from_bytes(dtype: DType, bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() != dtype.width() {
            return Err(Error::InvalidLeaf(format!("scalar {dtype} needs {} bytes, got {}", dtype.width(), bytes.len())));
        }
        Ok(Self { dtype, bytes })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn get<T: Element>(&self) -> T {
        assert_eq!(T::DTYPE, self.dtype, "element type mismatch");
        T::read_le(&self.bytes)
    }

    pub fn to_array(&self) -> DenseArray {
        DenseArray { shape: vec![], dtype: self.dtype, data: self.bytes.clone() }
    }

    pub fn from_array(array: &DenseArray) -> Result<Self> {
        if !array.shape.is_empty() {
            return Err(Error::InvalidLeaf(format!("array of shape {:?} is not rank 0", array.shape)));
        }
        Self::from_bytes(array.dtype, array.data.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeafKind {
    Array,
    Scalar,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Leaf {
    Array(DenseArray),
    Scalar(Scalar),
    Text(String),
    /// Stands in for a value the checkpoint did not contain (partial loads only).
    Placeholder(AbstractLeaf),
}

impl Leaf {
    pub fn kind(&self) -> LeafKind {
        match self {
            Leaf::Array(_) => LeafKind::Array,
            Leaf::Scalar(_) => LeafKind::Scalar,
            Leaf::Text(_) => LeafKind::Text,
            Leaf::Placeholder(a) => a.kind,
        }
    }

    pub fn is_placeholder(&self) -> bool {
        matches!(self, Leaf::Placeholder(_))
    }

    pub fn as_array(&self) -> Option<&DenseArray> {
        match self {
            Leaf::Array(a) => Some(a),
            _ => None,
        }
    }

    pub fn dtype(&self) -> Option<DType> {
        match self {
            Leaf::Array(a) => Some(a.dtype()),
            Leaf::Scalar(s) => Some(s.dtype()),
            Leaf::Text(_) => None,
            Leaf::Placeholder(a) => a.dtype,
        }
    }

    pub fn shape(&self) -> Option<Vec<usize>> {
        match self {
            Leaf::Array(a) => Some(a.shape().to_vec()),
            Leaf::Scalar(_) => Some(vec![]),
            Leaf::Text(_) => None,
            Leaf::Placeholder(a) => a.shape.clone(),
        }
    }
}

impl From<DenseArray> for Leaf {
    fn from(a: DenseArray) -> Self {
        Leaf::Array(a)
    }
}

impl From<Scalar> for Leaf {
    fn from(s: Scalar) -> Self {
        Leaf::Scalar(s)
    }
}

impl From<&str> for Leaf {
    fn from(s: &str) -> Self {
        Leaf::Text(s.to_string())
    }
}

/// Shape/dtype/sharding description of a leaf without its data.
#[derive(Debug, Clone, PartialEq)]
pub struct AbstractLeaf {
    pub kind: LeafKind,
    pub shape: Option<Vec<usize>>,
    pub dtype: Option<DType>,
    pub sharding: Option<Sharding>,
    pub placeholder: bool,
}

impl AbstractLeaf {
    pub fn array(shape: Vec<usize>, dtype: DType) -> Self {
        Self { kind: LeafKind::Array, shape: Some(shape), dtype: Some(dtype), sharding: None, placeholder: false }
    }

    pub fn scalar(dtype: DType) -> Self {
        Self { kind: LeafKind::Scalar, shape: Some(vec![]), dtype: Some(dtype), sharding: None, placeholder: false }
    }

    pub fn text() -> Self {
        Self { kind: LeafKind::Text, shape: None, dtype: None, sharding: None, placeholder: false }
    }

    pub fn with_sharding(mut self, sharding: Sharding) -> Self {
        self.sharding = Some(sharding);
        self
    }

    pub fn of(leaf: &Leaf) -> Self {
        match leaf {
            Leaf::Array(a) => Self::array(a.shape().to_vec(), a.dtype()),
            Leaf::Scalar(s) => Self::scalar(s.dtype()),
            Leaf::Text(_) => Self::text(),
            Leaf::Placeholder(a) => a.clone(),
        }
    }
}

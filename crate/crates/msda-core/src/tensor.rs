//! Dense row-major tensors with F32/F16 storage.
//!
//! F16 is a storage-only format: every kernel in this crate widens to f32
//! before doing arithmetic and narrows (round-to-nearest-even) only when
//! writing F16 storage back out.

use half::f16;
use thiserror::Error;

/// Storage element type. Arithmetic is always performed at f32 width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    /// Size of one stored element in bytes.
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }

    /// Stable on-disk code used by the XMSD format.
    pub fn code(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F16 => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F16),
            _ => None,
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F16 => write!(f, "f16"),
        }
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor must have rank >= 1")]
    EmptyShape,
    #[error("dimension {axis} has extent 0 (every extent must be >= 1)")]
    ZeroExtent { axis: usize },
    #[error("shape {dims:?} overflows the addressable element count")]
    SizeOverflow { dims: Vec<usize> },
    #[error("data length {data_len} does not match shape {dims:?} ({expected} elements)")]
    DataMismatch {
        dims: Vec<usize>,
        expected: usize,
        data_len: usize,
    },
}

/// Flat element buffer in storage dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<f16>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F16(_) => Dtype::F16,
        }
    }
}

/// Dense row-major tensor (last dimension contiguous).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    /// Builds a tensor from a shape and a matching flat buffer.
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Tensor, TensorError> {
        let expected = checked_len(&dims)?;
        if data.len() != expected {
            return Err(TensorError::DataMismatch {
                dims,
                expected,
                data_len: data.len(),
            });
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Tensor, TensorError> {
        Tensor::new(dims, TensorData::F32(data))
    }

    pub fn from_f16(dims: Vec<usize>, data: Vec<f16>) -> Result<Tensor, TensorError> {
        Tensor::new(dims, TensorData::F16(data))
    }

    /// Zero-filled tensor of the given shape and dtype.
    pub fn zeros(dims: Vec<usize>, dtype: Dtype) -> Result<Tensor, TensorError> {
        let n = checked_len(&dims)?;
        let data = match dtype {
            Dtype::F32 => TensorData::F32(vec![0.0; n]),
            Dtype::F16 => TensorData::F16(vec![f16::ZERO; n]),
        };
        Ok(Tensor { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// Element at flat index, widened to f32 (exact for F16 storage).
    pub fn get(&self, idx: usize) -> f32 {
        match &self.data {
            TensorData::F32(v) => v[idx],
            TensorData::F16(v) => v[idx].to_f32(),
        }
    }

    /// Direct f32 slice access; panics if storage is F16.
    pub fn as_f32(&self) -> &[f32] {
        match &self.data {
            TensorData::F32(v) => v,
            TensorData::F16(_) => panic!("tensor stores f16, call to_f32_vec() instead"),
        }
    }

    pub fn as_f32_mut(&mut self) -> &mut [f32] {
        match &mut self.data {
            TensorData::F32(v) => v,
            TensorData::F16(_) => panic!("tensor stores f16, call to_f32_vec() instead"),
        }
    }

    /// The whole buffer widened to f32. Exact: binary16 -> binary32 is lossless.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
        }
    }

    /// Rebuilds the buffer from f32 values, narrowing with round-to-nearest-even
    /// when the storage dtype is F16.
    pub fn from_f32_values(
        dims: Vec<usize>,
        dtype: Dtype,
        values: &[f32],
    ) -> Result<Tensor, TensorError> {
        let data = match dtype {
            Dtype::F32 => TensorData::F32(values.to_vec()),
            Dtype::F16 => TensorData::F16(values.iter().map(|&x| f16::from_f32(x)).collect()),
        };
        Tensor::new(dims, data)
    }

    /// Raw little-endian bytes of the element buffer, in storage order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    /// Rebuilds the element buffer from little-endian bytes.
    pub fn from_le_bytes(
        dims: Vec<usize>,
        dtype: Dtype,
        bytes: &[u8],
    ) -> Result<Tensor, TensorError> {
        let n = checked_len(&dims)?;
        let expected_bytes = n * dtype.size_bytes();
        if bytes.len() != expected_bytes {
            return Err(TensorError::DataMismatch {
                dims,
                expected: expected_bytes,
                data_len: bytes.len(),
            });
        }
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            Dtype::F16 => TensorData::F16(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
        };
        Tensor::new(dims, data)
    }
}

/// Validates a shape and returns its element count.
pub fn checked_len(dims: &[usize]) -> Result<usize, TensorError> {
    if dims.is_empty() {
        return Err(TensorError::EmptyShape);
    }
    let mut n: usize = 1;
    for (axis, &d) in dims.iter().enumerate() {
        if d == 0 {
            return Err(TensorError::ZeroExtent { axis });
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| TensorError::SizeOverflow {
                dims: dims.to_vec(),
            })?;
    }
    Ok(n)
}

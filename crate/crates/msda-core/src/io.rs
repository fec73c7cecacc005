//! The XMSD binary tensor format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset 0   magic        b"XMSD"
//! offset 4   version      u32 (currently 1)
//! offset 8   dtype code   u32 (0 = f32, 1 = f16)
//! offset 12  rank         u32
//! offset 16  dims         rank × u64
//! then       payload      raw row-major element bytes
//! ```
//!
//! Round trips are bit-exact for both dtypes.

use crate::tensor::{checked_len, Dtype, Tensor};
use std::io::{Read, Write};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"XMSD";
pub const FORMAT_VERSION: u32 = 1;

/// Ranks above this are treated as corruption rather than data.
const MAX_RANK: u32 = 16;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at byte 0: expected \"XMSD\", got {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found} at byte 4")]
    BadVersion { found: u32 },
    #[error("unknown dtype code {code} at byte 8")]
    UnknownDtype { code: u32 },
    #[error("implausible rank {rank} at byte 12 (max {MAX_RANK})")]
    BadRank { rank: u32 },
    #[error("invalid shape {dims:?} read from header: {reason}")]
    BadShape { dims: Vec<u64>, reason: String },
    #[error("truncated input at byte offset {offset}: {context}")]
    Truncated { offset: u64, context: &'static str },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serializes a tensor into `sink`. The encoding is bit-exact and
/// platform-independent.
pub fn write_tensor<W: Write>(t: &Tensor, sink: &mut W) -> Result<(), FormatError> {
    sink.write_all(&MAGIC)?;
    sink.write_all(&FORMAT_VERSION.to_le_bytes())?;
    sink.write_all(&t.dtype().code().to_le_bytes())?;
    sink.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.dims() {
        sink.write_all(&(d as u64).to_le_bytes())?;
    }
    sink.write_all(&t.to_le_bytes())?;
    Ok(())
}

/// Deserializes a tensor written by [`write_tensor`]. Errors carry the byte
/// offset at which the input stopped making sense.
pub fn read_tensor<R: Read>(source: &mut R) -> Result<Tensor, FormatError> {
    let mut magic = [0u8; 4];
    read_exact_at(source, &mut magic, 0, "magic")?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic { found: magic });
    }
    let version = read_u32_at(source, 4, "format version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::BadVersion { found: version });
    }
    let code = read_u32_at(source, 8, "dtype code")?;
    let dtype = Dtype::from_code(code).ok_or(FormatError::UnknownDtype { code })?;
    let rank = read_u32_at(source, 12, "rank")?;
    if rank == 0 || rank > MAX_RANK {
        return Err(FormatError::BadRank { rank });
    }

    let mut dims64 = Vec::with_capacity(rank as usize);
    for i in 0..rank {
        let mut buf = [0u8; 8];
        read_exact_at(source, &mut buf, 16 + 8 * i as u64, "dims")?;
        dims64.push(u64::from_le_bytes(buf));
    }
    let dims: Vec<usize> = dims64.iter().map(|&d| d as usize).collect();
    let count = checked_len(&dims).map_err(|e| FormatError::BadShape {
        dims: dims64.clone(),
        reason: e.to_string(),
    })?;

    let payload_offset = 16 + 8 * rank as u64;
    let payload_len = count
        .checked_mul(dtype.size_bytes())
        .ok_or_else(|| FormatError::BadShape {
            dims: dims64.clone(),
            reason: "payload size overflows".into(),
        })?;
    let mut payload = vec![0u8; payload_len];
    read_exact_at(source, &mut payload, payload_offset, "payload")?;

    Tensor::from_le_bytes(dims, dtype, &payload).map_err(|e| FormatError::BadShape {
        dims: dims64,
        reason: e.to_string(),
    })
}

pub fn write_tensor_file(t: &Tensor, path: &std::path::Path) -> Result<(), FormatError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(t, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: &std::path::Path) -> Result<Tensor, FormatError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}

fn read_exact_at<R: Read>(
    source: &mut R,
    buf: &mut [u8],
    offset: u64,
    context: &'static str,
) -> Result<(), FormatError> {
    let mut filled = 0usize;
    while filled < buf.len() {
        let n = source.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(FormatError::Truncated {
                offset: offset + filled as u64,
                context,
            });
        }
        filled += n;
    }
    Ok(())
}

fn read_u32_at<R: Read>(
    source: &mut R,
    offset: u64,
    context: &'static str,
) -> Result<u32, FormatError> {
    let mut buf = [0u8; 4];
    read_exact_at(source, &mut buf, offset, context)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorData;
    use half::f16;

    fn encode(t: &Tensor) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tensor(t, &mut buf).unwrap();
        buf
    }

    #[test]
    fn header_layout_for_rank_one_f32() {
        let t = Tensor::from_f32(vec![2], vec![1.0, 2.0]).unwrap();
        let bytes = encode(&t);
        // magic(4) + version(4) + dtype(4) + rank(4) + one u64 dim(8) = 24 header
        // bytes, then 2 × 4 payload bytes.
        assert_eq!(bytes.len(), 24 + 8);
        assert_eq!(&bytes[0..4], b"XMSD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 0);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
    }

    #[test]
    fn zero_dim_read_is_a_size_error() {
        let t = Tensor::from_f32(vec![1], vec![0.0]).unwrap();
        let mut bytes = encode(&t);
        bytes[16..24].copy_from_slice(&0u64.to_le_bytes());
        let err = read_tensor(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, FormatError::BadShape { .. }), "{err}");
    }

    #[test]
    fn f16_round_trip_is_bit_exact() {
        let vals: Vec<f16> = (0..12).map(|i| f16::from_f32(0.37 * i as f32 - 2.0)).collect();
        let t = Tensor::from_f16(vec![3, 4], vals).unwrap();
        let back = read_tensor(&mut encode(&t).as_slice()).unwrap();
        assert_eq!(back, t);
        match (back.data(), t.data()) {
            (TensorData::F16(a), TensorData::F16(b)) => {
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let err = read_tensor(&mut &b"YMSD\x01\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, FormatError::BadMagic { .. }));
    }

    #[test]
    fn unknown_dtype_reports_its_field() {
        let t = Tensor::from_f32(vec![1], vec![0.0]).unwrap();
        let mut bytes = encode(&t);
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = read_tensor(&mut bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("byte 8"), "{err}");
    }

    #[test]
    fn truncated_payload_reports_byte_offset() {
        let t = Tensor::from_f32(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode(&t);
        let cut = &bytes[..bytes.len() - 3];
        let err = read_tensor(&mut &cut[..]).unwrap_err();
        match err {
            FormatError::Truncated { offset, .. } => assert_eq!(offset, cut.len() as u64),
            other => panic!("expected truncation error, got {other}"),
        }
    }
}

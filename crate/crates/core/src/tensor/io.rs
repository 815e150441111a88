//! Single-tensor container files.
//!
//! Layout: magic `VTNS`, version byte (1), dtype code byte, rank byte,
//! then rank little-endian u32 dims, then the row-major payload in
//! little-endian order. No alignment, no padding, no trailing bytes.

use std::fs;
use std::path::Path;

use super::{Result, Scalar, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"VTNS";
const VERSION: u8 = 1;
const MAX_RANK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DtypeTag {
    F32,
    F64,
}

impl DtypeTag {
    pub fn code(self) -> u8 {
        match self {
            DtypeTag::F32 => 1,
            DtypeTag::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DtypeTag::F32),
            2 => Some(DtypeTag::F64),
            _ => None,
        }
    }

    pub fn byte_size(self) -> usize {
        match self {
            DtypeTag::F32 => 4,
            DtypeTag::F64 => 8,
        }
    }
}

fn bad(path: &Path, detail: impl Into<String>) -> TensorError {
    TensorError::BadFile {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

pub fn write_tensor<E: Scalar>(path: &Path, t: &Tensor<E>) -> Result<()> {
    let mut bytes = Vec::with_capacity(7 + 4 * t.rank() + t.numel() * E::DTYPE.byte_size());
    bytes.extend_from_slice(MAGIC);
    bytes.push(VERSION);
    bytes.push(E::DTYPE.code());
    bytes.push(t.rank() as u8);
    for &d in t.shape() {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut bytes);
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct Header {
    dtype: DtypeTag,
    shape: Vec<usize>,
    payload_at: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 7 {
        return Err(bad(path, "shorter than the fixed header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad(path, "magic bytes are not VTNS"));
    }
    if bytes[4] != VERSION {
        return Err(bad(path, format!("unsupported version {}", bytes[4])));
    }
    let dtype = DtypeTag::from_code(bytes[5]).ok_or_else(|| bad(path, format!("unknown dtype code {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    if rank > MAX_RANK {
        return Err(bad(path, format!("rank {rank} exceeds limit {MAX_RANK}")));
    }
    let payload_at = 7 + 4 * rank;
    if bytes.len() < payload_at {
        return Err(bad(path, "truncated inside the dims header"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for i in 0..rank {
        let d = u32::from_le_bytes(bytes[7 + 4 * i..11 + 4 * i].try_into().unwrap()) as usize;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| bad(path, "dims overflow"))?;
        shape.push(d);
    }
    let expect = payload_at + numel * dtype.byte_size();
    if bytes.len() != expect {
        return Err(bad(
            path,
            format!("payload is {} bytes, shape {shape:?} needs {}", bytes.len() - payload_at, expect - payload_at),
        ));
    }
    Ok(Header {
        dtype,
        shape,
        payload_at,
    })
}

fn decode<E: Scalar>(header: &Header, bytes: &[u8]) -> Tensor<E> {
    let size = header.dtype.byte_size();
    let payload = &bytes[header.payload_at..];
    let data: Vec<E> = payload.chunks_exact(size).map(E::read_le).collect();
    Tensor::from_parts(header.shape.clone(), data)
}

/// Read a tensor whose stored dtype matches `E` exactly.
pub fn read_tensor<E: Scalar>(path: &Path) -> Result<Tensor<E>> {
    let bytes = fs::read(path)?;
    let header = parse_header(path, &bytes)?;
    if header.dtype != E::DTYPE {
        return Err(bad(
            path,
            format!("stored dtype {:?} does not match requested {:?}", header.dtype, E::DTYPE),
        ));
    }
    Ok(decode(&header, &bytes))
}

/// Read either dtype as `f32`, narrowing stored `f64` values.
pub fn read_tensor_f32(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let header = parse_header(path, &bytes)?;
    Ok(match header.dtype {
        DtypeTag::F32 => decode::<f32>(&header, &bytes),
        DtypeTag::F64 => decode::<f64>(&header, &bytes).cast(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn roundtrip_preserves_shape_and_bits() {
        let d = dir();
        let p = d.path().join("t.vtns");
        let t = Tensor::<f32>::from_fn(&[2, 3, 4], |i| (i as f32).sin() * 1e-3);
        write_tensor(&p, &t).unwrap();
        let back = read_tensor::<f32>(&p).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn f64_roundtrip_and_narrowing_read() {
        let d = dir();
        let p = d.path().join("t64.vtns");
        let t = Tensor::<f64>::new(&[3], vec![1.5, -2.25, 0.5]).unwrap();
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor::<f64>(&p).unwrap(), t);
        let narrow = read_tensor_f32(&p).unwrap();
        assert_eq!(narrow.data(), &[1.5f32, -2.25, 0.5]);
    }

    #[test]
    fn wrong_magic_rejected() {
        let d = dir();
        let p = d.path().join("bad.vtns");
        fs::write(&p, b"NOPE\x01\x01\x00").unwrap();
        let err = read_tensor::<f32>(&p).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncated_payload_rejected() {
        let d = dir();
        let p = d.path().join("short.vtns");
        let t = Tensor::<f32>::zeros(&[4]);
        write_tensor(&p, &t).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        let err = read_tensor::<f32>(&p).unwrap_err();
        assert!(matches!(err, TensorError::BadFile { .. }), "{err}");
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let d = dir();
        let p = d.path().join("t32.vtns");
        write_tensor(&p, &Tensor::<f32>::zeros(&[2])).unwrap();
        assert!(read_tensor::<f64>(&p).is_err());
    }
}

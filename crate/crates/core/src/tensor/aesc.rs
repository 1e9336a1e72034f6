//! AESC binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AESC" | version: u16 = 1 | dtype: u8 (0 = f32, 1 = f64) | rank: u8
//!        | rank × dim: u32 | row-major payload
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{DType, Tensor};

pub const MAGIC: [u8; 4] = *b"AESC";
pub const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum AescError {
    #[error("bad magic {0:?}, expected \"AESC\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("unknown dtype code {0}")]
    BadDType(u8),
    #[error("header truncated: need {expected} bytes, have {actual}")]
    TruncatedHeader { expected: usize, actual: usize },
    #[error("payload truncated: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("zero extent in dims {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let dtype = t.dtype();
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + dtype.byte_width() * t.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(u8::try_from(t.rank()).expect("rank above 255"));
    for &d in t.dims() {
        out.extend_from_slice(&u32::try_from(d).expect("extent above u32").to_le_bytes());
    }
    match dtype {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, AescError> {
    let need = |expected: usize| {
        if bytes.len() < expected {
            Err(AescError::TruncatedHeader {
                expected,
                actual: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(4)?;
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(AescError::BadMagic(magic));
    }
    need(8)?;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(AescError::BadVersion(version));
    }
    let dtype = DType::from_code(bytes[6]).ok_or(AescError::BadDType(bytes[6]))?;
    let rank = bytes[7] as usize;
    let header = 8 + 4 * rank;
    need(header)?;
    let dims: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(AescError::ZeroDim(dims));
    }
    let count: usize = dims.iter().product();
    let expected = count * dtype.byte_width();
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(AescError::TruncatedPayload {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(AescError::TrailingBytes(payload.len() - expected));
    }
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(Tensor::with_dtype(dims, data, dtype).expect("dims validated above"))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<(), AescError> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|source| AescError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, AescError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| AescError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"AESC");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 1);
        assert_eq!(b[7], 2);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..16], &[1, 0, 0, 0]);
        assert_eq!(&b[16..24], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn corrupted_headers() {
        let mut b = encode(&Tensor::zeros(vec![3]));
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(AescError::BadMagic(_))));

        let mut b = encode(&Tensor::zeros(vec![3]));
        b[4] = 2;
        assert!(matches!(decode(&b), Err(AescError::BadVersion(2))));

        let b = encode(&Tensor::zeros(vec![3]));
        match decode(&b[..b.len() - 5]) {
            Err(AescError::TruncatedPayload { expected, actual }) => {
                assert_eq!((expected, actual), (24, 19));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(decode(b"AE"), Err(AescError::TruncatedHeader { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
            f32_tag in any::<bool>(),
        ) {
            let n: usize = dims.iter().product();
            let mut s = seed;
            let data: Vec<f64> = (0..n).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits((s >> 2) & 0x3fef_ffff_ffff_ffff) * if s & 1 == 0 { 1.0 } else { -1.0 }
            }).collect();
            let dtype = if f32_tag { DType::F32 } else { DType::F64 };
            let t = Tensor::with_dtype(dims, data, dtype).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            prop_assert_eq!(back.dtype(), t.dtype());
            let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}

//! Binary matrix files: a 16-byte header (`MAT0`, dtype code, rows, cols as
//! little-endian u32) followed by the row-major little-endian payload.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::bf16::Bf16;
use crate::matrix::{DType, Element, LayoutTag, Matrix};

pub const MAGIC: &[u8; 4] = b"MAT0";

#[derive(Debug, Error)]
pub enum MatrixIoError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a matrix file (bad magic)")]
    BadMagic,
    #[error("unknown dtype code {0}")]
    BadDType(u32),
    #[error("payload holds {got} bytes, header promises {want}")]
    Truncated { want: usize, got: usize },
    #[error("expected {want:?} data, file holds {got:?}")]
    WrongDType { want: DType, got: DType },
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyMatrix {
    F32(Matrix<f32>),
    Bf16(Matrix<Bf16>),
}

impl AnyMatrix {
    pub fn dtype(&self) -> DType {
        match self {
            AnyMatrix::F32(_) => DType::F32,
            AnyMatrix::Bf16(_) => DType::Bf16,
        }
    }

    /// Widen to f32 (exact for bf16).
    pub fn into_f32(self) -> Matrix<f32> {
        match self {
            AnyMatrix::F32(m) => m,
            AnyMatrix::Bf16(m) => m.to_f32(),
        }
    }
}

fn put<T: Element>(x: T, out: &mut Vec<u8>) {
    match T::DTYPE {
        DType::F32 => out.extend_from_slice(&x.to_f32().to_le_bytes()),
        DType::Bf16 => out.extend_from_slice(&Bf16::from_f32(x.to_f32()).to_bits().to_le_bytes()),
    }
}

pub fn encode<T: Element>(m: &Matrix<T>) -> Vec<u8> {
    let rm = m.to_row_major();
    let mut out = Vec::with_capacity(16 + rm.len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    for v in [T::DTYPE.code(), rm.rows() as u32, rm.cols() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &x in rm.data() {
        put(x, &mut out);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<AnyMatrix, MatrixIoError> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(MatrixIoError::BadMagic);
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let dtype = DType::from_code(word(4)).ok_or(MatrixIoError::BadDType(word(4)))?;
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let payload = &bytes[16..];
    let want = rows * cols * dtype.bytes();
    if payload.len() != want {
        return Err(MatrixIoError::Truncated { want, got: payload.len() });
    }
    Ok(match dtype {
        DType::F32 => {
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            AnyMatrix::F32(Matrix::new(rows, cols, LayoutTag::RowMajor, data).expect("size checked"))
        }
        DType::Bf16 => {
            let data = payload
                .chunks_exact(2)
                .map(|c| Bf16::from_bits(u16::from_le_bytes(c.try_into().expect("2 bytes"))))
                .collect();
            AnyMatrix::Bf16(Matrix::new(rows, cols, LayoutTag::RowMajor, data).expect("size checked"))
        }
    })
}

pub fn write_matrix<T: Element>(path: &Path, m: &Matrix<T>) -> Result<(), MatrixIoError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(m))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<AnyMatrix, MatrixIoError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_dtypes() {
        let m = Matrix::from_fn(3, 5, LayoutTag::ColMajor, |r, c| (r * 5 + c) as f32 - 2.5);
        let back = decode(&encode(&m)).unwrap();
        assert_eq!(back, AnyMatrix::F32(m.to_row_major()));
        let h = m.to_bf16();
        let back = decode(&encode(&h)).unwrap();
        assert_eq!(back.dtype(), DType::Bf16);
        assert_eq!(back.into_f32(), h.to_f32().to_row_major());
    }

    #[test]
    fn header_layout() {
        let m = Matrix::from_fn(2, 3, LayoutTag::RowMajor, |_, _| 1.0f32);
        let b = encode(&m);
        assert_eq!(&b[..4], b"MAT0");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 3);
        assert_eq!(b.len(), 16 + 6 * 4);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(decode(b"nope"), Err(MatrixIoError::BadMagic)));
        let mut b = encode(&Matrix::from_fn(2, 2, LayoutTag::RowMajor, |_, _| 0.0f32));
        b.pop();
        assert!(matches!(decode(&b), Err(MatrixIoError::Truncated { .. })));
        b[4] = 9;
        assert!(matches!(decode(&b), Err(MatrixIoError::BadDType(9))));
    }
}

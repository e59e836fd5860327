//! Binary matrix files.
//!
//! Layout (little-endian): `b"LGDM"`, `u16` version (1), `u16` dtype tag
//! (1 = f32, 2 = f64), `u64` rows, `u64` cols, then the row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"LGDM";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u16 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u16) -> Result<Self> {
        match tag {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            t => Err(Error::BadDtype(t)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Values are rounded to `dtype` when it is f32.
pub fn encode_matrix(m: &Matrix<f64>, dtype: Dtype) -> Result<Vec<u8>> {
    if let Some(i) = m.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(i));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + m.as_slice().len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.tag().to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for &v in m.as_slice() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

/// Returns the matrix, its stored dtype and the number of bytes consumed.
pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<(Matrix<f64>, Dtype, usize)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u16_at(4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = Dtype::from_tag(u16_at(6))?;
    let (rows, cols) = (u64_at(8), u64_at(16));
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(dtype.size() as u64))
        .ok_or_else(|| Error::InvalidParameter(format!("matrix of {rows}×{cols} overflows")))?;
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found < expected {
        return Err(Error::TruncatedPayload { expected, found });
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + expected as usize];
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(i));
    }
    let m = Matrix::from_vec(rows as usize, cols as usize, data)?;
    Ok((m, dtype, HEADER_LEN + expected as usize))
}

pub fn read_matrix(path: &Path) -> Result<Matrix<f64>> {
    Ok(read_matrix_with_dtype(path)?.0)
}

pub fn read_matrix_with_dtype(path: &Path) -> Result<(Matrix<f64>, Dtype)> {
    let bytes = fs::read(path).map_err(super::at_path(path))?;
    let (m, dtype, used) = decode_matrix(&bytes, path).map_err(|e| match e {
        e @ (Error::BadMagic { .. } | Error::Parse { .. }) => e,
        other => Error::Parse {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    })?;
    if used != bytes.len() {
        log::warn!("{}: {} trailing bytes ignored", path.display(), bytes.len() - used);
    }
    Ok((m, dtype))
}

pub fn write_matrix(path: &Path, m: &Matrix<f64>, dtype: Dtype) -> Result<()> {
    super::atomic_write(path, &encode_matrix(m, dtype)?)
}

//! Head checkpoints: `b"LGCK"`, `u16` version, `u32` matrix count, then for
//! each matrix a `u64` byte length and an embedded matrix file, then a `u64`
//! length and the UTF-8 training config.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::{EmbedderHead, Layer, TrainConfig};

use super::matrix_file::{decode_matrix, encode_matrix, Dtype};

pub const MAGIC: &[u8; 4] = b"LGCK";
pub const VERSION: u16 = 1;

pub fn encode_checkpoint(head: &EmbedderHead<f64>, cfg: &TrainConfig) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let params = head.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let blob = encode_matrix(p, Dtype::F64)?;
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(EmbedderHead<f64>, TrainConfig)> {
    let truncated = |expected: usize| Error::TruncatedPayload {
        expected: expected as u64,
        found: bytes.len() as u64,
    };
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf() });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let mut at = 10;
    let read_len = |at: &mut usize| -> Result<usize> {
        let end = *at + 8;
        let b = bytes.get(*at..end).ok_or_else(|| truncated(end))?;
        *at = end;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
    };
    let mut mats = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_len(&mut at)?;
        let blob = bytes.get(at..at + len).ok_or_else(|| truncated(at + len))?;
        mats.push(decode_matrix(blob, path)?.0);
        at += len;
    }
    let len = read_len(&mut at)?;
    let text = bytes.get(at..at + len).ok_or_else(|| truncated(at + len))?;
    let text = std::str::from_utf8(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if count == 0 || count % 2 != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            detail: format!("expected weight/bias pairs, found {count} matrices"),
        });
    }
    let mut layers = Vec::new();
    let mut it = mats.into_iter();
    while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::ShapeMismatch {
                expected: (1, weight.cols()),
                found: bias.shape(),
            });
        }
        layers.push(Layer { weight, bias });
    }
    Ok((EmbedderHead::from_layers(layers), cfg))
}

pub fn write_checkpoint(path: &Path, head: &EmbedderHead<f64>, cfg: &TrainConfig) -> Result<()> {
    super::atomic_write(path, &encode_checkpoint(head, cfg)?)
}

pub fn read_checkpoint(path: &Path) -> Result<(EmbedderHead<f64>, TrainConfig)> {
    decode_checkpoint(&fs::read(path).map_err(super::at_path(path))?, path)
}

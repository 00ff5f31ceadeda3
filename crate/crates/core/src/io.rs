//! Binary dense-matrix container and JSON sidecar helpers.
//!
//! Layout of a matrix file:
//!
//! ```text
//! "SGN1" | rows: u64 LE | cols: u64 LE | rows*cols f64 LE, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SGN1";
const HEADER_LEN: usize = 4 + 8 + 8;

pub fn encode_matrix(m: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = m.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Array2<f64>> {
    let parse_err = |message: &str| Error::Parse {
        row: 0,
        column: 0,
        message: message.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(parse_err("truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(parse_err("bad magic, expected \"SGN1\""));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| parse_err("dimension overflow"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * 8 {
        return Err(parse_err(&format!(
            "payload has {} bytes, header declares {rows}x{cols} ({} bytes)",
            body.len(),
            count * 8
        )));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::shape(e.to_string()))
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_matrix(m))?;
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_matrix(&bytes)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let f = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(f)?)
}

/// Hex SHA-256 of a matrix's binary encoding; used to tie derived artifacts to their source.
pub fn matrix_hash(m: &Array2<f64>) -> String {
    hex::encode(Sha256::digest(encode_matrix(m)))
}

//! Flat little-endian binary blobs.
//!
//! Plain blobs are a bare sequence of `f64`. Tensor blobs prepend a shape
//! header: `u64 ndim`, then `ndim` x `u64` dimensions, all little-endian.

use std::path::Path;

use crate::error::{Error, Result};

pub fn encode_f64(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_f64(bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::MalformedBlob {
            path: path.to_path_buf(),
            reason: format!("length {} is not a multiple of 8", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn write_f64(path: &Path, values: &[f64]) -> Result<()> {
    std::fs::write(path, encode_f64(values))?;
    Ok(())
}

pub fn read_f64(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    decode_f64(&bytes, path)
}

pub fn write_tensor(path: &Path, shape: &[usize], values: &[f64]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != values.len() {
        return Err(Error::dims("tensor blob", expected, values.len()));
    }
    let mut out = Vec::with_capacity(8 * (1 + shape.len() + values.len()));
    out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&encode_f64(values));
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    let bad = |reason: String| Error::MalformedBlob {
        path: path.to_path_buf(),
        reason,
    };
    let read_u64 = |i: usize| -> Result<u64> {
        bytes
            .get(i * 8..i * 8 + 8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .ok_or_else(|| bad("truncated header".into()))
    };
    let ndim = read_u64(0)? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(bad(format!("implausible ndim {ndim}")));
    }
    let shape = (1..=ndim)
        .map(|i| read_u64(i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let data = decode_f64(&bytes[(ndim + 1) * 8..], path)?;
    let expected: usize = shape.iter().product();
    if data.len() != expected {
        return Err(bad(format!(
            "shape {shape:?} needs {expected} values, found {}",
            data.len()
        )));
    }
    Ok((shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.1 - 1.0).collect();
        write_tensor(&p, &[2, 3, 4], &data).unwrap();
        let (shape, back) = read_tensor(&p).unwrap();
        assert_eq!(shape, vec![2, 3, 4]);
        assert_eq!(back, data);
    }

    #[test]
    fn truncated_tensor_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        write_tensor(&p, &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&p, bytes).unwrap();
        assert!(read_tensor(&p).is_err());
    }
}

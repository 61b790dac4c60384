//! Little-endian array blobs, JSON sidecars and content digests.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Schema version written into every JSON sidecar.
pub const SCHEMA_VERSION: u32 = 1;

pub fn f32_bytes(data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * data.len());
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn f32_from_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "float32 stream of {} bytes is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn f64_bytes(data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * data.len());
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn f64_from_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "float64 stream of {} bytes is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_f32(path: &Path, data: &[f64]) -> Result<()> {
    fs::write(path, f32_bytes(data))?;
    Ok(())
}

pub fn read_f32(path: &Path) -> Result<Vec<f64>> {
    f32_from_bytes(&fs::read(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let mut s = String::new();
    fs::File::open(path)?.read_to_string(&mut s)?;
    Ok(serde_json::from_str(&s)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

pub fn check_schema(found: u32) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::Version {
            expected: SCHEMA_VERSION,
            found,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip_of_representable_values() {
        let v = vec![0.0, -1.5, 3.25, 1e-3f32 as f64, f32::MAX as f64];
        assert_eq!(f32_from_bytes(&f32_bytes(&v)).unwrap(), v);
        assert!(f32_from_bytes(&[0, 1, 2]).is_err());
    }

    #[test]
    fn f64_round_trip_is_bitwise() {
        let v = vec![std::f64::consts::PI, -0.0, 1e-300, f64::MIN_POSITIVE];
        let back = f64_from_bytes(&f64_bytes(&v)).unwrap();
        assert!(v.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}

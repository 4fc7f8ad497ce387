//! Raw little-endian f64 arrays with JSON sidecars, and 8-bit PGM/PPM export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array;

/// Metadata stored next to a raw file as `<file>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub shape: Vec<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_raw(a: &Array) -> Vec<u8> {
    a.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Decodes `bytes` as f64 values of the given shape.
pub fn decode_raw(bytes: &[u8], shape: &[usize]) -> Result<Array> {
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format {
            offset: 0,
            detail: format!("shape {shape:?} overflows"),
        })?;
    let want = n.checked_mul(8).ok_or_else(|| Error::Format {
        offset: 0,
        detail: format!("shape {shape:?} overflows"),
    })?;
    if bytes.len() != want {
        return Err(Error::Format {
            offset: bytes.len().min(want) as u64,
            detail: format!("expected {want} bytes for shape {shape:?}, found {}", bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Array::new(shape.to_vec(), data)
}

pub fn write_raw(path: &Path, a: &Array, seed: Option<u64>, model: serde_json::Value) -> Result<()> {
    fs::write(path, encode_raw(a))?;
    let side = Sidecar {
        shape: a.shape().to_vec(),
        seed,
        model,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)? + "\n")?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<(Array, Sidecar)> {
    let side: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let a = decode_raw(&fs::read(path)?, &side.shape)?;
    Ok((a, side))
}

/// Writes a `[C, H, W]` image (C = 1 or 3) as binary PGM/PPM, mapping
/// `[lo, hi]` to `0..=255` with clamping.
pub fn write_pnm(path: &Path, image: &Array, lo: f64, hi: f64) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::Invalid(format!("pnm needs [1|3, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for ch in 0..c {
            let v = (d[ch * h * w + i] - lo) / (hi - lo);
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

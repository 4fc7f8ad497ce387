//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GTFD"  u32 version=1  u32 record_count
//! per record: u32 name_len, name (UTF-8), u32 ndim, u32 dims[ndim], f32 data[prod(dims)]
//! u64 json_len, json (UTF-8)
//! u64 master_count, f64 data for every record in table order
//! ```
//!
//! The f32 table is the shareable copy; the trailing f64 section holds the
//! exact values used to resume training. Files without the f64 section load
//! with the f32 values widened.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GTFD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn record(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::MissingKey(format!("checkpoint record {name}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(self.records.len(), "record count")?.to_le_bytes());
        for r in &self.records {
            if r.shape.iter().product::<usize>() != r.data.len() {
                return Err(Error::Invalid(format!("record {} shape {:?} does not hold {} values", r.name, r.shape, r.data.len())));
            }
            out.extend_from_slice(&u32_of(r.name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&u32_of(r.shape.len(), "ndim")?.to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
            }
            for &v in &r.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let json = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let total: usize = self.records.iter().map(|r| r.data.len()).sum();
        out.extend_from_slice(&(total as u64).to_le_bytes());
        for r in &self.records {
            for &v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "bad magic, not a checkpoint".into(),
            });
        }
        let version = c.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                detail: format!("unsupported version {version}"),
            });
        }
        let count = c.u32("record count")? as usize;
        let mut records = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let at = c.pos;
            let len = c.u32("name length")? as usize;
            let name = std::str::from_utf8(c.take(len, "name")?)
                .map_err(|e| Error::Format {
                    offset: at as u64 + 4,
                    detail: format!("record name is not UTF-8: {e}"),
                })?
                .to_string();
            let ndim = c.u32("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(c.u32("dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| Error::Format {
                    offset: c.pos as u64,
                    detail: format!("record {name} shape {shape:?} overflows"),
                })?;
            let raw = c.take(n * 4, "record data")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            records.push(Record { name, shape, data });
        }
        let json_len = c.u64("json length")?;
        let json_at = c.pos;
        let json = c.take(usize::try_from(json_len).unwrap_or(usize::MAX), "json")?;
        let meta = serde_json::from_slice(json).map_err(|e| Error::Format {
            offset: json_at as u64,
            detail: format!("metadata: {e}"),
        })?;
        if c.pos < bytes.len() {
            let total: usize = records.iter().map(|r| r.data.len()).sum();
            let at = c.pos;
            let masters = c.u64("master count")?;
            if masters != total as u64 {
                return Err(Error::Format {
                    offset: at as u64,
                    detail: format!("master section holds {masters} values, table holds {total}"),
                });
            }
            for r in &mut records {
                let raw = c.take(r.data.len() * 8, "master data")?;
                for (v, b) in r.data.iter_mut().zip(raw.chunks_exact(8)) {
                    *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
                }
            }
            if c.pos != bytes.len() {
                return Err(Error::Format {
                    offset: c.pos as u64,
                    detail: format!("{} trailing bytes", bytes.len() - c.pos),
                });
            }
        }
        Ok(Self { records, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Invalid(format!("{what} {v} exceeds u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                detail: format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

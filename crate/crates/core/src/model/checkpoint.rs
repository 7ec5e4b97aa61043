//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RVLPCKPT" | version u32 | config hash [u8; 32] | step u64 | adam t u64
//! | entry count u32 | entries
//! entry: name len u32 | name utf-8 | rows u32 | cols u32 | rows*cols f64
//! ```
//!
//! Entry names are `param/<name>`, `adam_m/<name>` and `adam_v/<name>`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::optim::AdamW;
use super::params::{Mat, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RVLPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub step: u64,
    pub params: ModelParams,
    pub optimizer: AdamW,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_entries(buf: &mut Vec<u8>, prefix: &str, p: &ModelParams) {
    for (name, m) in p.named() {
        let full = format!("{prefix}/{name}");
        put_u32(buf, full.len() as u32);
        buf.extend_from_slice(full.as_bytes());
        put_u32(buf, m.nrows() as u32);
        put_u32(buf, m.ncols() as u32);
        for v in m.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        buf.extend_from_slice(&self.config_hash);
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.optimizer.t.to_le_bytes());
        let count = 3 * self.params.named().len();
        put_u32(&mut buf, count as u32);
        put_entries(&mut buf, "param", &self.params);
        put_entries(&mut buf, "adam_m", &self.optimizer.m);
        put_entries(&mut buf, "adam_v", &self.optimizer.v);
        buf
    }

    /// Parses `bytes` into the shapes of `template`. With `expected_hash`
    /// set, a checkpoint written under another configuration is rejected.
    pub fn from_bytes(bytes: &[u8], template: &ModelParams, expected_hash: Option<&[u8; 32]>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(r.take(32)?);
        if let Some(h) = expected_hash {
            if h != &config_hash {
                return Err(Error::Checkpoint(format!(
                    "config hash mismatch: checkpoint {}, current {}",
                    hex(&config_hash),
                    hex(h)
                )));
            }
        }
        let step = r.u64()?;
        let t = r.u64()?;
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not utf-8".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Mat::from_shape_vec((rows, cols), data).expect("length checked");
            entries.insert(name, m);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut fill = |prefix: &str| -> Result<ModelParams> {
            let mut p = template.clone();
            for (name, m) in p.named_mut() {
                let key = format!("{prefix}/{name}");
                let src = entries
                    .remove(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing entry {key}")))?;
                if src.shape() != m.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{key}: stored shape {:?}, model expects {:?}",
                        src.shape(),
                        m.shape()
                    )));
                }
                *m = src;
            }
            Ok(p)
        };
        let params = fill("param")?;
        let m = fill("adam_m")?;
        let v = fill("adam_v")?;
        if let Some(extra) = entries.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected entry {extra}")));
        }
        Ok(Self {
            config_hash,
            step,
            params,
            optimizer: AdamW { m, v, t },
        })
    }

    /// Writes through a temporary file and a rename so a crash never leaves
    /// a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, template: &ModelParams, expected_hash: Option<&[u8; 32]>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, template, expected_hash)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"RBCK"
//! u32    version
//! u32    config length, then the model config as JSON
//! u32    tensor count, then per tensor (sorted by kind, then name):
//!          u8 kind (0 param, 1 buffer, 2 mask), u32 name length, name,
//!          u32 rank, u32 extents..., f32 values
//! u8     1 if a PRNG state follows, then 4 x u64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{ModelConfig, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RBCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub rng: Option<Rng>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let v = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} does not fit in u32")))?;
    put_u32(out, v);
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let cfg = serde_json::to_vec(&self.config)?;
        put_len(&mut out, cfg.len())?;
        out.extend_from_slice(&cfg);
        let groups = [(0u8, &self.params.params), (1, &self.params.buffers), (2, &self.params.masks)];
        put_len(&mut out, groups.iter().map(|(_, m)| m.len()).sum())?;
        for (kind, map) in groups {
            for (name, t) in map {
                out.push(kind);
                put_len(&mut out, name.len())?;
                out.extend_from_slice(name.as_bytes());
                put_len(&mut out, t.rank())?;
                for &d in t.shape() {
                    put_len(&mut out, d)?;
                }
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        match &self.rng {
            Some(rng) => {
                out.push(1);
                for s in rng.state() {
                    out.extend_from_slice(&s.to_le_bytes());
                }
            }
            None => out.push(0),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
        let mut params = ParamSet::default();
        for _ in 0..r.u32()? {
            let kind = r.take(1)?[0];
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            let map = match kind {
                0 => &mut params.params,
                1 => &mut params.buffers,
                2 => &mut params.masks,
                _ => return Err(Error::Checkpoint(format!("{name}: unknown tensor kind {kind}"))),
            };
            map.insert(name, t);
        }
        let rng = match r.take(1)?[0] {
            0 => None,
            _ => {
                let mut s = [0u64; 4];
                for v in &mut s {
                    *v = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                }
                Some(Rng::from_state(s))
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        params.check(&config)?;
        Ok(Checkpoint { config, params, rng })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

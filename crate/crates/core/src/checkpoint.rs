//! Self-describing container of named `f64` arrays plus a JSON metadata
//! record. Every entry carries a CRC32 so corruption is reported by name.

use std::fs;
use std::path::Path;

use autodiff::Tensor;
use indexmap::IndexMap;
use serde_json::Value;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LLMCDCK1";
const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub metadata: Value,
    pub entries: IndexMap<String, Tensor>,
}

impl Container {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.entries.shift_remove(name).ok_or_else(|| Error::Integrity {
            entry: name.to_string(),
            detail: "missing from checkpoint".into(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&crc32fast::hash(&meta).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, t) in &self.entries {
            let mut body = Vec::new();
            body.extend_from_slice(&(name.len() as u32).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.push(DTYPE_F64);
            body.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                body.extend_from_slice(&(d as u64).to_le_bytes());
            }
            body.extend_from_slice(&((t.numel() * 8) as u64).to_le_bytes());
            for v in t.data() {
                body.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&body);
            out.extend_from_slice(&body);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "header")?;
        if magic != MAGIC {
            return Err(integrity("header", "bad magic bytes"));
        }
        let meta_len = r.u64("metadata")? as usize;
        let meta = r.take(meta_len, "metadata")?;
        let crc = r.u32("metadata")?;
        if crc32fast::hash(meta) != crc {
            return Err(integrity("metadata", "checksum mismatch"));
        }
        let metadata: Value = serde_json::from_slice(meta).map_err(|e| integrity("metadata", &e.to_string()))?;
        let count = r.u64("entry table")?;
        let mut entries = IndexMap::new();
        for i in 0..count {
            let start = r.pos;
            let label = format!("entry #{i}");
            let name_len = r.u32(&label)? as usize;
            let name = String::from_utf8(r.take(name_len, &label)?.to_vec()).map_err(|_| integrity(&label, "name is not UTF-8"))?;
            let dtype = r.take(1, &name)?[0];
            if dtype != DTYPE_F64 {
                return Err(integrity(&name, &format!("unsupported dtype {dtype}")));
            }
            let ndim = r.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64(&name)? as usize);
            }
            let payload = r.u64(&name)? as usize;
            let numel: usize = shape.iter().product();
            if payload != numel * 8 {
                return Err(integrity(&name, "payload length disagrees with shape"));
            }
            let data = r.take(payload, &name)?;
            let body = &bytes[start..r.pos];
            let crc = r.u32(&name)?;
            if crc32fast::hash(body) != crc {
                return Err(integrity(&name, "checksum mismatch"));
            }
            let values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            entries.insert(name, Tensor::new(&shape, values));
        }
        if r.pos != bytes.len() {
            return Err(integrity("trailer", "unexpected bytes after the last entry"));
        }
        Ok(Self { metadata, entries })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// container at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn integrity(entry: &str, detail: &str) -> Error {
    Error::Integrity {
        entry: entry.to_string(),
        detail: detail.to_string(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(integrity(what, "truncated")),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Container {
        let mut c = Container::new(json!({"step": 7, "seed": 3}));
        c.insert("codec/enc/stem/w", Tensor::from_fn(&[2, 1, 3], |i| i as f64 * 0.5 - 1.0));
        c.insert("scalar", Tensor::scalar(f64::MIN_POSITIVE));
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        assert_eq!(Container::decode(&c.encode()).unwrap(), c);
    }

    #[test]
    fn truncation_names_the_entry() {
        let bytes = sample().encode();
        let err = Container::decode(&bytes[..bytes.len() - 6]).unwrap_err();
        assert!(matches!(&err, Error::Integrity { entry, .. } if entry == "scalar"), "{err}");
        let err = Container::decode(&bytes[..5]).unwrap_err();
        assert!(matches!(&err, Error::Integrity { entry, .. } if entry == "header"));
    }

    #[test]
    fn flipped_payload_bit_names_the_entry() {
        let c = sample();
        let mut bytes = c.encode();
        let n = bytes.len();
        // Inside the first entry's payload.
        let meta_len = serde_json::to_vec(&c.metadata).unwrap().len();
        let first_payload = 8 + 8 + meta_len + 4 + 8 + 4 + "codec/enc/stem/w".len() + 1 + 4 + 24 + 8;
        bytes[first_payload + 3] ^= 0x10;
        assert!(first_payload < n);
        let err = Container::decode(&bytes).unwrap_err();
        assert!(matches!(&err, Error::Integrity { entry, .. } if entry == "codec/enc/stem/w"), "{err}");
    }
}

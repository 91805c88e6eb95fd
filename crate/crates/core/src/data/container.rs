//! Flat binary container for named tensors.
//!
//! ```text
//! magic      [u8; 4]     "DUQT" (dataset tensors) or "DUQP" (parameters)
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 JSON
//! n_entries  u32
//! per entry: name_len u32, name bytes, rank u32, 4 x u64 extents (unused = 1)
//! data       every entry's values as row-major f64, in entry order
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use duq_diff::Tensor;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const VERSION: u32 = 1;
const MAX_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Magic {
    Tensors,
    Params,
}

impl Magic {
    pub fn bytes(self) -> &'static [u8; 4] {
        match self {
            Magic::Tensors => b"DUQT",
            Magic::Params => b"DUQP",
        }
    }
}

#[derive(Debug)]
pub struct Container {
    pub meta: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Container {
    /// Removes and returns the named entry.
    pub fn take(&mut self, name: &str) -> Option<Tensor> {
        let k = self.entries.iter().position(|(n, _)| n == name)?;
        Some(self.entries.remove(k).1)
    }
}

pub fn encode(magic: Magic, meta: &str, entries: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let data_len: usize = entries.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(64 + meta.len() + entries.len() * 64 + data_len);
    out.extend_from_slice(magic.bytes());
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        if t.rank() > MAX_RANK {
            return Err(Error::Shape(format!("entry {name} has rank {} > {MAX_RANK}", t.rank())));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for k in 0..MAX_RANK {
            let extent = t.shape().get(k).copied().unwrap_or(1);
            out.extend_from_slice(&(extent as u64).to_le_bytes());
        }
    }
    for (_, t) in entries {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], magic: Magic) -> std::result::Result<Container, String> {
    let mut c = Cursor { bytes, pos: 0 };
    let found = c.take(4)?;
    if found != magic.bytes() {
        return Err(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(magic.bytes())
        ));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let meta_len = c.u32()? as usize;
    let meta = std::str::from_utf8(c.take(meta_len)?)
        .map_err(|e| format!("metadata is not UTF-8: {e}"))?
        .to_string();
    let n = c.u32()? as usize;
    let mut headers = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|e| format!("entry name is not UTF-8: {e}"))?
            .to_string();
        let rank = c.u32()? as usize;
        if rank > MAX_RANK {
            return Err(format!("entry {name} has rank {rank}"));
        }
        let mut extents = [0usize; MAX_RANK];
        for e in &mut extents {
            *e = usize::try_from(c.u64()?).map_err(|_| "extent overflows usize".to_string())?;
        }
        headers.push((name, extents[..rank].to_vec()));
    }
    let mut entries = Vec::with_capacity(headers.len());
    for (name, shape) in headers {
        let len = shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| format!("entry {name} is too large"))?;
        let raw = c.take(len.checked_mul(8).ok_or("entry too large")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        entries.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    Ok(Container { meta, entries })
}

pub fn write_container(path: &Path, magic: Magic, meta: &str, entries: &[(&str, &Tensor)]) -> Result<()> {
    write_atomic(path, &encode(magic, meta, entries)?)
}

pub fn read_container(path: &Path, magic: Magic) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, magic).map_err(|message| Error::Container {
        path: path.to_path_buf(),
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Tensor, Tensor, Tensor) {
        (
            Tensor::from_fn(&[2, 3, 1, 2], |k| k as f64 * 0.1 - 0.3),
            Tensor::scalar(f64::MIN_POSITIVE),
            Tensor::from_fn(&[5], |k| 1.0 / (k as f64 + 3.0)),
        )
    }

    #[test]
    fn round_trip_is_exact() {
        let (a, b, c) = sample();
        let bytes = encode(Magic::Params, "{\"k\":1}", &[("a", &a), ("b", &b), ("c", &c)]).unwrap();
        let mut got = decode(&bytes, Magic::Params).unwrap();
        assert_eq!(got.meta, "{\"k\":1}");
        assert_eq!(got.take("c").unwrap(), c);
        assert_eq!(got.take("a").unwrap(), a);
        assert_eq!(got.take("b").unwrap(), b);
        assert!(got.take("a").is_none());
    }

    #[test]
    fn header_starts_with_magic_and_version() {
        let (a, ..) = sample();
        let bytes = encode(Magic::Tensors, "", &[("a", &a)]).unwrap();
        assert_eq!(&bytes[..4], b"DUQT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    }

    #[test]
    fn wrong_magic_and_truncation_rejected() {
        let (a, ..) = sample();
        let bytes = encode(Magic::Tensors, "", &[("a", &a)]).unwrap();
        assert!(decode(&bytes, Magic::Params).unwrap_err().contains("magic"));
        assert!(decode(&bytes[..bytes.len() - 3], Magic::Tensors)
            .unwrap_err()
            .contains("truncated"));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra, Magic::Tensors).is_err());
    }
}

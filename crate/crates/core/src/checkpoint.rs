//! Binary checkpoint container and the `key = value` text used in headers.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SROODCKP"
//! version    u32
//! kind       u8       1 repairer, 2 perceptual, 3 train state, 4 linear head
//! dtype      u8       4 = f32, 8 = f64
//! reserved   u16      zero
//! header     u32 length + UTF-8 `key = value` lines
//! tensors    u32 count, then per tensor:
//!              u16 name length + UTF-8 name
//!              u8 rank + u32 per dimension
//!              values in `dtype`
//! ```
//!
//! Model checkpoints are written as `f32`. Decoding rejects truncated input,
//! trailing bytes and other format versions.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::str::FromStr;

use crate::nn::Tensor;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SROODCKP";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Repairer = 1,
    Perceptual = 2,
    TrainState = 3,
    LinearHead = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 4,
    F64 = 8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub dtype: Dtype,
    pub header: String,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::MalformedCheckpoint(format!("expected {kind:?}, found {:?}", self.kind)));
        }
        Ok(())
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(ckpt.kind as u8);
    out.push(ckpt.dtype as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(ckpt.header.len() as u32).to_le_bytes());
    out.extend_from_slice(ckpt.header.as_bytes());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for t in &ckpt.tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            match ckpt.dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedCheckpoint)?;
        let slice = self.buf.get(self.pos..end).ok_or(Error::TruncatedCheckpoint)?;
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let bytes = self.take(n)?;
        core::str::from_utf8(bytes)
            .map(String::from)
            .map_err(|_| Error::MalformedCheckpoint(String::from("invalid UTF-8")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::MalformedCheckpoint(String::from("bad magic")));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let kind = match r.u8()? {
        1 => Kind::Repairer,
        2 => Kind::Perceptual,
        3 => Kind::TrainState,
        4 => Kind::LinearHead,
        k => return Err(Error::MalformedCheckpoint(format!("unknown kind {k}"))),
    };
    let dtype = match r.u8()? {
        4 => Dtype::F32,
        8 => Dtype::F64,
        d => return Err(Error::MalformedCheckpoint(format!("unknown dtype {d}"))),
    };
    let _reserved = r.u16()?;
    let header_len = r.u32()? as usize;
    let header = r.string(header_len)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(dtype as usize).ok_or(Error::TruncatedCheckpoint)?)?;
        let data = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        tensors.push(Tensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::MalformedCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { kind, dtype, header, tensors })
}

/// Parsed `key = value` lines, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: Vec<(String, String)>,
}

impl KvMap {
    pub fn get(&self, key: &str) -> Result<&str> {
        self.get_opt(key).ok_or_else(|| Error::InvalidConfig(format!("missing key {key}")))
    }

    pub fn get_opt(&self, key: &str) -> Option<&str> {
        self.entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| Error::InvalidConfig(format!("bad value for {key}: {v:?}")))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn insert(&mut self, key: &str, value: &str) {
        self.entries.push((key.to_string(), value.to_string()));
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<KvMap> {
    let mut map = KvMap::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::InvalidConfig(format!("line {}: empty key", i + 1)));
        }
        map.insert(k, v.trim());
    }
    Ok(map)
}

/// Comma-separated list of values.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::InvalidConfig(format!("bad list element {t:?}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: Kind::Repairer,
            dtype: Dtype::F32,
            header: String::from("a = 1\nb = x\n"),
            tensors: vec![
                Tensor { name: String::from("w"), shape: vec![2, 3], data: vec![0.5, -1.0, 2.25, 0.0, 1e-3, 7.0] },
                Tensor { name: String::from("latent_mean"), shape: vec![1], data: vec![0.125] },
            ],
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let bytes = encode(&sample());
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        assert_eq!(back.header, sample().header);
    }

    #[test]
    fn truncation_is_detected_everywhere() {
        let bytes = encode(&sample());
        for cut in 0..bytes.len() {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert_eq!(err, Error::TruncatedCheckpoint, "cut at {cut}");
        }
    }

    #[test]
    fn version_mismatch_names_both() {
        let mut bytes = encode(&sample());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = decode(&bytes).unwrap_err();
        assert_eq!(err, Error::VersionMismatch { found: 7, expected: FORMAT_VERSION });
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&sample());
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::MalformedCheckpoint(_))));
    }

    #[test]
    fn kv_parsing() {
        let kv = parse_kv("# c\n a = 1 \n\nlist = 1, 2,3\n").unwrap();
        assert_eq!(kv.parse::<u32>("a").unwrap(), 1);
        assert_eq!(parse_list::<usize>(kv.get("list").unwrap()).unwrap(), vec![1, 2, 3]);
        assert!(kv.get("missing").is_err());
        assert!(parse_kv("novalue").is_err());
    }
}

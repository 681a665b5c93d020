//! Binary shard format for preprocessed example pairs.
//!
//! Layout (all fixed-width integers little-endian):
//!
//! ```text
//! magic "UL2S" | version u32 | example count u64
//! per example:
//!   denoiser tag u8
//!   input item count u32
//!   items: tag u8 (0 = token, 1 = image) + LEB128 id / fixture index
//!   target length u32 + LEB128 ids
//! ```
//!
//! Round-trips are bit-exact; truncation errors name the offending offset
//! and the expected versus actual byte counts.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ul2::{ExamplePair, PairTag, PipeItem};

const MAGIC: &[u8; 4] = b"UL2S";
const VERSION: u32 = 1;

fn push_varint(buf: &mut Vec<u8>, mut v: u32) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            buf.push(byte);
            return;
        }
        buf.push(byte | 0x80);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn need(&self, n: usize, what: &str) -> Result<()> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::format(format!(
                "shard truncated at offset {}: {what} needs {} bytes, file holds {}",
                self.offset,
                self.offset + n,
                self.bytes.len()
            )));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        self.need(1, what)?;
        let v = self.bytes[self.offset];
        self.offset += 1;
        Ok(v)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.need(4, what)?;
        let v = u32::from_le_bytes(self.bytes[self.offset..self.offset + 4].try_into().unwrap());
        self.offset += 4;
        Ok(v)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.need(8, what)?;
        let v = u64::from_le_bytes(self.bytes[self.offset..self.offset + 8].try_into().unwrap());
        self.offset += 8;
        Ok(v)
    }

    fn varint(&mut self, what: &str) -> Result<u32> {
        let mut v: u32 = 0;
        let mut shift = 0;
        loop {
            let byte = self.u8(what)?;
            if shift >= 32 || (shift == 28 && (byte & 0x7f) > 0x0f) {
                return Err(Error::format(format!(
                    "varint overflow at offset {} while reading {what}",
                    self.offset
                )));
            }
            v |= u32::from(byte & 0x7f) << shift;
            if byte & 0x80 == 0 {
                return Ok(v);
            }
            shift += 7;
        }
    }
}

pub fn encode_shard(pairs: &[ExamplePair]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(pairs.len() as u64).to_le_bytes());
    for pair in pairs {
        buf.push(pair.tag.to_byte());
        buf.extend_from_slice(&(pair.input.len() as u32).to_le_bytes());
        for item in &pair.input {
            match item {
                PipeItem::Token(t) => {
                    buf.push(0);
                    push_varint(&mut buf, *t);
                }
                PipeItem::ImageRef(i) => {
                    buf.push(1);
                    push_varint(&mut buf, *i);
                }
            }
        }
        buf.extend_from_slice(&(pair.target.len() as u32).to_le_bytes());
        for t in &pair.target {
            push_varint(&mut buf, *t);
        }
    }
    buf
}

pub fn decode_shard(bytes: &[u8]) -> Result<Vec<ExamplePair>> {
    let mut r = Reader { bytes, offset: 0 };
    r.need(4, "magic")?;
    if &bytes[0..4] != MAGIC {
        return Err(Error::format("bad shard magic"));
    }
    r.offset = 4;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(format!(
            "shard version {version}, expected {VERSION}"
        )));
    }
    let count = r.u64("example count")?;
    let mut pairs = Vec::with_capacity(count.min(1 << 20) as usize);
    for e in 0..count {
        let tag = PairTag::from_byte(r.u8("denoiser tag")?);
        let n_items = r.u32("input item count")?;
        let mut input = Vec::with_capacity(n_items as usize);
        for i in 0..n_items {
            let kind = r.u8("item kind")?;
            let v = r.varint("item payload")?;
            match kind {
                0 => input.push(PipeItem::Token(v)),
                1 => input.push(PipeItem::ImageRef(v)),
                other => {
                    return Err(Error::format(format!(
                        "example {e} item {i}: unknown item kind {other}"
                    )))
                }
            }
        }
        let n_target = r.u32("target length")?;
        let mut target = Vec::with_capacity(n_target as usize);
        for _ in 0..n_target {
            target.push(r.varint("target id")?);
        }
        pairs.push(ExamplePair { input, target, tag });
    }
    if r.offset != bytes.len() {
        return Err(Error::format(format!(
            "shard holds {} trailing bytes after the last example (offset {})",
            bytes.len() - r.offset,
            r.offset
        )));
    }
    Ok(pairs)
}

pub fn write_shard(path: &Path, pairs: &[ExamplePair]) -> Result<()> {
    let bytes = encode_shard(pairs);
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", path.display())))?;
    f.write_all(&bytes)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<Vec<ExamplePair>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    decode_shard(&bytes)
}

//! Byte encodings shared by the WAL, SSTs and the manifest.

use crate::memtable::Value;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: Vec<u8>,
    pub seq: u64,
    pub value: Value,
}

const PUT: u8 = 0;
const DELETE: u8 = 1;

pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

/// Bounds-checked little-endian reader.
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Decoder { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    pub fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    pub fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Option<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn encode_entry(out: &mut Vec<u8>, key: &[u8], seq: u64, value: &Value) {
    put_bytes(out, key);
    put_u64(out, seq);
    match value {
        Value::Put(v) => {
            out.push(PUT);
            put_bytes(out, v);
        }
        Value::Delete => {
            out.push(DELETE);
            put_u32(out, 0);
        }
    }
}

pub fn decode_entry(d: &mut Decoder<'_>) -> Option<Entry> {
    let key = d.bytes()?.to_vec();
    let seq = d.u64()?;
    let kind = d.u8()?;
    let v = d.bytes()?;
    let value = match kind {
        PUT => Value::Put(v.to_vec()),
        DELETE => Value::Delete,
        _ => return None,
    };
    Some(Entry { key, seq, value })
}

pub fn decode_entries(buf: &[u8]) -> Option<Vec<Entry>> {
    let mut d = Decoder::new(buf);
    let mut v = Vec::new();
    while !d.is_empty() {
        v.push(decode_entry(&mut d)?);
    }
    Some(v)
}

/// `[len u32][crc32 u32][payload]`.
pub fn frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 8);
    put_u32(&mut out, payload.len() as u32);
    put_u32(&mut out, crc32fast::hash(payload));
    out.extend_from_slice(payload);
    out
}

/// Splits a framed log into payloads. Stops at the first truncated or
/// corrupt record; the flag says whether the whole buffer was consumed.
pub fn unframe(buf: &[u8]) -> (Vec<&[u8]>, bool) {
    let mut d = Decoder::new(buf);
    let mut out = Vec::new();
    while !d.is_empty() {
        let (Some(len), Some(crc)) = (d.u32(), d.u32()) else {
            return (out, false);
        };
        match d.take(len as usize) {
            Some(p) if crc32fast::hash(p) == crc => out.push(p),
            _ => return (out, false),
        }
    }
    (out, true)
}

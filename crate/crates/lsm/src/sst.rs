//! Sorted table files: 4 KiB data blocks, an index block and a fixed
//! footer, each block covered by a CRC32.

use std::sync::Arc;

use tierkv_core::{IoContext, OpenFlags, TieredFs};

use crate::cache::BlockCache;
use crate::error::{Error, Result};
use crate::format::{decode_entries, encode_entry, put_bytes, put_u32, put_u64, Decoder, Entry};
use crate::memtable::Value;

const MAGIC: u64 = 0x7473_766b_7265_6974;
const FOOTER: usize = 32;
const WRITE_BUFFER: usize = 64 * 1024;

pub fn sst_name(number: u64) -> String {
    format!("{number:06}.sst")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SstMeta {
    pub number: u64,
    pub level: u32,
    pub min_key: Vec<u8>,
    pub max_key: Vec<u8>,
    pub entries: u64,
    pub size: u64,
}

impl SstMeta {
    pub fn overlaps(&self, min: &[u8], max: &[u8]) -> bool {
        self.min_key.as_slice() <= max && min <= self.max_key.as_slice()
    }
}

#[derive(Debug, Clone)]
struct IndexEntry {
    last_key: Vec<u8>,
    offset: u64,
    len: u32,
    crc: u32,
}

pub struct SstBuilder<'a> {
    fs: &'a TieredFs,
    fd: u64,
    number: u64,
    level: u32,
    block_size: usize,
    block: Vec<u8>,
    block_last: Vec<u8>,
    pending: Vec<u8>,
    offset: u64,
    index: Vec<IndexEntry>,
    min_key: Option<Vec<u8>>,
    entries: u64,
}

impl<'a> SstBuilder<'a> {
    pub fn create(fs: &'a TieredFs, number: u64, level: u32, ctx: IoContext, block_size: usize) -> Result<Self> {
        let fd = fs.open(&sst_name(number), OpenFlags::CREATE, Some(ctx))?;
        Ok(SstBuilder {
            fs,
            fd,
            number,
            level,
            block_size,
            block: Vec::with_capacity(block_size + 256),
            block_last: Vec::new(),
            pending: Vec::with_capacity(WRITE_BUFFER),
            offset: 0,
            index: Vec::new(),
            min_key: None,
            entries: 0,
        })
    }

    /// Bytes written or buffered so far.
    pub fn estimated_size(&self) -> u64 {
        self.offset + self.pending.len() as u64 + self.block.len() as u64
    }

    /// Keys must arrive in strictly ascending order.
    pub fn add(&mut self, key: &[u8], seq: u64, value: &Value) -> Result<()> {
        debug_assert!(self.min_key.is_none() || key > self.block_last.as_slice());
        if self.min_key.is_none() {
            self.min_key = Some(key.to_vec());
        }
        encode_entry(&mut self.block, key, seq, value);
        self.block_last.clear();
        self.block_last.extend_from_slice(key);
        self.entries += 1;
        if self.block.len() >= self.block_size {
            self.finish_block()?;
        }
        Ok(())
    }

    fn finish_block(&mut self) -> Result<()> {
        if self.block.is_empty() {
            return Ok(());
        }
        let offset = self.offset + self.pending.len() as u64;
        self.index.push(IndexEntry {
            last_key: self.block_last.clone(),
            offset,
            len: self.block.len() as u32,
            crc: crc32fast::hash(&self.block),
        });
        self.pending.extend_from_slice(&self.block);
        self.block.clear();
        if self.pending.len() >= WRITE_BUFFER {
            self.flush_pending()?;
        }
        Ok(())
    }

    fn flush_pending(&mut self) -> Result<()> {
        if !self.pending.is_empty() {
            self.fs.write(self.fd, self.offset, &self.pending)?;
            self.offset += self.pending.len() as u64;
            self.pending.clear();
        }
        Ok(())
    }

    /// Writes index and footer, syncs and closes the file.
    pub fn finish(mut self) -> Result<SstMeta> {
        self.finish_block()?;
        let index_offset = self.offset + self.pending.len() as u64;
        let mut idx = Vec::new();
        put_u32(&mut idx, self.index.len() as u32);
        for e in &self.index {
            put_bytes(&mut idx, &e.last_key);
            put_u64(&mut idx, e.offset);
            put_u32(&mut idx, e.len);
            put_u32(&mut idx, e.crc);
        }
        let index_crc = crc32fast::hash(&idx);
        self.pending.extend_from_slice(&idx);
        put_u64(&mut self.pending, index_offset);
        put_u32(&mut self.pending, idx.len() as u32);
        put_u32(&mut self.pending, index_crc);
        put_u64(&mut self.pending, self.entries);
        put_u64(&mut self.pending, MAGIC);
        self.flush_pending()?;
        self.fs.fsync(self.fd)?;
        self.fs.close(self.fd)?;
        Ok(SstMeta {
            number: self.number,
            level: self.level,
            min_key: self.min_key.take().unwrap_or_default(),
            max_key: std::mem::take(&mut self.block_last),
            entries: self.entries,
            size: self.offset,
        })
    }

    /// Closes and deletes the partial file.
    pub fn abandon(self) {
        let _ = self.fs.close(self.fd);
        let _ = self.fs.unlink(&sst_name(self.number));
    }
}

/// An open SST. The descriptor is closed on drop.
pub struct Table {
    fs: Arc<TieredFs>,
    /// `meta.level` is the level at open time; the version holds the
    /// current one.
    pub meta: SstMeta,
    fd: u64,
    index: Vec<IndexEntry>,
}

impl std::fmt::Debug for Table {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Table").field("meta", &self.meta).finish()
    }
}

impl Table {
    pub fn open(fs: Arc<TieredFs>, meta: SstMeta) -> Result<Arc<Self>> {
        let name = sst_name(meta.number);
        let fd = fs.open(&name, OpenFlags::READ, None)?;
        let t = Self::load_index(&fs, fd, &name, meta.size);
        match t {
            Ok(index) => Ok(Arc::new(Table { fs, meta, fd, index })),
            Err(e) => {
                let _ = fs.close(fd);
                Err(e)
            }
        }
    }

    fn load_index(fs: &TieredFs, fd: u64, name: &str, expect: u64) -> Result<Vec<IndexEntry>> {
        let size = fs.size(name)?;
        if size != expect || size < FOOTER as u64 {
            return Err(Error::corrupt(name, format!("size {size}, manifest says {expect}")));
        }
        let footer = fs.read(fd, size - FOOTER as u64, FOOTER)?;
        let mut d = Decoder::new(&footer);
        let (off, len, crc, _entries, magic) = (
            d.u64().unwrap(),
            d.u32().unwrap(),
            d.u32().unwrap(),
            d.u64().unwrap(),
            d.u64().unwrap(),
        );
        if magic != MAGIC {
            return Err(Error::corrupt(name, "bad magic"));
        }
        let idx = fs.read(fd, off, len as usize)?;
        if crc32fast::hash(&idx) != crc {
            return Err(Error::corrupt(name, "index checksum mismatch"));
        }
        let bad = || Error::corrupt(name, "malformed index");
        let mut d = Decoder::new(&idx);
        let n = d.u32().ok_or_else(bad)?;
        let mut index = Vec::with_capacity(n as usize);
        for _ in 0..n {
            index.push(IndexEntry {
                last_key: d.bytes().ok_or_else(bad)?.to_vec(),
                offset: d.u64().ok_or_else(bad)?,
                len: d.u32().ok_or_else(bad)?,
                crc: d.u32().ok_or_else(bad)?,
            });
        }
        Ok(index)
    }

    pub fn name(&self) -> String {
        sst_name(self.meta.number)
    }

    fn block_for(&self, key: &[u8]) -> usize {
        self.index.partition_point(|e| e.last_key.as_slice() < key)
    }

    fn decode_block(&self, i: usize, buf: &[u8]) -> Result<Vec<Entry>> {
        if crc32fast::hash(buf) != self.index[i].crc {
            return Err(Error::corrupt(self.name(), format!("block {i} checksum mismatch")));
        }
        decode_entries(buf).ok_or_else(|| Error::corrupt(self.name(), format!("block {i} malformed")))
    }

    /// Reads block `i` through the block cache.
    fn block(&self, i: usize, cache: &BlockCache) -> Result<Vec<Entry>> {
        let key = (self.meta.number, i as u32);
        let raw = match cache.get(key) {
            Some(b) => b,
            None => {
                let e = &self.index[i];
                let b = Arc::new(self.fs.read(self.fd, e.offset, e.len as usize)?);
                cache.insert(key, b.clone());
                b
            }
        };
        self.decode_block(i, &raw)
    }

    /// Reads blocks `from..to` with one device request, bypassing the cache.
    fn blocks_direct(&self, from: usize, to: usize) -> Result<Vec<Entry>> {
        let start = self.index[from].offset;
        let end = self.index[to - 1].offset + self.index[to - 1].len as u64;
        let buf = self.fs.read(self.fd, start, (end - start) as usize)?;
        let mut out = Vec::new();
        for i in from..to {
            let e = &self.index[i];
            let s = (e.offset - start) as usize;
            out.extend(self.decode_block(i, &buf[s..s + e.len as usize])?);
        }
        Ok(out)
    }

    pub fn get(&self, key: &[u8], cache: &BlockCache) -> Result<Option<(u64, Value)>> {
        if key < self.meta.min_key.as_slice() || key > self.meta.max_key.as_slice() {
            return Ok(None);
        }
        let i = self.block_for(key);
        if i >= self.index.len() {
            return Ok(None);
        }
        let entries = self.block(i, cache)?;
        Ok(entries
            .binary_search_by(|e| e.key.as_slice().cmp(key))
            .ok()
            .map(|j| (entries[j].seq, entries[j].value.clone())))
    }
}

impl Drop for Table {
    fn drop(&mut self) {
        let _ = self.fs.close(self.fd);
    }
}

/// How a [`TableIter`] fetches blocks.
#[derive(Debug, Clone, Copy)]
pub enum ReadMode {
    /// One block per request through the block cache.
    Cached,
    /// `n` blocks per request, not cached.
    Bulk(usize),
}

pub struct TableIter {
    table: Arc<Table>,
    next_block: usize,
    buf: std::vec::IntoIter<Entry>,
    mode: ReadMode,
    cache: Arc<BlockCache>,
    start: Option<Vec<u8>>,
}

impl TableIter {
    pub fn new(table: Arc<Table>, start: Option<&[u8]>, mode: ReadMode, cache: Arc<BlockCache>) -> Self {
        let next_block = start.map_or(0, |k| table.block_for(k));
        TableIter {
            table,
            next_block,
            buf: Vec::new().into_iter(),
            mode,
            cache,
            start: start.map(<[u8]>::to_vec),
        }
    }

    pub fn next_entry(&mut self) -> Result<Option<Entry>> {
        loop {
            if let Some(e) = self.buf.next() {
                if let Some(s) = &self.start {
                    if e.key < *s {
                        continue;
                    }
                    self.start = None;
                }
                return Ok(Some(e));
            }
            let n = self.table.index.len();
            if self.next_block >= n {
                return Ok(None);
            }
            let entries = match self.mode {
                ReadMode::Cached => self.table.block(self.next_block, &self.cache)?,
                ReadMode::Bulk(k) => {
                    let to = (self.next_block + k.max(1)).min(n);
                    let v = self.table.blocks_direct(self.next_block, to)?;
                    self.next_block = to - 1;
                    v
                }
            };
            self.next_block += 1;
            self.buf = entries.into_iter();
        }
    }
}

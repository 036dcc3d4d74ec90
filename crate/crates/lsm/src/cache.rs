//! Block cache keyed by SST file number, so a cached copy of a file on a
//! faster tier shares entries with its home file.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use lru::LruCache;
use parking_lot::Mutex;

pub type BlockKey = (u64, u32);

#[derive(Debug)]
pub struct BlockCache {
    capacity: usize,
    inner: Mutex<Inner>,
    hits: AtomicU64,
    misses: AtomicU64,
}

#[derive(Debug)]
struct Inner {
    lru: LruCache<BlockKey, Arc<Vec<u8>>>,
    bytes: usize,
}

impl BlockCache {
    pub fn new(capacity: usize) -> Self {
        BlockCache {
            capacity,
            inner: Mutex::new(Inner {
                lru: LruCache::unbounded(),
                bytes: 0,
            }),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn get(&self, key: BlockKey) -> Option<Arc<Vec<u8>>> {
        if self.capacity == 0 {
            return None;
        }
        let v = self.inner.lock().lru.get(&key).cloned();
        match &v {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        v
    }

    pub fn insert(&self, key: BlockKey, block: Arc<Vec<u8>>) {
        if self.capacity == 0 || block.len() > self.capacity {
            return;
        }
        let mut g = self.inner.lock();
        let add = block.len();
        if let Some(old) = g.lru.put(key, block) {
            g.bytes -= old.len();
        }
        g.bytes += add;
        while g.bytes > self.capacity {
            match g.lru.pop_lru() {
                Some((_, b)) => g.bytes -= b.len(),
                None => break,
            }
        }
    }

    pub fn bytes(&self) -> usize {
        self.inner.lock().bytes
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

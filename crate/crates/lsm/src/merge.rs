use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use crate::cache::BlockCache;
use crate::error::Result;
use crate::format::Entry;
use crate::sst::{ReadMode, Table, TableIter};

pub enum Source {
    Entries(std::vec::IntoIter<Entry>),
    Table(TableIter),
    /// Disjoint tables of one level, opened one at a time.
    Level {
        tables: std::vec::IntoIter<Arc<Table>>,
        cur: Option<TableIter>,
        start: Option<Vec<u8>>,
        mode: ReadMode,
        cache: Arc<BlockCache>,
    },
}

impl Source {
    pub fn level(tables: Vec<Arc<Table>>, start: Option<&[u8]>, mode: ReadMode, cache: Arc<BlockCache>) -> Self {
        Source::Level {
            tables: tables.into_iter(),
            cur: None,
            start: start.map(<[u8]>::to_vec),
            mode,
            cache,
        }
    }

    fn next(&mut self) -> Result<Option<Entry>> {
        match self {
            Source::Entries(it) => Ok(it.next()),
            Source::Table(t) => t.next_entry(),
            Source::Level {
                tables,
                cur,
                start,
                mode,
                cache,
            } => loop {
                if let Some(it) = cur {
                    if let Some(e) = it.next_entry()? {
                        return Ok(Some(e));
                    }
                }
                let Some(t) = tables.next() else {
                    return Ok(None);
                };
                *cur = Some(TableIter::new(t, start.as_deref(), *mode, cache.clone()));
            },
        }
    }
}

struct Item {
    e: Entry,
    src: usize,
}

// Max-heap order: smallest key first, newest version first within a key.
impl Ord for Item {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .e
            .key
            .cmp(&self.e.key)
            .then(self.e.seq.cmp(&other.e.seq))
    }
}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Item {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Item {}

/// K-way merge yielding the newest version of each key, tombstones
/// included.
pub struct MergeIter {
    sources: Vec<Source>,
    heap: BinaryHeap<Item>,
}

impl MergeIter {
    pub fn new(mut sources: Vec<Source>) -> Result<Self> {
        let mut heap = BinaryHeap::new();
        for (i, s) in sources.iter_mut().enumerate() {
            if let Some(e) = s.next()? {
                heap.push(Item { e, src: i });
            }
        }
        Ok(MergeIter { sources, heap })
    }

    fn pop(&mut self) -> Result<Option<Entry>> {
        let Some(Item { e, src }) = self.heap.pop() else {
            return Ok(None);
        };
        if let Some(n) = self.sources[src].next()? {
            self.heap.push(Item { e: n, src });
        }
        Ok(Some(e))
    }

    pub fn next_newest(&mut self) -> Result<Option<Entry>> {
        let Some(e) = self.pop()? else {
            return Ok(None);
        };
        while self.heap.peek().is_some_and(|i| i.e.key == e.key) {
            self.pop()?;
        }
        Ok(Some(e))
    }
}

use std::collections::BTreeMap;
use std::ops::Bound;

use crate::format::Entry;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Put(Vec<u8>),
    Delete,
}

impl Value {
    pub fn as_put(&self) -> Option<&[u8]> {
        match self {
            Value::Put(v) => Some(v),
            Value::Delete => None,
        }
    }

    fn len(&self) -> usize {
        self.as_put().map_or(0, <[u8]>::len)
    }
}

/// Per-entry bookkeeping charged on top of key and value bytes.
pub const ENTRY_OVERHEAD: usize = 16;

#[derive(Debug, Default)]
pub struct Memtable {
    map: BTreeMap<Vec<u8>, (u64, Value)>,
    bytes: usize,
}

impl Memtable {
    pub fn new() -> Self {
        Self::default()
    }

    fn charge(key: &[u8], v: &Value) -> usize {
        key.len() + v.len() + ENTRY_OVERHEAD
    }

    pub fn insert(&mut self, key: Vec<u8>, seq: u64, value: Value) {
        let add = Self::charge(&key, &value);
        if let Some((_, old)) = self.map.get(&key) {
            self.bytes -= Self::charge(&key, old);
        }
        self.bytes += add;
        self.map.insert(key, (seq, value));
    }

    pub fn get(&self, key: &[u8]) -> Option<(u64, &Value)> {
        self.map.get(key).map(|(s, v)| (*s, v))
    }

    pub fn size_bytes(&self) -> usize {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn max_seq(&self) -> u64 {
        self.map.values().map(|(s, _)| *s).max().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u8], u64, &Value)> {
        self.map.iter().map(|(k, (s, v))| (k.as_slice(), *s, v))
    }

    pub fn range_from<'a>(&'a self, start: &[u8]) -> impl Iterator<Item = Entry> + 'a {
        self.map
            .range::<[u8], _>((Bound::Included(start), Bound::Unbounded))
            .map(|(k, (s, v))| Entry {
                key: k.clone(),
                seq: *s,
                value: v.clone(),
            })
    }
}

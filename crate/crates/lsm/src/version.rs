use std::sync::Arc;

use crate::sst::Table;

/// Immutable set of live tables. Level 0 is newest first; deeper levels
/// are sorted by key.
#[derive(Debug, Clone)]
pub struct Version {
    pub levels: Vec<Vec<Arc<Table>>>,
}

impl Version {
    pub fn new(num_levels: usize) -> Self {
        Version {
            levels: vec![Vec::new(); num_levels],
        }
    }

    pub fn apply(&self, deleted: &[u64], added: Vec<(usize, Arc<Table>)>) -> Version {
        let mut v = self.clone();
        for l in v.levels.iter_mut() {
            l.retain(|t| !deleted.contains(&t.meta.number));
        }
        for (l, t) in added {
            v.levels[l].push(t);
        }
        v.sort();
        v
    }

    pub(crate) fn sort(&mut self) {
        self.levels[0].sort_by(|a, b| b.meta.number.cmp(&a.meta.number));
        for l in self.levels.iter_mut().skip(1) {
            l.sort_by(|a, b| a.meta.min_key.cmp(&b.meta.min_key));
        }
    }

    pub fn level_bytes(&self, l: usize) -> u64 {
        self.levels[l].iter().map(|t| t.meta.size).sum()
    }

    pub fn overlapping(&self, l: usize, min: &[u8], max: &[u8]) -> Vec<Arc<Table>> {
        self.levels
            .get(l)
            .map(|v| v.iter().filter(|t| t.meta.overlaps(min, max)).cloned().collect())
            .unwrap_or_default()
    }

    /// The table of level `l >= 1` whose range contains `key`.
    pub fn find(&self, l: usize, key: &[u8]) -> Option<&Arc<Table>> {
        let files = &self.levels[l];
        let i = files.partition_point(|t| t.meta.max_key.as_slice() < key);
        files.get(i).filter(|t| t.meta.min_key.as_slice() <= key)
    }

    /// Tables of level `l` that may hold keys at or after `start`.
    pub fn from_key(&self, l: usize, start: &[u8]) -> Vec<Arc<Table>> {
        let files = &self.levels[l];
        let i = files.partition_point(|t| t.meta.max_key.as_slice() < start);
        files[i..].to_vec()
    }

    /// Level-disjointness and ordering check.
    pub fn check(&self) -> Result<(), String> {
        for (l, files) in self.levels.iter().enumerate().skip(1) {
            for w in files.windows(2) {
                if w[0].meta.max_key >= w[1].meta.min_key {
                    return Err(format!(
                        "level {l}: tables {} and {} overlap",
                        w[0].meta.number, w[1].meta.number
                    ));
                }
            }
        }
        for t in self.levels.iter().flatten() {
            if t.meta.min_key > t.meta.max_key {
                return Err(format!("table {} has inverted bounds", t.meta.number));
            }
        }
        Ok(())
    }

    pub fn num_files(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }
}

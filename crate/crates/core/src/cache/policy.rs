use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use super::{BgSlot, CacheCopyTask, TaskReason};
use crate::context::{scoped, IoContext};
use crate::device::{Locator, Tier};
use crate::error::{Error, Result};
use crate::hierarchy::{EventKind, Hierarchy};
use crate::namespace::{FileClass, FileEntry, Replica};
use crate::TierId;

/// Access count a file keeps once its copy completes. A copy only displaces
/// cached files colder than this.
pub fn aged(count: f64) -> f64 {
    count / 2.0
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CopyOutcome {
    Copied,
    Aborted(String),
}

/// Copies `src` into `dst` chunk by chunk. Returns `Ok(false)` if `abort`
/// fired. A revoked slot pauses the copy until it can be held again.
pub(crate) fn copy_replica(
    h: &Hierarchy,
    src: &Replica,
    dst: &Tier,
    dst_loc: &Locator,
    chunk: usize,
    slot: &mut BgSlot,
    abort: &dyn Fn() -> bool,
) -> Result<bool> {
    let size = src.tier().size(src.locator())?;
    let mut off = 0u64;
    while off < size {
        if abort() || h.is_shutting_down() {
            return Ok(false);
        }
        while slot.is_revoked() {
            if abort() || h.is_shutting_down() || !h.background_running() {
                return Ok(false);
            }
            slot.reacquire(Duration::from_millis(20));
        }
        let n = chunk.min((size - off) as usize);
        let data = src.read(off, n)?;
        if data.is_empty() {
            break;
        }
        dst.write(dst_loc, off, &data)?;
        off += data.len() as u64;
    }
    Ok(true)
}

impl Hierarchy {
    /// Foreground read bookkeeping: file hotness plus the hit/miss window of
    /// every tier at or above the one that served the read.
    pub fn record_access(&self, entry: &FileEntry, served: TierId) {
        entry.touch(self.ns.next_tick());
        for t in 0..=served.min(self.windows.len() - 1) {
            self.windows[t].record(t == served);
        }
    }

    /// Halves the file's access count; applied when a copy completes.
    pub fn age_on_copy(&self, entry: &FileEntry) -> f64 {
        entry.update_access(aged)
    }

    /// Bytes the cache on `t` may occupy right now: the scheme's budget,
    /// further limited so cached copies never push home data under the
    /// upper free-space threshold.
    pub fn cache_allowance(&self, t: TierId) -> u64 {
        if !self.cfg.cache_enabled || self.is_last(t) {
            return 0;
        }
        let tier = &self.tiers[t];
        let headroom = tier.free() as i64 - self.upper_bytes(t) as i64;
        let a = (tier.cache_used() as i64 + headroom).max(0) as u64;
        a.min(self.scheme().cache_budget(t))
    }

    /// Files with a cached copy on `t`, with the copy's size.
    pub fn cached_on(&self, t: TierId) -> Vec<(Arc<FileEntry>, u64)> {
        self.ns
            .entries()
            .into_iter()
            .filter_map(|e| {
                let size = {
                    let st = e.state();
                    let c = st.cached.as_ref()?;
                    if c.tier_id() != t {
                        return None;
                    }
                    c.tier().size(c.locator()).unwrap_or(0)
                };
                Some((e, size))
            })
            .collect()
    }

    fn coldest_first(&self, t: TierId) -> Vec<(Arc<FileEntry>, u64)> {
        let mut v = self.cached_on(t);
        v.sort_by(|a, b| {
            a.0.access_count()
                .total_cmp(&b.0.access_count())
                .then_with(|| a.0.path().cmp(b.0.path()))
        });
        v
    }

    /// Removes cached copies, coldest first, until usage fits the
    /// allowance. Returns the number of copies removed.
    pub fn evict_for_budget(&self, t: TierId) -> usize {
        let allowance = self.cache_allowance(t);
        let mut used = self.tiers[t].cache_used();
        let mut evicted = 0;
        for (e, size) in self.coldest_first(t) {
            if used <= allowance {
                break;
            }
            if self.ns.drop_cached(&e).is_some() {
                used = used.saturating_sub(size);
                evicted += 1;
                self.stats.evictions.fetch_add(1, Ordering::Relaxed);
                self.log(EventKind::Evicted, t, Some(e.path()));
            }
        }
        evicted
    }

    /// Evicts copies colder than `count` until `size` more bytes fit.
    fn make_cache_room(&self, t: TierId, size: u64, count: f64) -> bool {
        let allowance = self.cache_allowance(t);
        let mut used = self.tiers[t].cache_used();
        if used + size <= allowance {
            return true;
        }
        let colder: Vec<_> = self
            .coldest_first(t)
            .into_iter()
            .filter(|(e, _)| e.access_count() < count)
            .collect();
        let reclaimable: u64 = colder.iter().map(|(_, s)| s).sum();
        if used.saturating_sub(reclaimable) + size > allowance {
            return false;
        }
        for (e, s) in colder {
            if used + size <= allowance {
                break;
            }
            if self.ns.drop_cached(&e).is_some() {
                used = used.saturating_sub(s);
                self.stats.evictions.fetch_add(1, Ordering::Relaxed);
                self.log(EventKind::Evicted, t, Some(e.path()));
            }
        }
        true
    }

    /// One monitor step for the cache on tier `t`: if the tier's hit ratio
    /// is under the threshold, pins and returns the hottest uncached SST
    /// whose home is `t + 1`, provided it fits.
    pub fn monitor_tick(&self, t: TierId) -> Option<CacheCopyTask> {
        if !self.cfg.cache_enabled || self.is_last(t) || !self.windows[t].below_threshold() {
            return None;
        }
        let src = t + 1;
        let mut best: Option<(f64, Arc<FileEntry>, u64, u64)> = None;
        for e in self.ns.entries() {
            if e.class() != FileClass::Sst {
                continue;
            }
            let count = e.access_count();
            if count <= 0.0 {
                continue;
            }
            let (size, generation) = {
                let st = e.state();
                if st.unlinked
                    || st.pinned
                    || !st.sealed
                    || st.cached.is_some()
                    || st.home.tier_id() != src
                {
                    continue;
                }
                (st.size, st.generation)
            };
            let better = match &best {
                None => true,
                Some((c, b, _, _)) => count > *c || (count == *c && e.path() < b.path()),
            };
            if better {
                best = Some((count, e, size, generation));
            }
        }
        let (count, entry, size, generation) = best?;
        let allowance = self.cache_allowance(t);
        let used = self.tiers[t].cache_used();
        if used + size > allowance {
            let colder: u64 = self
                .cached_on(t)
                .iter()
                .filter(|(e, _)| e.access_count() < aged(count))
                .map(|(_, s)| s)
                .sum();
            if used.saturating_sub(colder) + size > allowance {
                return None;
            }
        }
        if !entry.try_pin() {
            return None;
        }
        self.stats.cache_enqueued.fetch_add(1, Ordering::Relaxed);
        Some(CacheCopyTask {
            logical_path: entry.path().to_string(),
            src_tier: src,
            dst_tier: t,
            reason: TaskReason::HitRatio,
            enqueue_tick: self.ns.next_tick(),
            entry,
            generation,
        })
    }

    /// Copies the task's file into the cache area of `dst_tier`. The caller
    /// holds `slot`, a cache-copy writer slot on that tier. Unpins the file.
    pub fn execute_cache_copy(&self, task: &CacheCopyTask, slot: &mut BgSlot) -> Result<CopyOutcome> {
        let _ctx = scoped(IoContext::CacheCopy);
        let out = self.cache_copy_inner(task, slot);
        task.entry.unpin();
        let t = task.dst_tier;
        match &out {
            Ok(CopyOutcome::Copied) => {
                self.stats.cache_done.fetch_add(1, Ordering::Relaxed);
                self.log(EventKind::CacheCopied, t, Some(&task.logical_path));
            }
            _ => {
                self.stats.cache_aborted.fetch_add(1, Ordering::Relaxed);
                self.log(EventKind::CacheAborted, t, Some(&task.logical_path));
            }
        }
        out
    }

    fn cache_copy_inner(&self, task: &CacheCopyTask, slot: &mut BgSlot) -> Result<CopyOutcome> {
        let entry = &task.entry;
        let changed = || {
            let st = entry.state();
            st.unlinked || st.generation != task.generation
        };
        let home = {
            let st = entry.state();
            if st.unlinked || st.generation != task.generation || st.cached.is_some() {
                return Ok(CopyOutcome::Aborted("file changed before copy".into()));
            }
            st.home.clone()
        };
        if home.tier_id() != task.src_tier {
            return Ok(CopyOutcome::Aborted("file moved before copy".into()));
        }
        let size = home.tier().size(home.locator())?;
        if !self.make_cache_room(task.dst_tier, size, aged(entry.access_count())) {
            return Ok(CopyOutcome::Aborted("no cache room".into()));
        }
        let dst = self.tiers[task.dst_tier].clone();
        let loc = Locator::cache(home.locator().name.clone());
        if dst.exists(&loc) {
            return Ok(CopyOutcome::Aborted("copy already in progress".into()));
        }
        dst.create(&loc)?;
        let replica = Replica::new(dst.clone(), loc.clone());
        let copied = match copy_replica(self, &home, &dst, &loc, self.cfg.copy_chunk, slot, &changed) {
            Ok(c) => c,
            Err(e) => {
                replica.doom();
                return match e {
                    Error::TierFull { .. } => Ok(CopyOutcome::Aborted(e.to_string())),
                    e => Err(e),
                };
            }
        };
        if !copied {
            replica.doom();
            return Ok(CopyOutcome::Aborted("source changed during copy".into()));
        }
        if !self.ns.set_cached(entry, replica, task.generation) {
            return Ok(CopyOutcome::Aborted("source changed during copy".into()));
        }
        self.age_on_copy(entry);
        self.evict_for_budget(task.dst_tier);
        Ok(CopyOutcome::Copied)
    }

    /// Runs a monitor tick and, if it yields a task, executes it inline when
    /// a cache-copy slot is free. Returns the copied path.
    pub fn cache_step(&self, t: TierId) -> Result<Option<String>> {
        let Some(task) = self.monitor_tick(t) else {
            return Ok(None);
        };
        let Some(mut slot) = self.registry.try_acquire(t, super::WriterSource::CacheCopy) else {
            task.entry.unpin();
            return Ok(None);
        };
        match self.execute_cache_copy(&task, &mut slot)? {
            CopyOutcome::Copied => Ok(Some(task.logical_path)),
            CopyOutcome::Aborted(_) => Ok(None),
        }
    }
}

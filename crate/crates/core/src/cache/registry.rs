use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use crate::TierId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WriterSource {
    Wal,
    Flush,
    Compaction,
    CacheCopy,
    Migration,
}

impl WriterSource {
    pub fn is_background(self) -> bool {
        matches!(self, WriterSource::CacheCopy | WriterSource::Migration)
    }
}

/// Active writers on one tier, by source.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WriterCounts {
    pub wal: u32,
    pub flush: u32,
    pub compaction: u32,
    pub cache_copy: u32,
    pub migration: u32,
    /// Forced migrations; also included in `migration`.
    pub forced: u32,
}

impl WriterCounts {
    pub fn total(&self) -> u32 {
        self.wal + self.flush + self.compaction + self.cache_copy + self.migration
    }

    /// Writers issued by the KVS itself.
    pub fn kvs(&self) -> u32 {
        self.wal + self.flush + self.compaction
    }

    pub fn background(&self) -> u32 {
        self.cache_copy + self.migration
    }

    pub fn get(&self, src: WriterSource) -> u32 {
        match src {
            WriterSource::Wal => self.wal,
            WriterSource::Flush => self.flush,
            WriterSource::Compaction => self.compaction,
            WriterSource::CacheCopy => self.cache_copy,
            WriterSource::Migration => self.migration,
        }
    }

    fn slot(&mut self, src: WriterSource) -> &mut u32 {
        match src {
            WriterSource::Wal => &mut self.wal,
            WriterSource::Flush => &mut self.flush,
            WriterSource::Compaction => &mut self.compaction,
            WriterSource::CacheCopy => &mut self.cache_copy,
            WriterSource::Migration => &mut self.migration,
        }
    }

    fn inc(&mut self, src: WriterSource) {
        *self.slot(src) += 1;
    }

    fn dec(&mut self, src: WriterSource) {
        let s = self.slot(src);
        debug_assert!(*s > 0, "writer count underflow for {src:?}");
        *s = s.saturating_sub(1);
    }
}

#[derive(Debug)]
struct Slot {
    id: u64,
    src: WriterSource,
    revoked: Arc<AtomicBool>,
}

#[derive(Debug, Default)]
struct TierState {
    counts: WriterCounts,
    slots: Vec<Slot>,
    forced_epoch: u64,
}

impl TierState {
    fn unforced_background(&self) -> u32 {
        self.counts.background() - self.counts.forced
    }
}

#[derive(Debug)]
struct TierWriters {
    parallelism: u32,
    st: Mutex<TierState>,
    cv: Condvar,
}

impl TierWriters {
    fn allowed_background(&self, c: &WriterCounts) -> u32 {
        self.parallelism.saturating_sub(c.kvs())
    }
}

/// Per-tier live writer counts that cap cache-copy and migration
/// parallelism at what the device supports.
///
/// Background writers hold revocable slots: when a KVS writer arrives and
/// the cap would be exceeded, the newest background slots are withdrawn and
/// their owners stop at their next chunk boundary.
#[derive(Debug)]
pub struct WriterRegistry {
    tiers: Vec<TierWriters>,
    next_id: AtomicU64,
}

impl WriterRegistry {
    pub fn new(parallelism: &[u32]) -> Arc<Self> {
        Arc::new(WriterRegistry {
            tiers: parallelism
                .iter()
                .map(|&p| TierWriters {
                    parallelism: p,
                    st: Mutex::new(TierState::default()),
                    cv: Condvar::new(),
                })
                .collect(),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn num_tiers(&self) -> usize {
        self.tiers.len()
    }

    pub fn max_parallelism(&self, tier: TierId) -> u32 {
        self.tiers[tier].parallelism
    }

    pub fn counts(&self, tier: TierId) -> WriterCounts {
        self.tiers[tier].st.lock().counts
    }

    /// Counts together with the forced-migration epoch, taken atomically.
    pub fn snapshot(&self, tier: TierId) -> (WriterCounts, u64) {
        let st = self.tiers[tier].st.lock();
        (st.counts, st.forced_epoch)
    }

    /// `max(0, P - (wal + flush + compaction + migration))`.
    pub fn cache_worker_budget(&self, tier: TierId) -> u32 {
        let t = &self.tiers[tier];
        let c = t.st.lock().counts;
        t.parallelism
            .saturating_sub(c.kvs() + c.migration)
    }

    /// Migration threads allowed into `dst`, bounded by the pool size.
    pub fn migration_worker_budget(&self, dst: TierId, pool: u32) -> u32 {
        let t = &self.tiers[dst];
        let c = t.st.lock().counts;
        pool.min(t.parallelism.saturating_sub(c.kvs() + c.cache_copy))
    }

    /// Registers a KVS writer. Never blocks; may revoke background slots.
    pub fn register(self: &Arc<Self>, tier: TierId, src: WriterSource) -> WriterGuard {
        assert!(!src.is_background(), "background writers use acquire");
        let t = &self.tiers[tier];
        {
            let mut st = t.st.lock();
            st.counts.inc(src);
            let allowed = t.allowed_background(&st.counts);
            while st.unforced_background() > allowed {
                let Some(slot) = st.slots.pop() else { break };
                slot.revoked.store(true, Ordering::Release);
                st.counts.dec(slot.src);
            }
        }
        WriterGuard {
            reg: self.clone(),
            tier,
            src,
        }
    }

    fn grant(&self, tier: TierId, src: WriterSource, st: &mut TierState) -> Option<(u64, Arc<AtomicBool>)> {
        let t = &self.tiers[tier];
        if st.unforced_background() + 1 > t.allowed_background(&st.counts) {
            return None;
        }
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let revoked = Arc::new(AtomicBool::new(false));
        st.counts.inc(src);
        st.slots.push(Slot {
            id,
            src,
            revoked: revoked.clone(),
        });
        Some((id, revoked))
    }

    /// Takes a background slot if one is free right now.
    pub fn try_acquire(self: &Arc<Self>, tier: TierId, src: WriterSource) -> Option<BgSlot> {
        assert!(src.is_background());
        let mut st = self.tiers[tier].st.lock();
        let (id, revoked) = self.grant(tier, src, &mut st)?;
        Some(BgSlot {
            reg: self.clone(),
            tier,
            src,
            id,
            revoked,
            forced: false,
        })
    }

    /// Waits up to `timeout` for a background slot.
    pub fn acquire(
        self: &Arc<Self>,
        tier: TierId,
        src: WriterSource,
        timeout: Duration,
    ) -> Option<BgSlot> {
        assert!(src.is_background());
        let deadline = Instant::now() + timeout;
        let t = &self.tiers[tier];
        let mut st = t.st.lock();
        loop {
            if let Some((id, revoked)) = self.grant(tier, src, &mut st) {
                return Some(BgSlot {
                    reg: self.clone(),
                    tier,
                    src,
                    id,
                    revoked,
                    forced: false,
                });
            }
            if t.cv.wait_until(&mut st, deadline).timed_out() {
                return None;
            }
        }
    }

    /// Slot for a forced migration; exempt from the cap.
    pub fn acquire_forced(self: &Arc<Self>, tier: TierId) -> BgSlot {
        let mut st = self.tiers[tier].st.lock();
        st.counts.inc(WriterSource::Migration);
        st.counts.forced += 1;
        st.forced_epoch += 1;
        BgSlot {
            reg: self.clone(),
            tier,
            src: WriterSource::Migration,
            id: 0,
            revoked: Arc::new(AtomicBool::new(false)),
            forced: true,
        }
    }

    fn release_kvs(&self, tier: TierId, src: WriterSource) {
        let t = &self.tiers[tier];
        t.st.lock().counts.dec(src);
        t.cv.notify_all();
    }

    fn release_slot(&self, slot: &BgSlot) {
        let t = &self.tiers[slot.tier];
        let mut st = t.st.lock();
        if slot.forced {
            st.counts.dec(WriterSource::Migration);
            st.counts.forced -= 1;
            st.forced_epoch += 1;
        } else if let Some(i) = st.slots.iter().position(|s| s.id == slot.id) {
            st.slots.remove(i);
            st.counts.dec(slot.src);
        }
        drop(st);
        t.cv.notify_all();
    }
}

/// A registered KVS writer; unregisters on drop.
#[derive(Debug)]
pub struct WriterGuard {
    reg: Arc<WriterRegistry>,
    tier: TierId,
    src: WriterSource,
}

impl WriterGuard {
    pub fn tier(&self) -> TierId {
        self.tier
    }

    pub fn source(&self) -> WriterSource {
        self.src
    }
}

impl Drop for WriterGuard {
    fn drop(&mut self) {
        self.reg.release_kvs(self.tier, self.src);
    }
}

/// A cache-copy or migration writer slot.
#[derive(Debug)]
pub struct BgSlot {
    reg: Arc<WriterRegistry>,
    tier: TierId,
    src: WriterSource,
    id: u64,
    revoked: Arc<AtomicBool>,
    forced: bool,
}

impl BgSlot {
    pub fn tier(&self) -> TierId {
        self.tier
    }

    pub fn is_forced(&self) -> bool {
        self.forced
    }

    pub fn is_revoked(&self) -> bool {
        self.revoked.load(Ordering::Acquire)
    }

    /// After revocation, waits until the slot can be held again.
    pub fn reacquire(&mut self, timeout: Duration) -> bool {
        if !self.is_revoked() {
            return true;
        }
        let deadline = Instant::now() + timeout;
        let t = &self.reg.tiers[self.tier];
        let mut st = t.st.lock();
        loop {
            if let Some((id, revoked)) = self.reg.grant(self.tier, self.src, &mut st) {
                self.id = id;
                self.revoked = revoked;
                return true;
            }
            if t.cv.wait_until(&mut st, deadline).timed_out() {
                return false;
            }
        }
    }
}

impl Drop for BgSlot {
    fn drop(&mut self) {
        self.reg.release_slot(self);
    }
}

use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use super::policy::copy_replica;
use super::{BgSlot, MigrationTask, TaskReason, WriterSource};
use crate::context::{scoped, IoContext};
use crate::device::Locator;
use crate::error::{Error, Result};
use crate::hierarchy::{EventKind, Hierarchy};
use crate::namespace::{FileClass, FileEntry, Relocation, MIGRATING_SUFFIX};
use crate::TierId;

impl Hierarchy {
    /// Sealed, unpinned SSTs homed on `t`, deepest level first, then least
    /// recently accessed.
    pub fn migration_candidates(&self, t: TierId) -> Vec<(Arc<FileEntry>, u64, u64)> {
        let mut v: Vec<(Arc<FileEntry>, u64, u64, u32, u64)> = self
            .ns
            .entries()
            .into_iter()
            .filter(|e| e.class() == FileClass::Sst)
            .filter_map(|e| {
                let (size, generation, level) = {
                    let st = e.state();
                    if st.unlinked || st.pinned || !st.sealed || st.home.tier_id() != t {
                        return None;
                    }
                    (st.size, st.generation, st.level.unwrap_or(u32::MAX))
                };
                let last = e.last_access();
                Some((e, size, generation, level, last))
            })
            .collect();
        v.sort_by(|a, b| {
            b.3.cmp(&a.3)
                .then(a.4.cmp(&b.4))
                .then_with(|| a.0.path().cmp(b.0.path()))
        });
        v.into_iter().map(|(e, s, g, _, _)| (e, s, g)).collect()
    }

    fn task(&self, entry: Arc<FileEntry>, size: u64, generation: u64, src: TierId, dst: TierId, reason: TaskReason) -> MigrationTask {
        MigrationTask {
            logical_path: entry.path().to_string(),
            src_tier: src,
            dst_tier: dst,
            reason,
            enqueue_tick: self.ns.next_tick(),
            entry,
            generation,
            size,
        }
    }

    /// Background capacity policy for tier `t`. Below the upper threshold,
    /// drops cached copies first, then pins and returns enough migrations to
    /// bring projected free space back to the threshold.
    pub fn migration_tick(&self, t: TierId) -> Vec<MigrationTask> {
        if self.is_last(t) {
            return Vec::new();
        }
        let tier = &self.tiers[t];
        let upper = self.upper_bytes(t);
        if tier.free() >= upper {
            return Vec::new();
        }
        self.evict_for_budget(t);
        let pending = &self.pending_migration[t];
        let mut projected = tier.free() + pending.load(Ordering::Acquire);
        let mut tasks = Vec::new();
        for (e, size, generation) in self.migration_candidates(t) {
            if projected >= upper {
                break;
            }
            if !e.try_pin() {
                continue;
            }
            projected += size;
            pending.fetch_add(size, Ordering::AcqRel);
            tasks.push(self.task(e, size, generation, t, t + 1, TaskReason::Capacity));
        }
        if !tasks.is_empty() {
            self.stats
                .migr_enqueued
                .fetch_add(tasks.len() as u64, Ordering::Relaxed);
            self.log(EventKind::BackgroundMigration { tasks: tasks.len() }, t, None);
        }
        tasks
    }

    /// Moves the task's file to `dst_tier`: copy under a temporary name,
    /// rename, then switch the namespace. Unpins the file.
    pub fn execute_migration(&self, task: &MigrationTask, slot: &mut BgSlot) -> Result<Relocation> {
        let _ctx = scoped(IoContext::Migration);
        let out = self.migration_inner(task, slot);
        task.entry.unpin();
        if task.reason == TaskReason::Capacity {
            self.pending_migration[task.src_tier].fetch_sub(task.size, Ordering::AcqRel);
        }
        match &out {
            Ok(Relocation::Moved) => {
                if task.reason == TaskReason::TrivialMove {
                    self.stats.moves_done.fetch_add(1, Ordering::Relaxed);
                } else {
                    self.stats.migr_done.fetch_add(1, Ordering::Relaxed);
                }
                self.log(
                    EventKind::Migrated { from: task.src_tier },
                    task.dst_tier,
                    Some(&task.logical_path),
                );
            }
            _ => {
                self.stats.migr_skipped.fetch_add(1, Ordering::Relaxed);
                self.log(EventKind::MigrationSkipped, task.src_tier, Some(&task.logical_path));
            }
        }
        out
    }

    fn migration_inner(&self, task: &MigrationTask, slot: &mut BgSlot) -> Result<Relocation> {
        let entry = &task.entry;
        let changed = || {
            let st = entry.state();
            st.unlinked || st.generation != task.generation
        };
        let home = {
            let st = entry.state();
            if st.unlinked || st.generation != task.generation {
                return Ok(Relocation::Skipped);
            }
            st.home.clone()
        };
        if home.tier_id() != task.src_tier {
            return Ok(Relocation::Skipped);
        }
        let dst = self.tiers[task.dst_tier].clone();
        let name = home.locator().name.clone();
        let tmp = Locator::data(format!("{name}{MIGRATING_SUFFIX}"));
        if dst.exists(&tmp) {
            dst.delete(&tmp)?;
        }
        dst.create(&tmp)?;
        match copy_replica(self, &home, &dst, &tmp, self.cfg.copy_chunk, slot, &changed) {
            Ok(true) => {}
            Ok(false) => {
                dst.delete(&tmp)?;
                return Ok(Relocation::Skipped);
            }
            Err(e) => {
                let _ = dst.delete(&tmp);
                return Err(e);
            }
        }
        dst.fsync(&tmp)?;
        let fin = Locator::data(name);
        if let Err(e) = dst.rename(&tmp, &fin) {
            let _ = dst.delete(&tmp);
            return Err(e);
        }
        drop(home);
        self.ns
            .ns_relocate(&task.logical_path, task.dst_tier, fin, Some(task.generation))
    }

    /// Synchronous migration out of `t`, run by the thread that needs the
    /// space. Continues until free space is back at the upper threshold or
    /// nothing more can move, making room on slower tiers first if needed.
    /// Returns whether `t` is at or above the lower threshold afterwards.
    pub fn force_free(&self, t: TierId) -> Result<bool> {
        let tier = self.tiers[t].clone();
        if self.is_last(t) {
            return Ok(tier.free() > 0);
        }
        let _g = self.force_locks[t].lock();
        let upper = self.upper_bytes(t);
        let mut started = false;
        let res = (|| {
            while tier.free() < upper && !self.is_shutting_down() {
                if self.evict_for_budget(t) > 0 && tier.free() >= upper {
                    break;
                }
                let Some((entry, size, generation)) = self
                    .migration_candidates(t)
                    .into_iter()
                    .find(|(e, _, _)| e.try_pin())
                else {
                    break;
                };
                let dst = t + 1;
                let dtier = &self.tiers[dst];
                if !self.is_last(dst) && dtier.free() < size + self.upper_bytes(dst) {
                    self.force_free(dst)?;
                }
                if dtier.free() < size {
                    entry.unpin();
                    self.log(EventKind::AllocationFailure, dst, Some(entry.path()));
                    return Err(Error::AllocationFailure(format!(
                        "no room on tier {dst} to free tier {t}"
                    )));
                }
                if !started {
                    started = true;
                    self.log(EventKind::ForcedMigrationStart, t, Some(entry.path()));
                }
                self.stats.forced.fetch_add(1, Ordering::Relaxed);
                let mut slot = self.registry.acquire_forced(dst);
                let task = self.task(entry, size, generation, t, dst, TaskReason::Forced);
                self.execute_migration(&task, &mut slot)?;
            }
            Ok(())
        })();
        if started {
            self.log(EventKind::ForcedMigrationEnd, t, None);
        }
        res?;
        Ok(tier.free() >= self.lower_bytes(t))
    }

    /// Physically moves a file whose level now maps to a slower tier.
    pub(crate) fn request_move(&self, entry: Arc<FileEntry>, dst: TierId) {
        let (src, size, generation) = {
            let st = entry.state();
            (st.home.tier_id(), st.size, st.generation)
        };
        if dst <= src || !entry.try_pin() {
            return;
        }
        let task = self.task(entry, size, generation, src, dst, TaskReason::TrivialMove);
        if self.background_running() {
            if let Err(e) = self.queues.move_tx.send(task) {
                e.0.entry.unpin();
            }
            return;
        }
        match self
            .registry
            .acquire(dst, WriterSource::Migration, Duration::from_secs(5))
        {
            Some(mut slot) => {
                if let Err(e) = self.execute_migration(&task, &mut slot) {
                    tracing::warn!(path = %task.logical_path, "trivial move failed: {e}");
                }
            }
            None => task.entry.unpin(),
        }
    }

    /// Runs one migration tick for `t` and executes its tasks inline.
    /// Returns how many files moved.
    pub fn migration_step(&self, t: TierId) -> Result<usize> {
        let mut moved = 0;
        for task in self.migration_tick(t) {
            match self.registry.try_acquire(task.dst_tier, WriterSource::Migration) {
                Some(mut slot) => {
                    if self.execute_migration(&task, &mut slot)? == Relocation::Moved {
                        moved += 1;
                    }
                }
                None => {
                    task.entry.unpin();
                    self.pending_migration[t].fetch_sub(task.size, Ordering::AcqRel);
                }
            }
        }
        Ok(moved)
    }
}

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::RecvTimeoutError;

use super::{BgSlot, CapAuditor, MigrationTask, TaskReason, WriterSource};
use crate::hierarchy::Hierarchy;
use crate::TierId;

const POLL: Duration = Duration::from_millis(20);

/// Background threads: one monitor per non-last tier, the cache-copy,
/// migration and trivial-move pools, and the writer-cap auditor.
#[derive(Debug)]
pub struct Manager {
    h: Arc<Hierarchy>,
    stop: Arc<AtomicBool>,
    auditor: Arc<CapAuditor>,
    handles: Vec<JoinHandle<()>>,
}

impl Manager {
    pub fn start(h: Arc<Hierarchy>) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let auditor = Arc::new(CapAuditor::new(h.num_tiers()));
        h.running.store(true, Ordering::Release);
        let mut handles = Vec::new();
        let mut spawn = |name: String, f: Box<dyn FnOnce() + Send>| {
            handles.push(
                std::thread::Builder::new()
                    .name(name)
                    .spawn(f)
                    .expect("spawn background thread"),
            );
        };
        for t in 0..h.num_tiers().saturating_sub(1) {
            let (h, stop) = (h.clone(), stop.clone());
            spawn(format!("monitor-{t}"), Box::new(move || monitor(&h, t, &stop)));
        }
        if h.num_tiers() > 1 {
            for i in 0..h.cfg.pool_cache {
                let (h, stop) = (h.clone(), stop.clone());
                spawn(format!("cache-{i}"), Box::new(move || cache_worker(&h, &stop)));
            }
            for i in 0..h.cfg.pool_migrate {
                let (h, stop) = (h.clone(), stop.clone());
                spawn(
                    format!("migrate-{i}"),
                    Box::new(move || {
                        let rx = h.queues.migr_rx.clone();
                        migration_worker(&h, &stop, &rx)
                    }),
                );
            }
            for i in 0..h.cfg.pool_move {
                let (h, stop) = (h.clone(), stop.clone());
                spawn(
                    format!("move-{i}"),
                    Box::new(move || {
                        let rx = h.queues.move_rx.clone();
                        migration_worker(&h, &stop, &rx)
                    }),
                );
            }
        }
        {
            let (h, stop, auditor) = (h.clone(), stop.clone(), auditor.clone());
            spawn(
                "cap-audit".into(),
                Box::new(move || {
                    while !stop.load(Ordering::Acquire) {
                        auditor.sample(&h.registry);
                        std::thread::sleep(h.cfg.audit_interval);
                    }
                }),
            );
        }
        Manager {
            h,
            stop,
            auditor,
            handles,
        }
    }

    pub fn auditor(&self) -> &Arc<CapAuditor> {
        &self.auditor
    }

    /// Stops every thread and drops queued tasks.
    pub fn stop(&mut self) {
        if self.handles.is_empty() {
            return;
        }
        self.stop.store(true, Ordering::Release);
        self.h.running.store(false, Ordering::Release);
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
        let q = &self.h.queues;
        while let Ok(task) = q.cache_rx.try_recv() {
            task.entry.unpin();
            self.h.cache_inflight[task.dst_tier].fetch_sub(1, Ordering::AcqRel);
        }
        for rx in [&q.migr_rx, &q.move_rx] {
            while let Ok(task) = rx.try_recv() {
                drop_migration(&self.h, &task);
            }
        }
    }
}

impl Drop for Manager {
    fn drop(&mut self) {
        self.stop();
    }
}

fn monitor(h: &Hierarchy, t: TierId, stop: &AtomicBool) {
    let pool = h.cfg.pool_cache;
    while !stop.load(Ordering::Acquire) && !h.is_shutting_down() {
        for _ in 0..h.cfg.cache_tasks_per_tick {
            if h.cache_inflight[t].load(Ordering::Acquire) >= pool {
                break;
            }
            let Some(task) = h.monitor_tick(t) else { break };
            h.cache_inflight[t].fetch_add(1, Ordering::AcqRel);
            if let Err(e) = h.queues.cache_tx.send(task) {
                e.0.entry.unpin();
                h.cache_inflight[t].fetch_sub(1, Ordering::AcqRel);
            }
        }
        for task in h.migration_tick(t) {
            if let Err(e) = h.queues.migr_tx.send(task) {
                drop_migration(h, &e.0);
            }
        }
        match h.queues.wake_rx.recv_timeout(h.cfg.monitor_interval) {
            Ok(_) | Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
}

/// Waits for a slot on `tier`, giving up when the manager stops.
fn slot(h: &Hierarchy, tier: TierId, src: WriterSource, stop: &AtomicBool) -> Option<BgSlot> {
    loop {
        if stop.load(Ordering::Acquire) || h.is_shutting_down() {
            return None;
        }
        if let Some(s) = h.registry.acquire(tier, src, POLL) {
            return Some(s);
        }
    }
}

fn cache_worker(h: &Hierarchy, stop: &AtomicBool) {
    let rx = h.queues.cache_rx.clone();
    while !stop.load(Ordering::Acquire) {
        let task = match rx.recv_timeout(POLL) {
            Ok(t) => t,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => break,
        };
        match slot(h, task.dst_tier, WriterSource::CacheCopy, stop) {
            Some(mut s) => {
                if let Err(e) = h.execute_cache_copy(&task, &mut s) {
                    tracing::warn!(path = %task.logical_path, "cache copy failed: {e}");
                }
            }
            None => task.entry.unpin(),
        }
        h.cache_inflight[task.dst_tier].fetch_sub(1, Ordering::AcqRel);
    }
}

fn migration_worker(
    h: &Hierarchy,
    stop: &AtomicBool,
    rx: &crossbeam_channel::Receiver<MigrationTask>,
) {
    while !stop.load(Ordering::Acquire) {
        let task = match rx.recv_timeout(POLL) {
            Ok(t) => t,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => break,
        };
        match slot(h, task.dst_tier, WriterSource::Migration, stop) {
            Some(mut s) => {
                if let Err(e) = h.execute_migration(&task, &mut s) {
                    tracing::warn!(path = %task.logical_path, "migration failed: {e}");
                }
            }
            None => drop_migration(h, &task),
        }
    }
}

fn drop_migration(h: &Hierarchy, task: &MigrationTask) {
    task.entry.unpin();
    if task.reason == TaskReason::Capacity {
        h.pending_migration[task.src_tier].fetch_sub(task.size, Ordering::AcqRel);
    }
}

impl Hierarchy {
    /// Waits until no cache or migration work is queued or running.
    pub fn quiesce(&self, timeout: Duration) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let q = &self.queues;
            let idle = q.cache_rx.is_empty()
                && q.migr_rx.is_empty()
                && q.move_rx.is_empty()
                && self.cache_inflight.iter().all(|c| c.load(Ordering::Acquire) == 0)
                && self.pending_migration.iter().all(|p| p.load(Ordering::Acquire) == 0)
                && self.ns.entries().iter().all(|e| !e.state().pinned);
            if idle {
                return true;
            }
            if std::time::Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }
}
